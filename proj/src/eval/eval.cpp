#include "susa/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "susa/numerics/log.hpp"
#include "susa/numerics/parallel.hpp"

namespace susa {

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

namespace {

void check_maps(const LabelMap& truth, const LabelMap& pred) {
  if (truth.height != pred.height || truth.width != pred.width) {
    throw ShapeError(fmt::format("confusion: truth is {}x{} but prediction is {}x{}", truth.height,
                                 truth.width, pred.height, pred.width));
  }
  truth.validate();
  pred.validate();
}

void count(ConfusionMatrix& cm, const LabelMap& truth, const LabelMap& pred, std::size_t i) {
  const std::size_t t = truth.ids[i];
  if (t == 0) return;
  const std::size_t p = pred.ids[i];
  if (p == 0 || p > cm.classes) {
    throw std::invalid_argument(
        fmt::format("confusion: labeled pixel {} has prediction {} outside 1..{}", i, p, cm.classes));
  }
  ++cm.at(t - 1, p - 1);
}

}  // namespace

ConfusionMatrix confusion(const LabelMap& truth, const LabelMap& pred) {
  check_maps(truth, pred);
  ConfusionMatrix cm(truth.classes());
  for (std::size_t i = 0; i < truth.ids.size(); ++i) count(cm, truth, pred, i);
  return cm;
}

ConfusionMatrix confusion(const LabelMap& truth, const LabelMap& pred,
                          const std::vector<Pixel>& pixels) {
  check_maps(truth, pred);
  ConfusionMatrix cm(truth.classes());
  for (const auto& [r, c] : pixels) {
    if (r >= truth.height || c >= truth.width) throw std::out_of_range("confusion: pixel outside map");
    count(cm, truth, pred, r * truth.width + c);
  }
  return cm;
}

Metrics metrics(const ConfusionMatrix& cm) {
  const double total = static_cast<double>(cm.total());
  if (total == 0) throw std::invalid_argument("metrics: confusion matrix is empty");
  const std::size_t n = cm.classes;
  Metrics m;
  m.recall.assign(n, std::numeric_limits<double>::quiet_NaN());
  double trace = 0.0, chance = 0.0, recall_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n; ++c) {
    double row = 0.0, col = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      row += static_cast<double>(cm.at(c, k));
      col += static_cast<double>(cm.at(k, c));
    }
    trace += static_cast<double>(cm.at(c, c));
    chance += row * col;
    if (row > 0) {
      m.recall[c] = static_cast<double>(cm.at(c, c)) / row;
      recall_sum += m.recall[c];
      ++present;
    }
  }
  m.oa = trace / total;
  m.aa = recall_sum / static_cast<double>(present);
  const double pe = chance / (total * total);
  if (pe >= 1.0) {
    m.kappa = 0.0;
    m.kappa_degenerate = true;
  } else {
    m.kappa = (m.oa - pe) / (1.0 - pe);
  }
  return m;
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace {

struct RankedColumns {
  std::size_t features = 0;
  std::vector<std::vector<double>> centered;  // ranks minus their mean
  std::vector<double> sum_sq;
};

Tensor<float> as_matrix(const Tensor<float>& t, const char* which) {
  if (t.rank() < 2) throw ShapeError(fmt::format("dissimilarity: {} must be [pixels, features]", which));
  const std::size_t f = t.shape().back();
  return t.reshaped({t.size() / f, f});
}

RankedColumns rank_columns(const Tensor<float>& m, const std::vector<std::size_t>& rows) {
  RankedColumns rc;
  rc.features = m.dim(1);
  rc.centered.resize(rc.features);
  rc.sum_sq.resize(rc.features);
  parallel_chunks(rc.features, [&](std::size_t, std::size_t begin, std::size_t end) {
    std::vector<double> col(rows.size());
    for (std::size_t f = begin; f < end; ++f) {
      for (std::size_t i = 0; i < rows.size(); ++i) col[i] = m[rows[i] * rc.features + f];
      auto r = average_ranks(col);
      const double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
      double ss = 0.0;
      for (auto& v : r) {
        v -= mean;
        ss += v * v;
      }
      rc.sum_sq[f] = ss;
      rc.centered[f] = std::move(r);
    }
  });
  return rc;
}

}  // namespace

std::vector<double> spearman_matrix(const Tensor<float>& x, const Tensor<float>& y,
                                    const DissimilarityOptions& options) {
  const auto mx = as_matrix(x, "X"), my = as_matrix(y, "Y");
  const std::size_t pixels = mx.dim(0);
  if (my.dim(0) != pixels) {
    throw ShapeError(fmt::format("dissimilarity: X has {} pixels, Y has {}", pixels, my.dim(0)));
  }
  if (pixels < 2) throw std::invalid_argument("dissimilarity: need at least two pixels");
  std::vector<std::size_t> rows(pixels);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  if (options.max_pixels > 0 && options.max_pixels < pixels) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(std::max<std::size_t>(options.max_pixels, 2));
    std::sort(rows.begin(), rows.end());
  }
  const auto rx = rank_columns(mx, rows), ry = rank_columns(my, rows);
  std::vector<double> r(rx.features * ry.features, 0.0);
  std::size_t constant_pairs = 0;
  for (std::size_t i = 0; i < rx.features; ++i) {
    for (std::size_t j = 0; j < ry.features; ++j) {
      if (rx.sum_sq[i] == 0.0 || ry.sum_sq[j] == 0.0) {
        ++constant_pairs;
        continue;
      }
      double dot = 0.0;
      const auto& a = rx.centered[i];
      const auto& b = ry.centered[j];
      for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
      r[i * ry.features + j] = dot / std::sqrt(rx.sum_sq[i] * ry.sum_sq[j]);
    }
  }
  if (constant_pairs > 0) {
    log::warn("spearman_constant_feature", {{"pairs", std::to_string(constant_pairs)}});
  }
  return r;
}

double dissimilarity(const Tensor<float>& x, const Tensor<float>& y,
                     const DissimilarityOptions& options) {
  const auto r = spearman_matrix(x, y, options);
  const std::size_t fx = x.shape().back(), fy = y.shape().back();
  double sum = 0.0;
  for (std::size_t i = 0; i < fx; ++i) {
    sum += *std::max_element(r.begin() + static_cast<std::ptrdiff_t>(i * fy),
                             r.begin() + static_cast<std::ptrdiff_t>((i + 1) * fy));
  }
  return 1.0 - sum / static_cast<double>(fx);
}

}  // namespace susa
