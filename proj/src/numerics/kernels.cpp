#include "susa/numerics/kernels.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

#include "susa/numerics/parallel.hpp"

namespace susa::kernels {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

void require_rank(const Shape& shape, std::size_t rank, std::string_view what) {
  if (shape.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(shape));
  }
}

struct ConvGeometry {
  std::size_t n, h, w, cin, k, cout, ho, wo, pad;
  bool edge = false;
  std::size_t cols() const { return k * k * cin; }
  std::size_t pixels_out() const { return ho * wo; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& weights, Padding pad) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(weights.shape(), 4, "conv2d weights");
  const auto& is = input.shape();
  const auto& ws = weights.shape();
  if (ws[0] != ws[1] || ws[0] % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd size, got weights " +
                     shape_string(ws));
  }
  if (ws[2] != is[3]) {
    throw ShapeError("conv2d: input " + shape_string(is) + " does not match weights " +
                     shape_string(ws));
  }
  ConvGeometry g{is[0], is[1], is[2], is[3], ws[0], ws[3], 0, 0, 0};
  if (pad == Padding::same || pad == Padding::edge) {
    g.pad = (g.k - 1) / 2;
    g.edge = pad == Padding::edge;
    g.ho = g.h;
    g.wo = g.w;
  } else {
    if (g.h < g.k || g.w < g.k) {
      throw ShapeError("conv2d: valid padding needs input " + shape_string(is) +
                       " at least as large as weights " + shape_string(ws));
    }
    g.ho = g.h - g.k + 1;
    g.wo = g.w - g.k + 1;
  }
  return g;
}

// Rows of the column buffer are output pixels of samples [first, first+count).
template <typename T>
void im2col(const T* input, const ConvGeometry& g, std::size_t first, std::size_t count, T* col) {
  const std::size_t ncols = g.cols();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t s = 0; s < count; ++s) {
    const T* img = input + (first + s) * g.h * g.w * g.cin;
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        T* row = col + ((s * g.ho + oy) * g.wo + ox) * ncols;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
          if (g.edge) iy = std::clamp<std::ptrdiff_t>(iy, 0, static_cast<std::ptrdiff_t>(g.h) - 1);
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
            if (g.edge) ix = std::clamp<std::ptrdiff_t>(ix, 0, static_cast<std::ptrdiff_t>(g.w) - 1);
            T* dst = row + (ky * g.k + kx) * g.cin;
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) ||
                ix >= static_cast<std::ptrdiff_t>(g.w)) {
              std::fill(dst, dst + g.cin, T{0});
            } else {
              const T* src = img + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
              std::copy(src, src + g.cin, dst);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, std::size_t first, std::size_t count,
                T* grad_input) {
  const std::size_t ncols = g.cols();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t s = 0; s < count; ++s) {
    T* img = grad_input + (first + s) * g.h * g.w * g.cin;
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        const T* row = col + ((s * g.ho + oy) * g.wo + ox) * ncols;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
          if (g.edge) iy = std::clamp<std::ptrdiff_t>(iy, 0, static_cast<std::ptrdiff_t>(g.h) - 1);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
            if (g.edge) ix = std::clamp<std::ptrdiff_t>(ix, 0, static_cast<std::ptrdiff_t>(g.w) - 1);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            const T* src = row + (ky * g.k + kx) * g.cin;
            T* dst = img + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
            for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

// Per-thread column buffer, grown on demand and never cleared: im2col
// overwrites every element it hands to the GEMM.
template <typename T>
T* scratch(std::size_t n) {
  thread_local std::unique_ptr<T[]> buf;
  thread_local std::size_t capacity = 0;
  if (n > capacity) {
    buf.reset(new T[n]);
    capacity = n;
  }
  return buf.get();
}

// Samples per GEMM so that small feature maps still produce tall matrices.
std::size_t samples_per_group(const ConvGeometry& g) {
  constexpr std::size_t target_rows = 4096;
  return std::max<std::size_t>(1, target_rows / std::max<std::size_t>(1, g.pixels_out()));
}

std::size_t reflect_index(std::size_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  std::size_t j = i % period;
  return j < n ? j : period - j;
}

struct PoolGeometry {
  std::size_t n, h, w, c, ho, wo, pad_y, pad_x;
};

PoolGeometry pool_geometry(const Shape& shape, const PoolSpec& spec) {
  require_rank(shape, 4, "pool2d input");
  if (spec.pad == Padding::edge) throw std::invalid_argument("pool2d: edge padding is not supported");
  if (spec.window < 1 || spec.stride < 1) {
    throw std::invalid_argument("pool2d: window and stride must be >= 1");
  }
  PoolGeometry g{shape[0], shape[1], shape[2], shape[3], 0, 0, 0, 0};
  if (spec.pad == Padding::same) {
    g.ho = (g.h + spec.stride - 1) / spec.stride;
    g.wo = (g.w + spec.stride - 1) / spec.stride;
    const std::size_t need_y = (g.ho - 1) * spec.stride + spec.window;
    const std::size_t need_x = (g.wo - 1) * spec.stride + spec.window;
    const std::size_t total_y = need_y > g.h ? need_y - g.h : 0;
    const std::size_t total_x = need_x > g.w ? need_x - g.w : 0;
    if (spec.window > g.h + total_y || spec.window > g.w + total_x) {
      throw ShapeError("pool2d: window larger than padded input " + shape_string(shape));
    }
    g.pad_y = total_y / 2;
    g.pad_x = total_x / 2;
  } else {
    if (spec.window > g.h || spec.window > g.w) {
      throw ShapeError("pool2d: window " + std::to_string(spec.window) +
                       " larger than input " + shape_string(shape));
    }
    g.ho = (g.h - spec.window) / spec.stride + 1;
    g.wo = (g.w - spec.window) / spec.stride + 1;
  }
  return g;
}

// out = a · b for row-major a [rows, k] and b [k, cols]. Eigen finishes the
// last rows % 4 rows on a scalar path that rounds differently from the packet
// path, so those rows go through a zero-padded 4-row product instead. Equal
// input rows then give bitwise-equal output rows.
template <typename T>
void row_uniform_product(const T* a, std::size_t rows, std::size_t k, const T* b, std::size_t cols,
                         T* out) {
  const auto ki = static_cast<Eigen::Index>(k);
  const auto ci = static_cast<Eigen::Index>(cols);
  ConstMatMap<T> bm(b, ki, ci);
  const std::size_t body = rows - rows % 4;
  if (body > 0) {
    MatMap<T>(out, static_cast<Eigen::Index>(body), ci).noalias() =
        ConstMatMap<T>(a, static_cast<Eigen::Index>(body), ki) * bm;
  }
  const std::size_t tail = rows - body;
  if (tail == 0) return;
  RowMatrix<T> pad = RowMatrix<T>::Zero(4, ki);
  std::copy(a + body * k, a + rows * k, pad.data());
  RowMatrix<T> res(4, ci);
  res.noalias() = pad * bm;
  std::copy(res.data(), res.data() + tail * cols, out + body * cols);
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, Padding pad) {
  const ConvGeometry g = conv_geometry(input, weights, pad);
  Tensor<T> out({g.n, g.ho, g.wo, g.cout});
  const std::size_t group = samples_per_group(g);
  const std::size_t groups = (g.n + group - 1) / group;
  parallel_chunks(groups, [&](std::size_t, std::size_t gb, std::size_t ge) {
    for (std::size_t gi = gb; gi < ge; ++gi) {
      const std::size_t first = gi * group;
      const std::size_t count = std::min(group, g.n - first);
      const std::size_t rows = count * g.pixels_out();
      T* col = scratch<T>(rows * g.cols());
      im2col(input.data(), g, first, count, col);
      row_uniform_product(col, rows, g.cols(), weights.data(), g.cout,
                          out.data() + first * g.pixels_out() * g.cout);
    }
  });
  return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weights,
                               const Tensor<T>& grad_output, Padding pad, bool need_input_grad) {
  const ConvGeometry g = conv_geometry(input, weights, pad);
  require_same_shape(grad_output.shape(), Shape{g.n, g.ho, g.wo, g.cout}, "conv2d_backward");
  Conv2dGrads<T> grads;
  grads.weights = Tensor<T>(weights.shape());
  if (need_input_grad) grads.input = Tensor<T>(input.shape());

  const std::size_t group = samples_per_group(g);
  const std::size_t groups = (g.n + group - 1) / group;
  const std::size_t chunks = chunk_count(groups);
  std::vector<RowMatrix<T>> partial(chunks, RowMatrix<T>::Zero(static_cast<Eigen::Index>(g.cols()),
                                                               static_cast<Eigen::Index>(g.cout)));
  ConstMatMap<T> wmat(weights.data(), static_cast<Eigen::Index>(g.cols()),
                      static_cast<Eigen::Index>(g.cout));
  parallel_chunks(groups, [&](std::size_t chunk, std::size_t gb, std::size_t ge) {
    for (std::size_t gi = gb; gi < ge; ++gi) {
      const std::size_t first = gi * group;
      const std::size_t count = std::min(group, g.n - first);
      const std::size_t rows = count * g.pixels_out();
      T* col = scratch<T>(rows * g.cols());
      im2col(input.data(), g, first, count, col);
      MatMap<T> cmat(col, static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(g.cols()));
      ConstMatMap<T> dy(grad_output.data() + first * g.pixels_out() * g.cout,
                        static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(g.cout));
      partial[chunk].noalias() += cmat.transpose() * dy;
      if (need_input_grad) {
        cmat.noalias() = dy * wmat.transpose();
        col2im_add(col, g, first, count, grads.input.data());
      }
    }
  });
  MatMap<T> dw(grads.weights.data(), static_cast<Eigen::Index>(g.cols()),
               static_cast<Eigen::Index>(g.cout));
  for (const auto& p : partial) dw += p;
  return grads;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& input, const Tensor<T>& bias) {
  if (input.rank() == 0 || bias.rank() != 1 || bias.dim(0) != input.shape().back()) {
    throw ShapeError("add_bias: input " + shape_string(input.shape()) + " vs bias " +
                     shape_string(bias.shape()));
  }
  Tensor<T> out = input;
  const std::size_t c = bias.size();
  T* o = out.data();
  for (std::size_t i = 0; i < out.size(); i += c) {
    for (std::size_t j = 0; j < c; ++j) o[i + j] += bias[j];
  }
  return out;
}

template <typename T>
Tensor<T> bias_backward(const Tensor<T>& grad_output) {
  const std::size_t c = grad_output.shape().back();
  Tensor<T> out({c});
  const T* g = grad_output.data();
  for (std::size_t i = 0; i < grad_output.size(); i += c) {
    for (std::size_t j = 0; j < c; ++j) out[j] += g[i + j];
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
PoolResult<T> pool2d(const Tensor<T>& input, const PoolSpec& spec) {
  const PoolGeometry g = pool_geometry(input.shape(), spec);
  PoolResult<T> res;
  res.input_shape = input.shape();
  res.output = Tensor<T>({g.n, g.ho, g.wo, g.c});
  if (spec.kind == PoolKind::max) res.argmax.assign(res.output.size(), 0);
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy * spec.stride) -
                                static_cast<std::ptrdiff_t>(g.pad_y);
      const std::size_t ylo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, y0));
      const std::size_t yhi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
          static_cast<std::ptrdiff_t>(g.h), y0 + static_cast<std::ptrdiff_t>(spec.window)));
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(ox * spec.stride) -
                                  static_cast<std::ptrdiff_t>(g.pad_x);
        const std::size_t xlo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, x0));
        const std::size_t xhi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
            static_cast<std::ptrdiff_t>(g.w), x0 + static_cast<std::ptrdiff_t>(spec.window)));
        for (std::size_t c = 0; c < g.c; ++c) {
          const std::size_t oi = ((n * g.ho + oy) * g.wo + ox) * g.c + c;
          if (spec.kind == PoolKind::mean) {
            // A float window sums exactly in double, so constant regions stay constant.
            double sum = 0.0;
            for (std::size_t y = ylo; y < yhi; ++y) {
              for (std::size_t x = xlo; x < xhi; ++x) sum += input.at(n, y, x, c);
            }
            res.output[oi] = static_cast<T>(sum / static_cast<double>((yhi - ylo) * (xhi - xlo)));
          } else {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t best_i = 0;
            for (std::size_t y = ylo; y < yhi; ++y) {
              for (std::size_t x = xlo; x < xhi; ++x) {
                const std::size_t ii = ((n * g.h + y) * g.w + x) * g.c + c;
                if (input[ii] > best) {
                  best = input[ii];
                  best_i = ii;
                }
              }
            }
            res.output[oi] = best;
            res.argmax[oi] = best_i;
          }
        }
      }
    }
  }
  return res;
}

template <typename T>
Tensor<T> pool2d_backward(const PoolResult<T>& forward, const Tensor<T>& grad_output,
                          const PoolSpec& spec) {
  require_same_shape(grad_output.shape(), forward.output.shape(), "pool2d_backward");
  Tensor<T> grad(forward.input_shape);
  if (spec.kind == PoolKind::max) {
    for (std::size_t i = 0; i < grad_output.size(); ++i) grad[forward.argmax[i]] += grad_output[i];
    return grad;
  }
  const PoolGeometry g = pool_geometry(forward.input_shape, spec);
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oy = 0; oy < g.ho; ++oy) {
      const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy * spec.stride) -
                                static_cast<std::ptrdiff_t>(g.pad_y);
      const std::size_t ylo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, y0));
      const std::size_t yhi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
          static_cast<std::ptrdiff_t>(g.h), y0 + static_cast<std::ptrdiff_t>(spec.window)));
      for (std::size_t ox = 0; ox < g.wo; ++ox) {
        const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(ox * spec.stride) -
                                  static_cast<std::ptrdiff_t>(g.pad_x);
        const std::size_t xlo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, x0));
        const std::size_t xhi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
            static_cast<std::ptrdiff_t>(g.w), x0 + static_cast<std::ptrdiff_t>(spec.window)));
        const T inv = T{1} / static_cast<T>((yhi - ylo) * (xhi - xlo));
        for (std::size_t c = 0; c < g.c; ++c) {
          const T share = grad_output[((n * g.ho + oy) * g.wo + ox) * g.c + c] * inv;
          for (std::size_t y = ylo; y < yhi; ++y) {
            for (std::size_t x = xlo; x < xhi; ++x) grad.at(n, y, x, c) += share;
          }
        }
      }
    }
  }
  return grad;
}

template <typename T>
Tensor<T> upsample_nearest2d(const Tensor<T>& input, std::size_t factor) {
  require_rank(input.shape(), 4, "upsample_nearest2d");
  if (factor < 1) throw std::invalid_argument("upsample_nearest2d: factor must be >= 1");
  const auto& s = input.shape();
  Tensor<T> out({s[0], s[1] * factor, s[2] * factor, s[3]});
  const std::size_t c = s[3];
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t y = 0; y < s[1] * factor; ++y) {
      for (std::size_t x = 0; x < s[2] * factor; ++x) {
        const T* src = &input.at(n, y / factor, x / factor, 0);
        std::copy(src, src + c, &out.at(n, y, x, 0));
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest2d_backward(const Tensor<T>& grad_output, std::size_t factor) {
  require_rank(grad_output.shape(), 4, "upsample_nearest2d_backward");
  if (factor < 1) throw std::invalid_argument("upsample_nearest2d: factor must be >= 1");
  const auto& s = grad_output.shape();
  if (s[1] % factor || s[2] % factor) {
    throw ShapeError("upsample_nearest2d_backward: " + shape_string(s) +
                     " not divisible by factor " + std::to_string(factor));
  }
  Tensor<T> grad({s[0], s[1] / factor, s[2] / factor, s[3]});
  const std::size_t c = s[3];
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t y = 0; y < s[1]; ++y) {
      for (std::size_t x = 0; x < s[2]; ++x) {
        const T* src = &grad_output.at(n, y, x, 0);
        T* dst = &grad.at(n, y / factor, x / factor, 0);
        for (std::size_t i = 0; i < c; ++i) dst[i] += src[i];
      }
    }
  }
  return grad;
}

template <typename T>
Tensor<T> reflect_pad_to(const Tensor<T>& input, std::size_t height, std::size_t width) {
  const bool batched = input.rank() == 4;
  if (!batched && input.rank() != 3) {
    throw ShapeError("reflect_pad_to: expected [H,W,C] or [N,H,W,C], got " +
                     shape_string(input.shape()));
  }
  const Tensor<T> x = batched ? input : input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)});
  const auto& s = x.shape();
  if (height < s[1] || width < s[2]) {
    throw ShapeError("reflect_pad_to: target smaller than input " + shape_string(input.shape()));
  }
  Tensor<T> out({s[0], height, width, s[3]});
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t y = 0; y < height; ++y) {
      const std::size_t sy = reflect_index(y, s[1]);
      for (std::size_t xx = 0; xx < width; ++xx) {
        const std::size_t sx = reflect_index(xx, s[2]);
        const T* src = &x.at(n, sy, sx, 0);
        std::copy(src, src + s[3], &out.at(n, y, xx, 0));
      }
    }
  }
  if (!batched) return std::move(out).reshaped({height, width, s[3]});
  return out;
}

template <typename T>
Tensor<T> crop_to(const Tensor<T>& input, std::size_t height, std::size_t width) {
  const bool batched = input.rank() == 4;
  if (!batched && input.rank() != 3) {
    throw ShapeError("crop_to: expected [H,W,C] or [N,H,W,C], got " + shape_string(input.shape()));
  }
  const Tensor<T> x = batched ? input : input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)});
  const auto& s = x.shape();
  if (height > s[1] || width > s[2]) {
    throw ShapeError("crop_to: target larger than input " + shape_string(input.shape()));
  }
  Tensor<T> out({s[0], height, width, s[3]});
  for (std::size_t n = 0; n < s[0]; ++n) {
    for (std::size_t y = 0; y < height; ++y) {
      const T* src = &x.at(n, y, 0, 0);
      std::copy(src, src + width * s[3], &out.at(n, y, 0, 0));
    }
  }
  if (!batched) return std::move(out).reshaped({height, width, s[3]});
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: nothing to concatenate");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank() || !std::equal(lead.begin(), lead.end(), p.shape().begin())) {
      throw ShapeError("concat_channels: " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    }
    total += p.shape().back();
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor<T> out(out_shape);
  const std::size_t rows = shape_size(lead);
  T* o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (const auto& p : parts) {
      const std::size_t c = p.shape().back();
      const T* src = p.data() + r * c;
      o = std::copy(src, src + c, o);
    }
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.rank() == 0 ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw ShapeError("concat_channels: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const std::size_t ca = a.shape().back(), cb = b.shape().back();
  Shape out_shape = a.shape();
  out_shape.back() = ca + cb;
  Tensor<T> out(out_shape);
  const std::size_t rows = a.size() / std::max<std::size_t>(ca, 1);
  T* o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    o = std::copy(a.data() + r * ca, a.data() + (r + 1) * ca, o);
    o = std::copy(b.data() + r * cb, b.data() + (r + 1) * cb, o);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& grad, std::size_t first_channels) {
  const std::size_t c = grad.shape().back();
  if (first_channels > c) {
    throw ShapeError("split_channels: cannot split " + std::to_string(first_channels) +
                     " channels off " + shape_string(grad.shape()));
  }
  Shape sa = grad.shape(), sb = grad.shape();
  sa.back() = first_channels;
  sb.back() = c - first_channels;
  Tensor<T> a(sa), b(sb);
  const std::size_t rows = grad.size() / std::max<std::size_t>(c, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = grad.data() + r * c;
    std::copy(src, src + first_channels, a.data() + r * first_channels);
    std::copy(src + first_channels, src + c, b.data() + r * (c - first_channels));
  }
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------

template <typename T>
void validate(const PeluParams<T>& params) {
  if (!(params.a > T{0}) || !(params.b > T{0})) {
    throw std::invalid_argument("pelu: parameters must be positive (a=" +
                                std::to_string(static_cast<double>(params.a)) +
                                ", b=" + std::to_string(static_cast<double>(params.b)) + ")");
  }
}

template <typename T>
Tensor<T> pelu(const Tensor<T>& input, PeluParams<T> params) {
  validate(params);
  Tensor<T> out(input.shape());
  const T slope = params.a / params.b;
  const T inv_b = T{1} / params.b;
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T h = input[i];
    out[i] = h >= T{0} ? slope * h : params.a * std::expm1(h * inv_b);
  }
  return out;
}

template <typename T>
PeluGrads<T> pelu_backward(const Tensor<T>& input, PeluParams<T> params,
                           const Tensor<T>& grad_output) {
  validate(params);
  require_same_shape(input.shape(), grad_output.shape(), "pelu_backward");
  PeluGrads<T> g;
  g.input = Tensor<T>(input.shape());
  const T a = params.a, b = params.b;
  const T inv_b = T{1} / b;
  double da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T h = input[i];
    const T dy = grad_output[i];
    if (h >= T{0}) {
      g.input[i] = dy * a * inv_b;
      da += static_cast<double>(dy * h * inv_b);
      db -= static_cast<double>(dy * a * h * inv_b * inv_b);
    } else {
      const T e = std::exp(h * inv_b);
      g.input[i] = dy * a * inv_b * e;
      da += static_cast<double>(dy * (e - T{1}));
      db -= static_cast<double>(dy * a * h * e * inv_b * inv_b);
    }
  }
  g.a = static_cast<T>(da);
  g.b = static_cast<T>(db);
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_output) {
  require_same_shape(input.shape(), grad_output.shape(), "relu_backward");
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? grad_output[i] : T{0};
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  require_rank(input.shape(), 2, "dense input");
  require_rank(weights.shape(), 2, "dense weights");
  if (input.dim(1) != weights.dim(0) || bias.rank() != 1 || bias.dim(0) != weights.dim(1)) {
    throw ShapeError("dense: input " + shape_string(input.shape()) + " vs weights " +
                     shape_string(weights.shape()) + " and bias " + shape_string(bias.shape()));
  }
  const auto n = static_cast<Eigen::Index>(input.dim(0));
  const auto fout = static_cast<Eigen::Index>(weights.dim(1));
  Tensor<T> out({input.dim(0), weights.dim(1)});
  row_uniform_product(input.data(), input.dim(0), weights.dim(0), weights.data(), weights.dim(1),
                      out.data());
  MatMap<T> y(out.data(), n, fout);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data(), fout);
  y.rowwise() += b;
  return out;
}

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& input, const Tensor<T>& weights,
                             const Tensor<T>& grad_output, bool need_input_grad) {
  require_rank(input.shape(), 2, "dense_backward input");
  require_same_shape(grad_output.shape(), Shape{input.dim(0), weights.dim(1)}, "dense_backward");
  const auto n = static_cast<Eigen::Index>(input.dim(0));
  const auto fin = static_cast<Eigen::Index>(weights.dim(0));
  const auto fout = static_cast<Eigen::Index>(weights.dim(1));
  DenseGrads<T> g;
  g.weights = Tensor<T>(weights.shape());
  g.bias = bias_backward(grad_output);
  ConstMatMap<T> x(input.data(), n, fin);
  ConstMatMap<T> dy(grad_output.data(), n, fout);
  MatMap<T> dw(g.weights.data(), fin, fout);
  dw.noalias() = x.transpose() * dy;
  if (need_input_grad) {
    g.input = Tensor<T>(input.shape());
    ConstMatMap<T> w(weights.data(), fin, fout);
    MatMap<T> dx(g.input.data(), n, fin);
    dx.noalias() = dy * w.transpose();
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
Accum<T> mse_value(const Tensor<T>& prediction, const Tensor<T>& target) {
  using A = Accum<T>;
  require_same_shape(prediction.shape(), target.shape(), "loss_mse");
  if (prediction.empty()) throw std::invalid_argument("loss_mse: empty tensors");
  A sum = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const A d = static_cast<A>(prediction[i]) - static_cast<A>(target[i]);
    sum += d * d;
  }
  return sum / static_cast<A>(prediction.size());
}

template <typename T>
LossResult<T> loss_mse(const Tensor<T>& prediction, const Tensor<T>& target) {
  LossResult<T> r;
  r.value = mse_value(prediction, target);
  r.grad = Tensor<T>(prediction.shape());
  const T scale = T{2} / static_cast<T>(prediction.size());
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    r.grad[i] = scale * (prediction[i] - target[i]);
  }
  return r;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits.shape(), 2, "softmax");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * c;
    T* o = out.data() + i * c;
    const T mx = *std::max_element(row, row + c);
    T sum{0};
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(row[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < c; ++j) o[j] /= sum;
  }
  return out;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probabilities, const Tensor<T>& grad_output) {
  require_same_shape(probabilities.shape(), grad_output.shape(), "softmax_backward");
  const std::size_t n = probabilities.dim(0), c = probabilities.dim(1);
  Tensor<T> out(probabilities.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* p = probabilities.data() + i * c;
    const T* g = grad_output.data() + i * c;
    T dot{0};
    for (std::size_t j = 0; j < c; ++j) dot += p[j] * g[j];
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = p[j] * (g[j] - dot);
  }
  return out;
}

template <typename T>
LossResult<T> loss_softmax_crossentropy(const Tensor<T>& logits,
                                        std::span<const std::size_t> labels) {
  require_rank(logits.shape(), 2, "loss_softmax_crossentropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("loss_softmax_crossentropy: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_string(logits.shape()));
  }
  if (n == 0) throw std::invalid_argument("loss_softmax_crossentropy: empty batch");
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) {
      throw std::out_of_range("loss_softmax_crossentropy: label " + std::to_string(labels[i]) +
                              " outside [0, " + std::to_string(c) + ")");
    }
  }
  using A = Accum<T>;
  LossResult<T> r;
  r.grad = softmax(logits);
  A total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * c;
    const A mx = static_cast<A>(*std::max_element(row, row + c));
    A sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<A>(row[j]) - mx);
    total += std::log(sum) + mx - static_cast<A>(row[labels[i]]);
  }
  r.value = total / static_cast<A>(n);
  const T inv_n = T{1} / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.grad[i * c + labels[i]] -= T{1};
    for (std::size_t j = 0; j < c; ++j) r.grad[i * c + j] *= inv_n;
  }
  return r;
}

// ---------------------------------------------------------------------------

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& x) {
  if (acc.empty()) {
    acc = x;
    return;
  }
  require_same_shape(acc.shape(), x.shape(), "add_inplace");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

template <typename T>
void scale_inplace(Tensor<T>& acc, T factor) {
  for (auto& v : acc.values()) v *= factor;
}

template <typename T>
Tensor<T> scaled(const Tensor<T>& x, T factor) {
  Tensor<T> out = x;
  scale_inplace(out, factor);
  return out;
}

#define SUSA_INSTANTIATE_KERNELS(T)                                                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, Padding);                     \
  template Conv2dGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                          Padding, bool);                                      \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> bias_backward(const Tensor<T>&);                                          \
  template PoolResult<T> pool2d(const Tensor<T>&, const PoolSpec&);                            \
  template Tensor<T> pool2d_backward(const PoolResult<T>&, const Tensor<T>&, const PoolSpec&); \
  template Tensor<T> upsample_nearest2d(const Tensor<T>&, std::size_t);                        \
  template Tensor<T> upsample_nearest2d_backward(const Tensor<T>&, std::size_t);               \
  template Tensor<T> reflect_pad_to(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> crop_to(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> concat_channels(std::span<const Tensor<T>>);                              \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                      \
  template std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>&, std::size_t);      \
  template void validate(const PeluParams<T>&);                                                \
  template Tensor<T> pelu(const Tensor<T>&, PeluParams<T>);                                    \
  template PeluGrads<T> pelu_backward(const Tensor<T>&, PeluParams<T>, const Tensor<T>&);      \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template DenseGrads<T> dense_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                        bool);                                                 \
  template Accum<T> mse_value(const Tensor<T>&, const Tensor<T>&);                                 \
  template LossResult<T> loss_mse(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> softmax(const Tensor<T>&);                                                \
  template Tensor<T> softmax_backward(const Tensor<T>&, const Tensor<T>&);                     \
  template LossResult<T> loss_softmax_crossentropy(const Tensor<T>&,                           \
                                                   std::span<const std::size_t>);              \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                     \
  template void scale_inplace(Tensor<T>&, T);                                                  \
  template Tensor<T> scaled(const Tensor<T>&, T);

SUSA_INSTANTIATE_KERNELS(float)
SUSA_INSTANTIATE_KERNELS(double)
// Extended precision serves finite-difference references.
SUSA_INSTANTIATE_KERNELS(long double)

#undef SUSA_INSTANTIATE_KERNELS

}  // namespace susa::kernels
