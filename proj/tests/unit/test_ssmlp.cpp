#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "susa/numerics/kernels.hpp"
#include "susa/ssmlp/ssmlp.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace susa;
using namespace susa::oracle;
namespace k = susa::kernels;

namespace {

SsmlpConfig small_config() {
  SsmlpConfig c;
  c.hidden_widths = {24, 16, 12, 8};
  return c;
}

const Parameter<float>& param(const SsmlpModel<float>& m, const std::string& name) {
  for (const auto& p : m.params) {
    if (p.name == name) return p;
  }
  throw std::runtime_error("no parameter " + name);
}

// Labeled [N,F] pixels of a synthetic scene plus the rest of the image as an
// unlabeled pool, all standardized with full-image statistics.
struct PixelTask {
  SyntheticScene scene;
  Tensor<float> image;  // [H*W, B] standardized
  FeatureStats stats;
  LowShotSplit split;
  Tensor<float> labeled;
  std::vector<std::size_t> labels;
};

PixelTask pixel_task(std::size_t per_class, std::uint64_t seed) {
  SyntheticSceneSpec spec;
  spec.bands = 16;
  spec.height = 40;
  spec.width = 40;
  spec.seed = seed;
  PixelTask t{synth_scene(spec), {}, {}, {}, {}, {}};
  const std::size_t h = spec.height, w = spec.width, b = spec.bands;
  t.image = t.scene.cube.values.reshaped({h * w, b});
  t.stats = standardize(t.image);
  t.split = lowshot_split(t.scene.labels, per_class, seed);
  std::size_t n = t.split.total();
  t.labeled = Tensor<float>({n, b});
  std::size_t row = 0;
  for (std::size_t c = 0; c < t.split.pixels.size(); ++c) {
    for (const auto& [r, col] : t.split.pixels[c]) {
      const std::size_t src = r * w + col;
      std::copy(t.image.data() + src * b, t.image.data() + (src + 1) * b, t.labeled.data() + row * b);
      t.labels.push_back(c);
      ++row;
    }
  }
  return t;
}


}  // namespace

TEST_CASE("build_ssmlp") {
  SUBCASE("full-size first layer") {
    const auto m = build_ssmlp<float>(SsmlpConfig{}, 3840, 9, 1);
    CHECK(param(m, "enc1.w").value.shape() == Shape{3840, 1600});
    CHECK(param(m, "enc1.w").value.size() == 3840u * 1600u);
    CHECK(param(m, "head.w").value.shape() == Shape{225, 9});
  }
  SUBCASE("decoder mirrors the encoder with a class-layer stage") {
    const auto m = build_ssmlp<float>(small_config(), 7, 3, 1);
    CHECK(param(m, "rec5.w").value.shape() == Shape{3, 3});
    CHECK(param(m, "rec4.w").value.shape() == Shape{3, 8});
    CHECK(param(m, "rec3.w").value.shape() == Shape{8, 12});
    CHECK(param(m, "rec2.w").value.shape() == Shape{12, 16});
    CHECK(param(m, "rec1.w").value.shape() == Shape{16, 24});
    CHECK(param(m, "rec0.w").value.shape() == Shape{24, 7});
    CHECK_THROWS(param(m, "rec0.pelu_a"));
    CHECK(param(m, "rec1.pelu_a").kind == ParamKind::pelu);
  }
  SUBCASE("same seed, same model") {
    const auto a = build_ssmlp<float>(small_config(), 7, 3, 4);
    const auto b = build_ssmlp<float>(small_config(), 7, 3, 4);
    const auto c = build_ssmlp<float>(small_config(), 7, 3, 5);
    for (std::size_t i = 0; i < a.params.size(); ++i) CHECK(test::identical(a.params[i].value, b.params[i].value));
    CHECK_FALSE(test::identical(a.params[0].value, c.params[0].value));
  }
  SUBCASE("biases and PELU parameters start at one") {
    const auto m = build_ssmlp<float>(small_config(), 7, 3, 4);
    for (const auto& p : m.params) {
      if (p.kind != ParamKind::weight) {
        for (float v : p.value.values()) CHECK(v == 1.0f);
      }
    }
  }
  SUBCASE("invalid configs") {
    auto c = small_config();
    c.recon_weights = {1, 1, 0.1, 0.1, 0.1};
    CHECK_THROWS_AS(build_ssmlp<float>(c, 7, 3, 1), std::invalid_argument);
    CHECK_THROWS_AS(build_ssmlp<float>(small_config(), 7, 1, 1), std::invalid_argument);
    CHECK_THROWS_AS(build_ssmlp<float>(small_config(), 0, 3, 1), std::invalid_argument);
    CHECK(SsmlpConfig{}.recon_weights.size() == 6);
  }
}

TEST_CASE("ssmlp_forward") {
  const auto m = build_ssmlp<float>(small_config(), 7, 3, 2);
  const auto x = test::random_tensor<float>(3, {5, 7});
  const auto f = ssmlp_forward(m, x);

  SUBCASE("reconstruction widths match encoder levels") {
    REQUIRE(f.recons.size() == 6);
    for (std::size_t j = 0; j < 6; ++j) CHECK(f.recons[j].shape() == Shape{5, m.level_width(j)});
    for (std::size_t j = 1; j <= 4; ++j) CHECK(f.act[j].shape() == f.recons[j].shape());
    CHECK(f.recons[5].shape() == f.probabilities.shape());
  }
  SUBCASE("softmax rows sum to one") {
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) s += f.probabilities[i * 3 + c];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  SUBCASE("zero decoder parameters reconstruct zeros") {
    auto z = m;
    for (auto& p : z.params) {
      if (p.name.rfind("rec", 0) == 0 && p.kind != ParamKind::pelu) p.value.fill(0.0f);
    }
    for (const auto& r : ssmlp_forward(z, x).recons)
      for (float v : r.values()) CHECK(v == 0.0f);
  }
  SUBCASE("width mismatch") {
    CHECK_THROWS_AS(ssmlp_forward(m, test::random_tensor<float>(3, {5, 6})), ShapeError);
  }
}

TEST_CASE("ssmlp objective") {
  auto m = build_ssmlp<double>(small_config(), 7, 3, 2);
  const auto x = test::random_tensor<double>(3, {6, 7});
  const std::vector<std::size_t> labels{0, 2, 1, kUnlabeled, 2, kUnlabeled};
  const auto f = ssmlp_forward(m, x);

  SUBCASE("zero weights on a labeled batch leave the cross-entropy") {
    const std::vector<std::size_t> all{0, 2, 1, 1, 2, 0};
    const std::vector<double> zero(6, 0.0);
    const auto o = ssmlp_objective(f, all, zero);
    double ce = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) s += std::exp(f.logits[i * 3 + c]);
      ce += std::log(s) - f.logits[i * 3 + all[i]];
    }
    CHECK(o.value == doctest::Approx(ce / 6).epsilon(1e-12));
    CHECK(o.recon_loss == 0.0);
  }
  SUBCASE("perfect reconstructions leave exactly the class loss") {
    auto g = f;
    g.recons[0] = g.input;
    for (std::size_t j = 1; j <= 4; ++j) g.recons[j] = g.act[j];
    g.recons[5] = g.probabilities;
    const auto o = ssmlp_objective(g, labels, m.config.recon_weights);
    CHECK(o.value == o.class_loss);
  }
  SUBCASE("weighted sum of known layer errors") {
    const std::vector<double> mse{0.2, 0.1, 0.1, 0.05, 0.05, 0.01};
    CHECK(ssmlp_recon_loss(mse, SsmlpConfig{}.recon_weights) == doctest::Approx(0.321).epsilon(1e-14));
  }
  SUBCASE("unlabeled samples stay out of the class term") {
    const auto o = ssmlp_objective(f, labels, m.config.recon_weights);
    CHECK(o.labeled == 4);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(o.grad_logits[3 * 3 + c] == 0.0);
      CHECK(o.grad_logits[5 * 3 + c] == 0.0);
    }
    Tensor<double> sub({4, 3});
    const std::vector<std::size_t> rows{0, 1, 2, 4}, ids{0, 2, 1, 2};
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 3; ++c) sub[r * 3 + c] = f.logits[rows[r] * 3 + c];
    CHECK(o.class_loss == k::loss_softmax_crossentropy(sub, std::span<const std::size_t>(ids)).value);
  }
  SUBCASE("an unlabeled batch with zero weights is rejected") {
    const std::vector<std::size_t> none(6, kUnlabeled);
    CHECK_THROWS_AS(ssmlp_objective(f, none, std::vector<double>(6, 0.0)), std::invalid_argument);
    CHECK_NOTHROW(ssmlp_objective(f, none, m.config.recon_weights));
  }
}

TEST_CASE("joint objective gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    for (bool unlabeled : {false, true}) {
      const auto r = ssmlp_gradient_check(seed, unlabeled);
      INFO("seed " << seed << " unlabeled " << unlabeled << " worst " << r.worst_parameter);
      CHECK(r.max_relative_error < 1e-5);
    }
  }
}

TEST_CASE("stratified_split") {
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 5 + 10 * c; ++i) labels.push_back(c);
  labels.push_back(3);
  const auto s = stratified_split(labels, 4, 0.1, 7);
  std::vector<std::size_t> val_per(4, 0);
  for (auto i : s.validation) ++val_per[labels[i]];
  CHECK(val_per == std::vector<std::size_t>{1, 2, 3, 0});
  CHECK(s.train.size() + s.validation.size() == labels.size());
  std::vector<std::size_t> all = s.train;
  all.insert(all.end(), s.validation.begin(), s.validation.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
  const auto again = stratified_split(labels, 4, 0.1, 7);
  CHECK(again.validation == s.validation);
}

TEST_CASE("zero reconstruction weights and no pool train a plain MLP") {
  const auto t = pixel_task(6, 3);
  auto c = small_config();
  c.recon_weights.assign(6, 0.0);
  c.unlabeled_ratio = 0.0;
  auto m = build_ssmlp<float>(c, t.labeled.dim(1), 4, 11);
  const auto init = m;
  SsmlpTrainOptions o;
  o.seed = 11;
  o.max_steps = 40;
  const auto h = train_ssmlp(m, t.labeled, t.labels, t.image, o);
  const auto reference = plain_mlp_losses(init, t.labeled, t.labels, 11, 40);
  REQUIRE(h.step_loss.size() == 40);
  CHECK(h.step_loss == reference);
}

TEST_CASE("train_ssmlp") {
  const auto t = pixel_task(10, 4);

  SUBCASE("identical seeds give identical histories") {
    auto a = build_ssmlp<float>(small_config(), 16, 4, 2);
    auto b = a;
    SsmlpTrainOptions o;
    o.seed = 5;
    o.max_steps = 30;
    const auto ha = train_ssmlp(a, t.labeled, t.labels, t.image, o);
    const auto hb = train_ssmlp(b, t.labeled, t.labels, t.image, o);
    CHECK(ha.step_loss == hb.step_loss);
    CHECK(ha.validation_oa == hb.validation_oa);
    for (std::size_t i = 0; i < a.params.size(); ++i) CHECK(test::identical(a.params[i].value, b.params[i].value));
  }

  SUBCASE("validation takes one sample per class at L = 10") {
    auto m = build_ssmlp<float>(small_config(), 16, 4, 2);
    SsmlpTrainOptions o;
    o.max_steps = 1;
    const auto h = train_ssmlp(m, t.labeled, t.labels, t.image, o);
    CHECK(h.validation_index.size() == 4);
    CHECK(h.train_index.size() == 36);
    CHECK(h.absent_classes.empty());
  }

  SUBCASE("a class missing from the training fold is reported") {
    std::vector<std::size_t> labels(t.labels.begin(), t.labels.end());
    for (auto& l : labels) {
      if (l == 3) l = 2;
    }
    auto m = build_ssmlp<float>(small_config(), 16, 4, 2);
    SsmlpTrainOptions o;
    o.max_steps = 2;
    const auto h = train_ssmlp(m, t.labeled, labels, t.image, o);
    CHECK(h.absent_classes == std::vector<std::size_t>{3});
  }

  SUBCASE("decoder noise is drawn from its own stream") {
    auto c = small_config();
    c.decoder_noise = 0.1;
    auto a = build_ssmlp<float>(c, 16, 4, 2);
    auto b = a;
    SsmlpTrainOptions o;
    o.seed = 5;
    o.max_steps = 10;
    CHECK(train_ssmlp(a, t.labeled, t.labels, t.image, o).step_loss ==
          train_ssmlp(b, t.labeled, t.labels, t.image, o).step_loss);
  }

  SUBCASE("a separable scene is learned") {
    auto m = build_ssmlp<float>(small_config(), 16, 4, 8);
    SsmlpTrainOptions o;
    o.seed = 8;
    const auto h = train_ssmlp(m, t.labeled, t.labels, t.image, o);
    const auto p = predict_map(m, t.scene.cube.values, t.stats, t.scene.labels.class_names);
    std::size_t right = 0, total = 0;
    for (const auto& [r, c] : evaluation_pixels(t.scene.labels, t.split, false)) {
      right += p.labels.at(r, c) == t.scene.labels.at(r, c);
      ++total;
    }
    const double oa = static_cast<double>(right) / static_cast<double>(total);
    MESSAGE("held-out OA " << oa << " after " << h.train_loss.size() << " epochs (" << h.stop_reason << ")");
    CHECK(oa >= 0.9);
  }
}

TEST_CASE("predict_map") {
  const auto t = pixel_task(5, 6);
  auto m = build_ssmlp<float>(small_config(), 16, 4, 3);
  SsmlpTrainOptions o;
  o.max_steps = 20;
  train_ssmlp(m, t.labeled, t.labels, t.image, o);
  const auto& cube = t.scene.cube.values;
  const auto p = predict_map(m, cube, t.stats);

  SUBCASE("probabilities sum to one per pixel") {
    for (std::size_t i = 0; i < 40 * 40; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) s += p.probabilities[i * 4 + c];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
    CHECK(p.labels.class_names[0] == "class1");
  }
  SUBCASE("pixel order does not matter") {
    std::vector<std::size_t> perm(40 * 40);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(2));
    Tensor<float> shuffled({40, 40, 16});
    for (std::size_t i = 0; i < perm.size(); ++i)
      std::copy(cube.data() + perm[i] * 16, cube.data() + (perm[i] + 1) * 16, shuffled.data() + i * 16);
    const auto q = predict_map(m, shuffled, t.stats);
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(q.labels.ids[i] == p.labels.ids[perm[i]]);
  }
  SUBCASE("positive logit rescaling keeps the argmax") {
    auto s = m;
    for (auto& q : s.params) {
      if (q.name == "head.w" || q.name == "head.b") k::scale_inplace(q.value, 3.5f);
    }
    CHECK(predict_map(s, cube, t.stats).labels == p.labels);
  }
  SUBCASE("ties go to the lowest class") {
    Tensor<float> scores({3, 4}, 0.25f);
    scores[1 * 4 + 2] = 0.5f;
    scores[1 * 4 + 3] = 0.5f;
    CHECK(argmax_rows(scores) == std::vector<std::size_t>{0, 2, 0});
  }
  SUBCASE("feature count mismatch") {
    CHECK_THROWS_AS(predict_map(m, Tensor<float>({4, 4, 15}), t.stats), ShapeError);
  }
  SUBCASE("checkpoint round trip") {
    const auto b = ssmlp_from_checkpoint(decode_checkpoint(encode_checkpoint(to_checkpoint(m, t.stats, {"a", "b", "c", "d"}))));
    CHECK(b.class_names[3] == "d");
    CHECK(b.stats.mean == t.stats.mean);
    const auto q = predict_map(b.model, cube, b.stats);
    CHECK(test::identical(q.probabilities, p.probabilities));
  }
}
