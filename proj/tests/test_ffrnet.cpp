#include <catch_amalgamated.hpp>

#include "idportrait/diffusion.hpp"
#include "test_support.hpp"

using namespace idportrait;
using idportrait::testing::bitwise_equal;
using idportrait::testing::max_abs;
using idportrait::testing::max_abs_diff;
using idportrait::testing::random_tensor;

namespace {

const DenoiserWeights& base() {
  static const DenoiserWeights w = init_denoiser(DenoiserConfig{}, 3);
  return w;
}

void perturb_connectors(FFRNetWeights& w, uint64_t seed) {
  Rng rng(seed);
  for (auto& c : w.connectors)
    for (auto* t : {&c.weight, &c.bias})
      for (double& v : t->mutable_data()) v = 0.05 * rng.normal();
}

}  // namespace

TEST_CASE("init_from_base copies the encoder and zeroes connectors", "[ffrnet]") {
  const auto& b = base();
  FFRNetWeights f = init_from_base(b);
  REQUIRE(f.connectors.size() == 4);
  for (auto& c : f.connectors) {
    CHECK(max_abs(c.weight) == 0.0);
    CHECK(max_abs(c.bias) == 0.0);
    CHECK(c.weight.requires_grad());
  }
  DenoiserWeights bc = b;
  auto base_enc = nn::named_tensors(bc.encoder, "enc");
  auto ffr_enc = nn::named_tensors(f.encoder, "enc");
  REQUIRE(base_enc.size() == ffr_enc.size());
  for (size_t i = 0; i < base_enc.size(); ++i) {
    CHECK(base_enc[i].first == ffr_enc[i].first);
    CHECK(bitwise_equal(base_enc[i].second, ffr_enc[i].second));
    CHECK(base_enc[i].second.node() != ffr_enc[i].second.node());
    CHECK(!base_enc[i].second.requires_grad());
    CHECK(ffr_enc[i].second.requires_grad());
  }
}

TEST_CASE("fresh control branch emits all-zero residuals of the right shapes", "[ffrnet]") {
  const auto& b = base();
  const FFRNetWeights f = init_from_base(b);
  const Tensor z = random_tensor({2, 4, 16, 16}, 1);
  const Tensor ctrl = random_tensor({2, 3, 64, 64}, 2);
  const Tensor fmix = random_tensor({2, 16, 64}, 3);
  const ResidualSet r = ffrnet_forward(f, ctrl, z, {10, 70}, fmix);

  // Shape census against the base encoder's own features.
  const EncoderFeatures feats = encoder_forward(b.encoder, z, b.encoder.time({10, 70}), random_tensor({2, 8, 64}, 4));
  REQUIRE(r.residuals.size() == feats.skips.size() + 1);
  for (size_t k = 0; k < feats.skips.size(); ++k) CHECK(r.residuals[k].shape() == feats.skips[k].shape());
  CHECK(r.residuals.back().shape() == feats.mid.shape());
  for (const Tensor& t : r.residuals) CHECK(max_abs(t) == 0.0);

  CHECK_THROWS_AS(ffrnet_forward(f, random_tensor({2, 3, 32, 32}, 5), z, {10, 70}, fmix), ShapeError);
  CHECK_THROWS_AS(ffrnet_forward(f, ctrl, z, {10, 70}, random_tensor({2, 16, 32}, 6)), ShapeError);
}

TEST_CASE("zero-init equivalence on random inputs", "[ffrnet]") {
  const auto& b = base();
  const FFRNetWeights f = init_from_base(b);
  NoGradGuard ng;
  double worst = 0.0;
  for (uint64_t i = 0; i < 10; ++i) {
    const Conditioning c{random_tensor({1, 3, 64, 64}, 100 + i), random_tensor({1, 16, 64}, 200 + i),
                         random_tensor({1, 8, 64}, 300 + i), false};
    const Tensor z = random_tensor({1, 4, 16, 16}, 400 + i);
    const std::vector<int64_t> t{static_cast<int64_t>(i * 9)};
    worst = std::max(worst, max_abs_diff(predict_noise(b, &f, c, z, t), denoise(b, z, t, c.context)));
  }
  CHECK(worst <= 1e-7);
}

TEST_CASE("control branch gradients and feature sensitivity", "[ffrnet]") {
  const auto& b = base();
  FFRNetWeights f = init_from_base(b);
  perturb_connectors(f, 9);
  const Tensor z = random_tensor({1, 4, 16, 16}, 11);
  const Tensor ctrl = random_tensor({1, 3, 64, 64}, 12);
  const Tensor fmix = random_tensor({1, 16, 64}, 13);
  const Tensor ctx = random_tensor({1, 8, 64}, 14);
  auto loss = [&] {
    const ResidualSet r = ffrnet_forward(f, ctrl, z, {50}, fmix);
    return mean(square(denoise(b, z, {50}, ctx, &r)));
  };
  const std::vector<std::pair<Tensor, int64_t>> probes{
      {f.connectors[0].weight, 5},
      {f.connectors[3].bias, 2},
      {f.encoder.levels[1].res.conv1.weight, 77},
      {f.encoder.levels[0].attn.attn.wk.weight, 9},
      {f.hint.conv1.weight, 4},
  };
  for (const auto& [p, idx] : probes) {
    const auto g = idportrait::testing::probe_gradient(p, idx, loss);
    INFO("analytic " << g.analytic << " numeric " << g.numeric);
    CHECK(g.rel_error() < 1e-3);
  }

  NoGradGuard ng;
  const ResidualSet r1 = ffrnet_forward(f, ctrl, z, {50}, fmix);
  const ResidualSet r2 = ffrnet_forward(f, ctrl, z, {50}, random_tensor({1, 16, 64}, 15));
  double delta = 0.0;
  for (size_t k = 0; k < r1.residuals.size(); ++k) delta = std::max(delta, max_abs_diff(r1.residuals[k], r2.residuals[k]));
  CHECK(delta > 0.0);
}
