#include <catch_amalgamated.hpp>

#include "idportrait/encoders.hpp"
#include "test_support.hpp"

using namespace idportrait;
using idportrait::testing::max_abs_diff;
using idportrait::testing::random_tensor;

namespace {

const StubFaceEncoder& face_encoder() {
  static const StubFaceEncoder enc({EncoderKind::kStubId, 11, 512}, 4);
  return enc;
}

const StubClipEncoder& clip_encoder() {
  static const StubClipEncoder enc({EncoderKind::kStubClip, 12, 64}, 4);
  return enc;
}

}  // namespace

TEST_CASE("detect_and_crop masks and boxes", "[encoders]") {
  const Tensor img = random_tensor({1, 4, 64, 64}, 1);
  const FaceCrop full = detect_and_crop(img, Box{0.0, 0.0, 1.0, 1.0}, 16, 16);
  for (double v : full.mask.data()) CHECK(v == 1.0);
  CHECK(full.pixels.shape() == Shape{1, 4, 32, 32});

  // Footprint oracle: the cells the default box touches on a 16x16 grid,
  // from the box edges alone.
  const FaceCrop def = detect_and_crop(img, std::nullopt, 16, 16);
  CHECK(def.boxes[0] == kDefaultFaceBox);
  int64_t rmin = 16, rmax = -1, cmin = 16, cmax = -1;
  for (int64_t r = 0; r < 16; ++r)
    for (int64_t c = 0; c < 16; ++c)
      if (def.mask[r * 16 + c] > 0.0) {
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
      }
  const Box b = kDefaultFaceBox;
  CHECK(std::abs(cmin - static_cast<int64_t>(std::floor(b.x0 * 16))) <= 1);
  CHECK(std::abs(cmax - (static_cast<int64_t>(std::ceil(b.x1 * 16)) - 1)) <= 1);
  CHECK(std::abs(rmin - static_cast<int64_t>(std::floor(b.y0 * 16))) <= 1);
  CHECK(std::abs(rmax - (static_cast<int64_t>(std::ceil(b.y1 * 16)) - 1)) <= 1);
  for (double v : def.mask.data()) CHECK((v >= 0.0 && v <= 1.0));

  const FaceCrop again = detect_and_crop(img, std::nullopt, 16, 16);
  CHECK(idportrait::testing::bitwise_equal(def.pixels, again.pixels));
  CHECK(idportrait::testing::bitwise_equal(def.mask, again.mask));

  CHECK_THROWS_AS(detect_and_crop(img, Box{0.3, 0.3, 0.3, 0.8}, 16, 16), InvalidBBoxError);
  CHECK_THROWS_AS(detect_and_crop(img, Box{-0.1, 0.3, 0.5, 0.8}, 16, 16), InvalidBBoxError);
  CHECK_THROWS_AS(detect_and_crop(img, Box{0.0, 0.0, 1.0, 1.0}, 15, 16), ShapeError);
}

TEST_CASE("stub face encoder is unit-norm, deterministic and injective enough", "[encoders]") {
  const Tensor img = random_tensor({2, 4, 16, 16}, 2);
  const FaceCrop crop = detect_and_crop(img, std::nullopt, 16, 16);
  const FaceIdEmbedding e = face_embed(crop, face_encoder());
  REQUIRE(e.vec.shape() == Shape{2, 512});
  for (int64_t r = 0; r < 2; ++r) {
    double n2 = 0.0;
    for (int64_t i = 0; i < 512; ++i) n2 += e.vec[r * 512 + i] * e.vec[r * 512 + i];
    CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-6);
  }
  CHECK(idportrait::testing::bitwise_equal(e.vec, face_embed(crop, face_encoder()).vec));

  FaceCrop tweaked = crop;
  tweaked.pixels = crop.pixels.clone();
  tweaked.pixels.mutable_data()[100] += 0.5;
  const auto t = face_embed(tweaked, face_encoder());
  CHECK(face_sim({slice(e.vec, 0, 0, 1)}, {slice(t.vec, 0, 0, 1)}) < 1.0);

  CHECK_THROWS_AS(StubFaceEncoder({EncoderKind::kStubClip, 1, 512}, 4), UsageError);
}

TEST_CASE("stub clip encoder token layout", "[encoders]") {
  const Tensor img = random_tensor({1, 4, 16, 16}, 3);
  const FaceCrop crop = detect_and_crop(img, std::nullopt, 16, 16);
  const ClipFeatureGrid g = clip_grid(crop, clip_encoder());
  CHECK(g.tokens.shape() == Shape{1, 257, 64});

  FaceCrop zero = crop;
  zero.pixels = Tensor::zeros(crop.pixels.shape());
  CHECK(idportrait::testing::max_abs(clip_grid(zero, clip_encoder()).tokens) == 0.0);

  // Swap patch (row 2, col 3) with patch (row 9, col 14) in pixel space.
  FaceCrop swapped = crop;
  swapped.pixels = crop.pixels.clone();
  auto px = swapped.pixels.mutable_data();
  auto at = [](int64_t c, int64_t y, int64_t x) { return static_cast<size_t>((c * 32 + y) * 32 + x); };
  for (int64_t c = 0; c < 4; ++c)
    for (int64_t dy = 0; dy < 2; ++dy)
      for (int64_t dx = 0; dx < 2; ++dx) std::swap(px[at(c, 4 + dy, 6 + dx)], px[at(c, 18 + dy, 28 + dx)]);
  const ClipFeatureGrid s = clip_grid(swapped, clip_encoder());
  const int64_t ta = 1 + 2 * 16 + 3, tb = 1 + 9 * 16 + 14;
  for (int64_t tok = 0; tok < 257; ++tok) {
    const int64_t src = tok == ta ? tb : tok == tb ? ta : tok;
    double worst = 0.0;
    for (int64_t d = 0; d < 64; ++d) worst = std::max(worst, std::abs(s.tokens[tok * 64 + d] - g.tokens[src * 64 + d]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("face_sim is a symmetric cosine", "[encoders]") {
  const FaceIdEmbedding x{l2_normalize(random_tensor({1, 512}, 4))};
  const FaceIdEmbedding y{l2_normalize(random_tensor({1, 512}, 5))};
  CHECK(face_sim(x, x) == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(face_sim(x, {scale(x.vec, -1.0)}) == Catch::Approx(-1.0).epsilon(1e-12));
  CHECK(face_sim(x, y) == face_sim(y, x));
  CHECK_THROWS_AS(face_sim(x, {Tensor::zeros({1, 512})}), DegenerateInputError);
}

TEST_CASE("face similarity is differentiable through the stub encoder", "[encoders][gradient]") {
  Tensor g = random_tensor({1, 4, 16, 16}, 6, 1.0, true);
  const Tensor ref = l2_normalize(random_tensor({1, 512}, 7));
  auto loss = [&] {
    return sum(cosine_similarity(face_embed(detect_and_crop(g, std::nullopt, 16, 16), face_encoder()).vec, ref));
  };
  for (int64_t idx : {int64_t{5 * 16 + 6}, int64_t{300}, int64_t{700}, int64_t{1000}}) {
    const auto s = idportrait::testing::probe_gradient(g, idx, loss);
    INFO("idx " << idx << " analytic " << s.analytic << " numeric " << s.numeric);
    CHECK(s.rel_error() < 1e-3);
  }
}
