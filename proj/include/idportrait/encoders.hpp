#pragma once

// Stand-ins for the face detector, the face-recognition backbone and the
// CLIP image encoder. All stubs are fixed seeded linear maps, so they are
// deterministic in (input, seed) and differentiable end to end.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "idportrait/attribute_mixer.hpp"
#include "idportrait/nn.hpp"

namespace idportrait {

inline constexpr int64_t kCanonicalCrop = 32;
inline constexpr int64_t kClipGrid = 16;
inline constexpr Box kDefaultFaceBox{0.25, 0.2, 0.75, 0.85};

struct FaceCrop {
  Tensor pixels;           // [N, C, 32, 32] canonical resample of each box
  std::vector<Box> boxes;  // one per batch item
  Tensor mask;             // [N, 1, H_l, W_l] facial-region mask in [0, 1]
};

inline void validate_box(const Box& b) {
  const bool inside = b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 1.0 && b.y1 <= 1.0;
  if (!inside) throw InvalidBBoxError("bounding box outside [0, 1]");
  if (!(b.x1 > b.x0) || !(b.y1 > b.y0)) throw InvalidBBoxError("bounding box has zero area");
}

/// Hard box at image resolution (pixel centers inside), area-averaged down to
/// the latent grid. Image size must be an integer multiple of the grid.
inline Tensor box_mask(const Box& b, int64_t image_h, int64_t image_w, int64_t grid_h, int64_t grid_w) {
  if (image_h % grid_h != 0 || image_w % grid_w != 0)
    throw ShapeError("box_mask: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                     " is not a multiple of grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w));
  const int64_t fy = image_h / grid_h, fx = image_w / grid_w;
  std::vector<double> m(static_cast<size_t>(grid_h * grid_w), 0.0);
  for (int64_t y = 0; y < image_h; ++y) {
    const double cy = (static_cast<double>(y) + 0.5) / static_cast<double>(image_h);
    if (cy < b.y0 || cy > b.y1) continue;
    for (int64_t x = 0; x < image_w; ++x) {
      const double cx = (static_cast<double>(x) + 0.5) / static_cast<double>(image_w);
      if (cx < b.x0 || cx > b.x1) continue;
      m[static_cast<size_t>((y / fy) * grid_w + x / fx)] += 1.0;
    }
  }
  for (double& v : m) v /= static_cast<double>(fy * fx);
  return Tensor::from_data({1, 1, grid_h, grid_w}, std::move(m));
}

/// Crops the facial region of each image. Without explicit boxes the
/// centered default box is used. image: [N, C, H, W].
inline FaceCrop detect_and_crop_batch(const Tensor& image, const std::optional<std::vector<Box>>& boxes,
                                      int64_t grid_h, int64_t grid_w) {
  if (image.ndim() != 4) throw ShapeError("detect_and_crop: expected [N, C, H, W], got " + to_string(image.shape()));
  for (double v : image.data())
    if (!std::isfinite(v)) throw RangeError("detect_and_crop: non-finite image");
  const int64_t n = image.dim(0);
  std::vector<Box> bx = boxes.value_or(std::vector<Box>(static_cast<size_t>(n), kDefaultFaceBox));
  if (static_cast<int64_t>(bx.size()) != n) throw ShapeError("detect_and_crop: one box per image required");
  std::vector<Tensor> masks;
  for (const Box& b : bx) {
    validate_box(b);
    masks.push_back(box_mask(b, image.dim(2), image.dim(3), grid_h, grid_w));
  }
  return {crop_resize(image, bx, kCanonicalCrop, kCanonicalCrop), bx, concat(masks, 0)};
}

inline FaceCrop detect_and_crop(const Tensor& image, std::optional<Box> box, int64_t grid_h, int64_t grid_w) {
  if (!box) return detect_and_crop_batch(image, std::nullopt, grid_h, grid_w);
  return detect_and_crop_batch(image, std::vector<Box>(static_cast<size_t>(image.dim(0)), *box), grid_h, grid_w);
}

enum class EncoderKind { kStubId, kStubClip };

struct EncoderSpec {
  EncoderKind kind = EncoderKind::kStubId;
  uint64_t seed = 0;
  int64_t out_dim = 512;
};

/// Seeded random linear map of the flattened canonical crop, L2-normalized.
class StubFaceEncoder {
 public:
  StubFaceEncoder(const EncoderSpec& spec, int64_t channels) : spec_(spec), channels_(channels) {
    if (spec.kind != EncoderKind::kStubId) throw UsageError("StubFaceEncoder needs an id encoder spec");
    const int64_t in = channels * kCanonicalCrop * kCanonicalCrop;
    weight_ = nn::ParamInit(spec.seed, false).normal("face_encoder", {spec.out_dim, in}, 1.0 / std::sqrt(static_cast<double>(in)));
  }

  const EncoderSpec& spec() const { return spec_; }

  FaceIdEmbedding operator()(const FaceCrop& crop) const {
    const Tensor& px = crop.pixels;
    if (px.ndim() != 4 || px.dim(1) != channels_ || px.dim(2) != kCanonicalCrop || px.dim(3) != kCanonicalCrop)
      throw ShapeError("face_embed: unexpected crop shape " + to_string(px.shape()));
    return {l2_normalize(linear(reshape(px, {px.dim(0), -1}), weight_))};
  }

 private:
  EncoderSpec spec_;
  int64_t channels_;
  Tensor weight_;
};

/// 16x16 grid of 2x2 patches, each mapped by one shared seeded matrix, with
/// the mean patch token prepended: [N, 257, D_clip].
class StubClipEncoder {
 public:
  StubClipEncoder(const EncoderSpec& spec, int64_t channels) : spec_(spec), channels_(channels) {
    if (spec.kind != EncoderKind::kStubClip) throw UsageError("StubClipEncoder needs a clip encoder spec");
    const int64_t in = channels * patch() * patch();
    weight_ = nn::ParamInit(spec.seed, false).normal("clip_encoder", {spec.out_dim, in}, 1.0 / std::sqrt(static_cast<double>(in)));
  }

  static constexpr int64_t patch() { return kCanonicalCrop / kClipGrid; }

  const EncoderSpec& spec() const { return spec_; }

  /// [N, 256, C * 4] patch vectors, token index = row * 16 + col.
  static Tensor patchify(const Tensor& px) {
    const int64_t n = px.dim(0), c = px.dim(1);
    const Tensor t = reshape(px, {n, c, kClipGrid, patch(), kClipGrid, patch()});
    return reshape(permute(t, {0, 2, 4, 1, 3, 5}), {n, kClipGrid * kClipGrid, c * patch() * patch()});
  }

  ClipFeatureGrid operator()(const FaceCrop& crop) const {
    const Tensor& px = crop.pixels;
    if (px.ndim() != 4 || px.dim(1) != channels_ || px.dim(2) != kCanonicalCrop || px.dim(3) != kCanonicalCrop)
      throw ShapeError("clip_grid: unexpected crop shape " + to_string(px.shape()));
    const Tensor tokens = linear(patchify(px), weight_);
    return {concat({mean_axis(tokens, 1, true), tokens}, 1)};
  }

 private:
  EncoderSpec spec_;
  int64_t channels_;
  Tensor weight_;
};

inline FaceIdEmbedding face_embed(const FaceCrop& crop, const StubFaceEncoder& enc) { return enc(crop); }
inline ClipFeatureGrid clip_grid(const FaceCrop& crop, const StubClipEncoder& enc) { return enc(crop); }

/// Row-wise cosine similarity of [N, D] tensors, differentiable: [N].
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("cosine_similarity: shapes differ");
  return sum_axis(mul(l2_normalize(a), l2_normalize(b)), -1);
}

/// Cosine similarity of two single identity vectors, in [-1, 1].
inline double face_sim(const FaceIdEmbedding& a, const FaceIdEmbedding& b) {
  if (a.vec.numel() != b.vec.numel()) throw ShapeError("face_sim: dimension mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (int64_t i = 0; i < a.vec.numel(); ++i) {
    ab += a.vec[i] * b.vec[i];
    aa += a.vec[i] * a.vec[i];
    bb += b.vec[i] * b.vec[i];
  }
  if (!(aa > 0.0) || !(bb > 0.0)) throw DegenerateInputError("face_sim: zero-norm embedding");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace idportrait
