#pragma once

// Landmark predictor: transfers identity shape from a source face and pose
// plus expression from a driving face through a linear morphable model,
// then projects 72 landmark vertices with a weak-perspective camera and
// rasterizes them into the control image consumed by FFRNet.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "idportrait/errors.hpp"
#include "idportrait/rng.hpp"
#include "idportrait/tensor.hpp"

namespace idportrait {

inline constexpr int kNumLandmarks = 72;

/// Euler angles in radians, image-plane translation in normalized image
/// units and a positive uniform scale.
struct Pose {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
  double tx = 0.0;
  double ty = 0.0;
  double scale = 1.0;

  friend bool operator==(const Pose&, const Pose&) = default;
};

struct FaceParams {
  std::vector<double> shape;       // alpha, identity coefficients
  Pose pose;
  std::vector<double> expression;  // beta

  friend bool operator==(const FaceParams&, const FaceParams&) = default;

  static FaceParams neutral(size_t shape_dims = 8, size_t expr_dims = 6) {
    return {std::vector<double>(shape_dims, 0.0), Pose{}, std::vector<double>(expr_dims, 0.0)};
  }
};

inline void validate(const FaceParams& p) {
  auto finite = [](const std::vector<double>& v) {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  };
  if (!finite(p.shape) || !finite(p.expression)) throw RangeError("FaceParams: non-finite coefficient");
  const Pose& q = p.pose;
  for (double a : {q.yaw, q.pitch, q.roll})
    if (!(std::abs(a) <= std::numbers::pi)) throw RangeError("FaceParams: angle outside [-pi, pi]");
  if (!std::isfinite(q.tx) || !std::isfinite(q.ty)) throw RangeError("FaceParams: non-finite translation");
  if (!(q.scale > 0.0) || !std::isfinite(q.scale)) throw RangeError("FaceParams: scale must be positive");
}

enum class LandmarkGroup : uint8_t { kContour = 0, kBrows = 1, kEyes = 2, kNose = 3, kMouth = 4 };

struct LandmarkSlot {
  int row;
  int col;
  LandmarkGroup group;
};

/// Mean-mesh grid: kMeshRows latitude rings x kMeshCols azimuth columns.
inline constexpr int kMeshRows = 18;
inline constexpr int kMeshCols = 26;
inline constexpr int kMeshVertices = kMeshRows * kMeshCols;  // 468

// Stand-in 72-point layout on the toy grid (row 0 is the forehead, column
// 0 the subject's far left): 20 contour, 10 brow, 16 eye, 9 nose, 17 mouth.
inline constexpr std::array<LandmarkSlot, kNumLandmarks> kLandmarkLayout = {{
    // contour
    {6, 4, LandmarkGroup::kContour}, {7, 4, LandmarkGroup::kContour}, {8, 4, LandmarkGroup::kContour},
    {9, 4, LandmarkGroup::kContour}, {10, 4, LandmarkGroup::kContour}, {11, 4, LandmarkGroup::kContour},
    {12, 4, LandmarkGroup::kContour}, {14, 6, LandmarkGroup::kContour}, {15, 9, LandmarkGroup::kContour},
    {16, 12, LandmarkGroup::kContour}, {16, 13, LandmarkGroup::kContour}, {15, 16, LandmarkGroup::kContour},
    {14, 19, LandmarkGroup::kContour}, {12, 21, LandmarkGroup::kContour}, {11, 21, LandmarkGroup::kContour},
    {10, 21, LandmarkGroup::kContour}, {9, 21, LandmarkGroup::kContour}, {8, 21, LandmarkGroup::kContour},
    {7, 21, LandmarkGroup::kContour}, {6, 21, LandmarkGroup::kContour},
    // brows
    {4, 6, LandmarkGroup::kBrows}, {4, 7, LandmarkGroup::kBrows}, {4, 8, LandmarkGroup::kBrows},
    {4, 9, LandmarkGroup::kBrows}, {4, 10, LandmarkGroup::kBrows}, {4, 15, LandmarkGroup::kBrows},
    {4, 16, LandmarkGroup::kBrows}, {4, 17, LandmarkGroup::kBrows}, {4, 18, LandmarkGroup::kBrows},
    {4, 19, LandmarkGroup::kBrows},
    // eyes
    {5, 7, LandmarkGroup::kEyes}, {5, 8, LandmarkGroup::kEyes}, {5, 9, LandmarkGroup::kEyes},
    {5, 10, LandmarkGroup::kEyes}, {6, 10, LandmarkGroup::kEyes}, {6, 9, LandmarkGroup::kEyes},
    {6, 8, LandmarkGroup::kEyes}, {6, 7, LandmarkGroup::kEyes}, {5, 15, LandmarkGroup::kEyes},
    {5, 16, LandmarkGroup::kEyes}, {5, 17, LandmarkGroup::kEyes}, {5, 18, LandmarkGroup::kEyes},
    {6, 18, LandmarkGroup::kEyes}, {6, 17, LandmarkGroup::kEyes}, {6, 16, LandmarkGroup::kEyes},
    {6, 15, LandmarkGroup::kEyes},
    // nose
    {6, 12, LandmarkGroup::kNose}, {7, 12, LandmarkGroup::kNose}, {8, 12, LandmarkGroup::kNose},
    {9, 12, LandmarkGroup::kNose}, {10, 10, LandmarkGroup::kNose}, {10, 11, LandmarkGroup::kNose},
    {10, 12, LandmarkGroup::kNose}, {10, 13, LandmarkGroup::kNose}, {10, 14, LandmarkGroup::kNose},
    // mouth
    {12, 9, LandmarkGroup::kMouth}, {12, 10, LandmarkGroup::kMouth}, {12, 11, LandmarkGroup::kMouth},
    {12, 12, LandmarkGroup::kMouth}, {12, 13, LandmarkGroup::kMouth}, {12, 14, LandmarkGroup::kMouth},
    {12, 15, LandmarkGroup::kMouth}, {12, 16, LandmarkGroup::kMouth}, {14, 15, LandmarkGroup::kMouth},
    {14, 14, LandmarkGroup::kMouth}, {14, 13, LandmarkGroup::kMouth}, {14, 12, LandmarkGroup::kMouth},
    {14, 11, LandmarkGroup::kMouth}, {14, 10, LandmarkGroup::kMouth}, {13, 11, LandmarkGroup::kMouth},
    {13, 12, LandmarkGroup::kMouth}, {13, 13, LandmarkGroup::kMouth},
}};

/// RGB per landmark group, indexed by LandmarkGroup.
inline constexpr std::array<std::array<double, 3>, 5> kGroupColors = {{
    {1.0, 1.0, 1.0},  // contour
    {1.0, 0.5, 0.0},  // brows
    {0.0, 1.0, 0.0},  // eyes
    {0.0, 0.6, 1.0},  // nose
    {1.0, 0.0, 0.5},  // mouth
}};

using Mesh = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct MorphableBasis {
  Mesh mean_mesh;                   // [V, 3]
  Eigen::MatrixXd shape_basis;      // [3V, K_s], rows ordered (v0.x, v0.y, v0.z, v1.x, ...)
  Eigen::MatrixXd expr_basis;       // [3V, K_e]
  std::array<int, kNumLandmarks> landmark_indices{};
  std::array<LandmarkGroup, kNumLandmarks> landmark_groups{};

  int64_t vertices() const { return mean_mesh.rows(); }
  int64_t shape_dims() const { return shape_basis.cols(); }
  int64_t expr_dims() const { return expr_basis.cols(); }
};

inline void validate(const MorphableBasis& b) {
  const int64_t v = b.vertices();
  if (b.shape_basis.rows() != 3 * v || b.expr_basis.rows() != 3 * v)
    throw ShapeError("MorphableBasis: basis rows must equal 3 * vertices");
  if (!b.mean_mesh.allFinite() || !b.shape_basis.allFinite() || !b.expr_basis.allFinite())
    throw RangeError("MorphableBasis: non-finite entries");
  std::vector<bool> used(static_cast<size_t>(v), false);
  for (int idx : b.landmark_indices) {
    if (idx < 0 || idx >= v) throw RangeError("MorphableBasis: landmark index out of range");
    if (used[static_cast<size_t>(idx)]) throw RangeError("MorphableBasis: duplicate landmark index");
    used[static_cast<size_t>(idx)] = true;
  }
}

/// Ellipsoid-grid mean face with seeded random shape and expression bases
/// whose columns are scaled to a peak displacement of 0.05.
inline MorphableBasis make_toy_basis(uint64_t seed = 7, int64_t shape_dims = 8, int64_t expr_dims = 6) {
  MorphableBasis b;
  b.mean_mesh.resize(kMeshVertices, 3);
  constexpr double deg = std::numbers::pi / 180.0;
  for (int r = 0; r < kMeshRows; ++r) {
    const double lat = (75.0 - 150.0 * r / (kMeshRows - 1)) * deg;
    for (int c = 0; c < kMeshCols; ++c) {
      const double az = (-100.0 + 200.0 * c / (kMeshCols - 1)) * deg;
      const int v = r * kMeshCols + c;
      b.mean_mesh(v, 0) = 0.6 * std::cos(lat) * std::sin(az);
      b.mean_mesh(v, 1) = 0.8 * std::sin(lat);
      b.mean_mesh(v, 2) = 0.5 * std::cos(lat) * std::cos(az);
    }
  }
  auto random_basis = [&](const char* tag, int64_t cols) {
    Rng rng(derive_seed(seed, tag));
    Eigen::MatrixXd m(3 * kMeshVertices, cols);
    for (int64_t j = 0; j < cols; ++j) {
      for (int64_t i = 0; i < m.rows(); ++i) m(i, j) = rng.normal();
      m.col(j) *= 0.05 / m.col(j).cwiseAbs().maxCoeff();
    }
    return m;
  };
  b.shape_basis = random_basis("shape_basis", shape_dims);
  b.expr_basis = random_basis("expr_basis", expr_dims);
  for (int i = 0; i < kNumLandmarks; ++i) {
    b.landmark_indices[static_cast<size_t>(i)] = kLandmarkLayout[static_cast<size_t>(i)].row * kMeshCols +
                                                 kLandmarkLayout[static_cast<size_t>(i)].col;
    b.landmark_groups[static_cast<size_t>(i)] = kLandmarkLayout[static_cast<size_t>(i)].group;
  }
  return b;
}

/// Identity shape from the source, pose and expression from the drive.
inline FaceParams mix_params(const FaceParams& source, const FaceParams& drive) {
  return {source.shape, drive.pose, drive.expression};
}

/// R = Rz(roll) * Ry(yaw) * Rx(pitch).
inline Eigen::Matrix3d rotation_matrix(const Pose& p) {
  using Eigen::AngleAxisd;
  using Eigen::Vector3d;
  return (AngleAxisd(p.roll, Vector3d::UnitZ()) * AngleAxisd(p.yaw, Vector3d::UnitY()) *
          AngleAxisd(p.pitch, Vector3d::UnitX()))
      .toRotationMatrix();
}

inline Mesh synthesize_mesh(const FaceParams& p, const MorphableBasis& basis) {
  if (static_cast<int64_t>(p.shape.size()) != basis.shape_dims())
    throw ShapeError("synthesize_mesh: shape has " + std::to_string(p.shape.size()) + " coefficients, basis expects " +
                     std::to_string(basis.shape_dims()));
  if (static_cast<int64_t>(p.expression.size()) != basis.expr_dims())
    throw ShapeError("synthesize_mesh: expression has " + std::to_string(p.expression.size()) +
                     " coefficients, basis expects " + std::to_string(basis.expr_dims()));
  const Eigen::Map<const Eigen::VectorXd> alpha(p.shape.data(), basis.shape_dims());
  const Eigen::Map<const Eigen::VectorXd> beta(p.expression.data(), basis.expr_dims());
  const Eigen::VectorXd offsets = basis.shape_basis * alpha + basis.expr_basis * beta;
  Mesh verts = basis.mean_mesh + Eigen::Map<const Mesh>(offsets.data(), basis.vertices(), 3);
  const Eigen::Matrix3d rs = p.pose.scale * rotation_matrix(p.pose);
  Mesh out = verts * rs.transpose();
  out.col(0).array() += p.pose.tx;
  out.col(1).array() += p.pose.ty;
  return out;
}

struct LandmarkSet72 {
  std::array<std::array<double, 2>, kNumLandmarks> points{};  // normalized (x, y), y down
  std::array<bool, kNumLandmarks> visible{};

  friend bool operator==(const LandmarkSet72&, const LandmarkSet72&) = default;
};

/// Fixed viewport from canonical [-1, 1]^2 (y up) to image [0, 1]^2 (y down).
inline std::array<double, 2> viewport(double x, double y) { return {(x + 1.0) * 0.5, (1.0 - y) * 0.5}; }

/// Weak-perspective projection of the landmark vertices; depth is dropped.
inline LandmarkSet72 project_landmarks(const Mesh& mesh, const MorphableBasis& basis) {
  if (mesh.rows() != basis.vertices()) throw ShapeError("project_landmarks: mesh/basis vertex count mismatch");
  LandmarkSet72 lm;
  for (int i = 0; i < kNumLandmarks; ++i) {
    const int v = basis.landmark_indices[static_cast<size_t>(i)];
    const auto pt = viewport(mesh(v, 0), mesh(v, 1));
    lm.points[static_cast<size_t>(i)] = pt;
    lm.visible[static_cast<size_t>(i)] = std::isfinite(pt[0]) && std::isfinite(pt[1]) && pt[0] >= 0.0 &&
                                         pt[0] <= 1.0 && pt[1] >= 0.0 && pt[1] <= 1.0;
  }
  return lm;
}

/// Row-major [H, W, 3] RGB image with values in [0, 1].
struct ControlImage {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> pixels;

  static ControlImage black(int64_t h, int64_t w) {
    return {h, w, std::vector<double>(static_cast<size_t>(h * w * 3), 0.0)};
  }

  double at(int64_t y, int64_t x, int64_t c) const { return pixels[static_cast<size_t>((y * width + x) * 3 + c)]; }

  /// [1, 3, H, W] tensor for the network.
  Tensor to_tensor() const {
    std::vector<double> chw(pixels.size());
    for (int64_t y = 0; y < height; ++y)
      for (int64_t x = 0; x < width; ++x)
        for (int64_t c = 0; c < 3; ++c) chw[static_cast<size_t>((c * height + y) * width + x)] = at(y, x, c);
    return Tensor::from_data({1, 3, height, width}, std::move(chw));
  }

  friend bool operator==(const ControlImage&, const ControlImage&) = default;
};

/// Filled discs of radius max(1, H/64) pixels at every visible landmark,
/// colored by landmark group, on a black background.
inline ControlImage rasterize_control(const LandmarkSet72& lm, int64_t height, int64_t width,
                                      const std::array<LandmarkGroup, kNumLandmarks>& groups) {
  if (height < 8 || width < 8) throw RangeError("rasterize_control: image must be at least 8x8");
  ControlImage img = ControlImage::black(height, width);
  const double r = std::max(1.0, static_cast<double>(height) / 64.0);
  for (int i = 0; i < kNumLandmarks; ++i) {
    if (!lm.visible[static_cast<size_t>(i)]) continue;
    const double cx = lm.points[static_cast<size_t>(i)][0] * static_cast<double>(width);
    const double cy = lm.points[static_cast<size_t>(i)][1] * static_cast<double>(height);
    const auto& color = kGroupColors[static_cast<size_t>(groups[static_cast<size_t>(i)])];
    const auto y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cy - r)));
    const auto y1 = std::min<int64_t>(height - 1, static_cast<int64_t>(std::ceil(cy + r)));
    const auto x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cx - r)));
    const auto x1 = std::min<int64_t>(width - 1, static_cast<int64_t>(std::ceil(cx + r)));
    for (int64_t y = y0; y <= y1; ++y)
      for (int64_t x = x0; x <= x1; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
        if (dx * dx + dy * dy > r * r) continue;
        for (int c = 0; c < 3; ++c) img.pixels[static_cast<size_t>((y * width + x) * 3 + c)] = color[static_cast<size_t>(c)];
      }
  }
  return img;
}

inline ControlImage rasterize_control(const LandmarkSet72& lm, int64_t height, int64_t width,
                                      const MorphableBasis& basis) {
  return rasterize_control(lm, height, width, basis.landmark_groups);
}

/// Landmarks of a face taken as-is, without shape transfer.
inline LandmarkSet72 extract_landmarks(const FaceParams& p, const MorphableBasis& basis) {
  return project_landmarks(synthesize_mesh(p, basis), basis);
}

inline std::pair<LandmarkSet72, ControlImage> predict_landmarks(const FaceParams& source, const FaceParams& drive,
                                                                const MorphableBasis& basis, int64_t height,
                                                                int64_t width) {
  validate(source);
  validate(drive);
  const LandmarkSet72 lm = project_landmarks(synthesize_mesh(mix_params(source, drive), basis), basis);
  return {lm, rasterize_control(lm, height, width, basis)};
}

/// Sampling ranges for synthetic faces.
struct FaceParamRanges {
  double shape_std = 1.0;
  double expr_std = 0.5;
  double max_yaw = 0.5;
  double max_pitch = 0.3;
  double max_roll = 0.2;
  double max_shift = 0.08;
  double min_scale = 0.8;
  double max_scale = 1.05;
};

inline FaceParams random_face_params(Rng& rng, const MorphableBasis& basis, const FaceParamRanges& r = {}) {
  FaceParams p;
  p.shape.resize(static_cast<size_t>(basis.shape_dims()));
  p.expression.resize(static_cast<size_t>(basis.expr_dims()));
  for (double& a : p.shape) a = r.shape_std * rng.normal();
  for (double& b : p.expression) b = r.expr_std * rng.normal();
  p.pose.yaw = rng.uniform(-r.max_yaw, r.max_yaw);
  p.pose.pitch = rng.uniform(-r.max_pitch, r.max_pitch);
  p.pose.roll = rng.uniform(-r.max_roll, r.max_roll);
  p.pose.tx = rng.uniform(-r.max_shift, r.max_shift);
  p.pose.ty = rng.uniform(-r.max_shift, r.max_shift);
  p.pose.scale = rng.uniform(r.min_scale, r.max_scale);
  return p;
}

}  // namespace idportrait
