#pragma once

// Datasets are directories holding manifest.yaml plus the files it names.
// The synthetic generator renders procedural faces from random face
// parameters so training needs no external data.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "idportrait/io/face_params_file.hpp"
#include "idportrait/io/latent_file.hpp"
#include "idportrait/io/png_image.hpp"
#include "idportrait/pipeline/config.hpp"

namespace idportrait {

namespace fs = std::filesystem;

inline constexpr int kManifestFormatVersion = 1;

struct Sample {
  std::string id;
  Tensor z0;  // [1, C, H, W]
  std::string caption;
  Box bbox;
  FaceParams source;
  std::optional<FaceParams> drive;
};

/// Text context for a caption: a seeded Gaussian token block [1, tokens, width].
inline Tensor caption_context(const std::string& caption, int64_t tokens, int64_t width) {
  Rng rng(derive_seed(0x6361707469, caption));
  std::vector<double> v(static_cast<size_t>(tokens * width));
  for (double& x : v) x = rng.normal();
  return Tensor::from_data({1, tokens, width}, std::move(v));
}

inline std::vector<Sample> load_dataset(const fs::path& root, const TrainConfig& config) {
  const fs::path manifest = root / "manifest.yaml";
  YAML::Node doc;
  try {
    doc = YAML::LoadFile(manifest.string());
  } catch (const YAML::Exception& e) {
    throw IngestionError("cannot read manifest " + manifest.string() + ": " + e.what());
  }
  if (!doc["format_version"] || doc["format_version"].as<int>(-1) != kManifestFormatVersion)
    throw IngestionError(manifest.string() + ": missing or unsupported format_version");
  std::vector<Sample> out;
  const YAML::Node items = doc["items"];
  if (!items || items.IsNull()) return out;
  if (!items.IsSequence()) throw IngestionError(manifest.string() + ": items must be a list");
  for (size_t i = 0; i < items.size(); ++i) {
    const YAML::Node it = items[i];
    const std::string id = it["id"] ? it["id"].as<std::string>() : "#" + std::to_string(i);
    try {
      for (const auto& kv : it) {
        const auto key = kv.first.as<std::string>();
        if (key != "id" && key != "latent" && key != "caption" && key != "bbox" && key != "source_params" &&
            key != "drive_params")
          throw IngestionError("unknown key '" + key + "'");
      }
      for (const char* key : {"latent", "caption", "bbox", "source_params"})
        if (!it[key]) throw IngestionError(std::string("missing '") + key + "'");
      Sample s;
      s.id = id;
      s.z0 = io::load_latent(root / it["latent"].as<std::string>());
      const Shape want{1, config.latent_channels, config.latent_size, config.latent_size};
      if (s.z0.shape() != want)
        throw IngestionError("latent shape " + to_string(s.z0.shape()) + " does not match config " + to_string(want));
      s.caption = it["caption"].as<std::string>();
      const auto b = it["bbox"].as<std::vector<double>>();
      if (b.size() != 4) throw IngestionError("bbox needs 4 numbers");
      s.bbox = {b[0], b[1], b[2], b[3]};
      validate_box(s.bbox);
      s.source = io::load_face_params(root / it["source_params"].as<std::string>());
      if (it["drive_params"]) s.drive = io::load_face_params(root / it["drive_params"].as<std::string>());
      out.push_back(std::move(s));
    } catch (const IngestionError& e) {
      throw IngestionError("dataset item '" + id + "': " + e.what());
    } catch (const std::exception& e) {
      throw IngestionError("dataset item '" + id + "': " + e.what());
    }
  }
  return out;
}

/// Deterministic permutation of [0, n) for a given seed and epoch.
inline std::vector<size_t> epoch_order(size_t n, uint64_t seed, uint64_t epoch) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, "epoch" + std::to_string(epoch)));
  for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i)))]);
  return idx;
}

/// Flat colors and one low-frequency pattern derived from the identity
/// coefficients; landmarks drawn on top.
inline io::RgbImage render_face(const FaceParams& p, const MorphableBasis& basis, int64_t size, uint64_t background_seed) {
  const LandmarkSet72 lm = extract_landmarks(p, basis);
  auto coef = [&](size_t i) { return i < p.shape.size() ? std::tanh(p.shape[i]) : 0.0; };
  const double skin[3] = {0.72 + 0.14 * coef(0), 0.54 + 0.12 * coef(1), 0.43 + 0.12 * coef(2)};
  Rng bg(background_seed);
  const double back[3] = {bg.uniform(0.05, 0.35), bg.uniform(0.05, 0.35), bg.uniform(0.05, 0.35)};

  double x0 = 1, y0 = 1, x1 = 0, y1 = 0;
  for (int i = 0; i < kNumLandmarks; ++i) {
    if (basis.landmark_groups[static_cast<size_t>(i)] != LandmarkGroup::kContour) continue;
    x0 = std::min(x0, lm.points[static_cast<size_t>(i)][0]);
    x1 = std::max(x1, lm.points[static_cast<size_t>(i)][0]);
    y0 = std::min(y0, lm.points[static_cast<size_t>(i)][1]);
    y1 = std::max(y1, lm.points[static_cast<size_t>(i)][1]);
  }
  const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
  const double rx = std::max(0.05, 0.5 * (x1 - x0)), ry = std::max(0.05, 0.5 * (y1 - y0));

  io::RgbImage im{size, size, std::vector<uint8_t>(static_cast<size_t>(size * size * 3))};
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(size);
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(size);
      const double du = (u - cx) / rx, dv = (v - cy) / ry;
      const bool inside = du * du + dv * dv <= 1.0;
      const double wave = 0.08 * std::sin(6.0 * du * (1.0 + coef(3)) + 3.0 * coef(4)) *
                          std::cos(5.0 * dv * (1.0 + coef(5)) + 3.0 * coef(6));
      for (int k = 0; k < 3; ++k) {
        const double shade = inside ? skin[k] + wave : back[k] + 0.1 * v;
        im.rgb[static_cast<size_t>((y * size + x) * 3 + k)] = io::to_byte(shade);
      }
    }
  const ControlImage marks = rasterize_control(lm, size, size, basis);
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      if (marks.at(y, x, 0) + marks.at(y, x, 1) + marks.at(y, x, 2) == 0.0) continue;
      for (int64_t k = 0; k < 3; ++k)
        im.rgb[static_cast<size_t>((y * size + x) * 3 + k)] = io::to_byte(0.2 * marks.at(y, x, k));
    }
  return im;
}

/// Contour bounding box grown by 10 percent and clipped to the frame.
inline Box face_box(const FaceParams& p, const MorphableBasis& basis) {
  const LandmarkSet72 lm = extract_landmarks(p, basis);
  double x0 = 1, y0 = 1, x1 = 0, y1 = 0;
  for (const auto& pt : lm.points) {
    x0 = std::min(x0, pt[0]);
    x1 = std::max(x1, pt[0]);
    y0 = std::min(y0, pt[1]);
    y1 = std::max(y1, pt[1]);
  }
  const double mx = 0.1 * (x1 - x0), my = 0.1 * (y1 - y0);
  Box b{std::clamp(x0 - mx, 0.0, 1.0), std::clamp(y0 - my, 0.0, 1.0), std::clamp(x1 + mx, 0.0, 1.0),
        std::clamp(y1 + my, 0.0, 1.0)};
  if (b.x1 - b.x0 < 0.1 || b.y1 - b.y0 < 0.1) b = kDefaultFaceBox;
  return b;
}

struct SyntheticOptions {
  int64_t count = 8;
  uint64_t seed = 0;
  int64_t poses = 0;  // pose templates written to <root>/poses
  FaceParamRanges ranges;
};

inline const std::vector<std::string>& synthetic_captions() {
  static const std::vector<std::string> captions{
      "a portrait photo of a person", "a close-up photo of a face", "a person smiling at the camera",
      "a studio headshot", "a candid photo of someone outdoors", "a painting of a face"};
  return captions;
}

/// Writes a synthetic dataset (latents, previews, face parameters, manifest)
/// to root and returns the number of items.
inline int64_t write_synthetic_dataset(const fs::path& root, const TrainConfig& config, const SyntheticOptions& opt) {
  fs::create_directories(root);
  const MorphableBasis basis = make_toy_basis();
  const int64_t image_size = 4 * config.latent_size;
  Rng rng(derive_seed(opt.seed, "synthetic"));
  YAML::Emitter m;
  m.SetDoublePrecision(17);
  m << YAML::BeginMap << YAML::Key << "format_version" << YAML::Value << kManifestFormatVersion;
  m << YAML::Key << "items" << YAML::Value << YAML::BeginSeq;
  for (int64_t i = 0; i < opt.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "s%03lld", static_cast<long long>(i));
    const FaceParams src = random_face_params(rng, basis, opt.ranges);
    const FaceParams drv = random_face_params(rng, basis, opt.ranges);
    const std::string& caption =
        synthetic_captions()[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(synthetic_captions().size())))];
    const io::RgbImage im = render_face(src, basis, image_size, rng.next_u64());
    io::write_png(root / (std::string(name) + ".png"), im);
    io::save_latent(root / (std::string(name) + ".lat"), io::image_to_latent(im, config.latent_channels, config.latent_size));
    io::save_face_params(root / (std::string(name) + "_source.yaml"), src);
    io::save_face_params(root / (std::string(name) + "_drive.yaml"), drv);
    const Box b = face_box(src, basis);
    m << YAML::BeginMap << YAML::Key << "id" << YAML::Value << name;
    m << YAML::Key << "latent" << YAML::Value << std::string(name) + ".lat";
    m << YAML::Key << "caption" << YAML::Value << caption;
    m << YAML::Key << "bbox" << YAML::Value << YAML::Flow << std::vector<double>{b.x0, b.y0, b.x1, b.y1};
    m << YAML::Key << "source_params" << YAML::Value << std::string(name) + "_source.yaml";
    m << YAML::Key << "drive_params" << YAML::Value << std::string(name) + "_drive.yaml";
    m << YAML::EndMap;
  }
  m << YAML::EndSeq << YAML::EndMap;
  std::ofstream(root / "manifest.yaml") << m.c_str() << "\n";

  if (opt.poses > 0) {
    fs::create_directories(root / "poses");
    for (int64_t k = 0; k < opt.poses; ++k) {
      FaceParams p = FaceParams::neutral(static_cast<size_t>(basis.shape_dims()), static_cast<size_t>(basis.expr_dims()));
      const double frac = opt.poses == 1 ? 0.5 : static_cast<double>(k) / static_cast<double>(opt.poses - 1);
      p.pose.yaw = opt.ranges.max_yaw * (2.0 * frac - 1.0);
      p.pose.pitch = (k % 2 == 0 ? 0.5 : -0.5) * opt.ranges.max_pitch;
      char name[40];
      std::snprintf(name, sizeof(name), "pose_%02lld.yaml", static_cast<long long>(k));
      io::save_face_params(root / "poses" / name, p);
    }
  }
  return opt.count;
}

/// Face parameter files in a directory, sorted by file name.
inline std::vector<FaceParams> load_pose_templates(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IngestionError("pose directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".yaml") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<FaceParams> out;
  for (const auto& f : files) out.push_back(io::load_face_params(f));
  return out;
}

}  // namespace idportrait
