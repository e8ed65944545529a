#pragma once

// FaceParams text format (YAML):
//
//   format_version: 1
//   shape: [a0, a1, ...]
//   pose: {yaw: 0, pitch: 0, roll: 0, tx: 0, ty: 0, scale: 1}
//   expression: [b0, b1, ...]

#include <yaml-cpp/yaml.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "idportrait/errors.hpp"
#include "idportrait/landmark3d.hpp"

namespace idportrait::io {

inline constexpr int kFaceParamsFormatVersion = 1;

inline FaceParams parse_face_params(const std::string& text, const std::string& origin = "<string>") {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw IngestionError(origin + ": " + e.what());
  }
  if (!root.IsMap()) throw IngestionError(origin + ": expected a mapping");
  static const std::set<std::string> known{"format_version", "shape", "pose", "expression"};
  for (const auto& kv : root)
    if (!known.contains(kv.first.as<std::string>()))
      throw IngestionError(origin + ": unknown key '" + kv.first.as<std::string>() + "'");
  if (!root["format_version"] || root["format_version"].as<int>() != kFaceParamsFormatVersion)
    throw IngestionError(origin + ": unsupported or missing format_version");
  try {
    FaceParams p;
    p.shape = root["shape"].as<std::vector<double>>();
    p.expression = root["expression"].as<std::vector<double>>();
    const YAML::Node pose = root["pose"];
    if (!pose || !pose.IsMap()) throw IngestionError(origin + ": missing pose");
    static const std::set<std::string> pose_keys{"yaw", "pitch", "roll", "tx", "ty", "scale"};
    for (const auto& kv : pose)
      if (!pose_keys.contains(kv.first.as<std::string>()))
        throw IngestionError(origin + ": unknown pose key '" + kv.first.as<std::string>() + "'");
    p.pose.yaw = pose["yaw"].as<double>(0.0);
    p.pose.pitch = pose["pitch"].as<double>(0.0);
    p.pose.roll = pose["roll"].as<double>(0.0);
    p.pose.tx = pose["tx"].as<double>(0.0);
    p.pose.ty = pose["ty"].as<double>(0.0);
    p.pose.scale = pose["scale"].as<double>(1.0);
    validate(p);
    return p;
  } catch (const YAML::Exception& e) {
    throw IngestionError(origin + ": " + e.what());
  } catch (const RangeError& e) {
    throw IngestionError(origin + ": " + e.what());
  }
}

inline std::string format_face_params(const FaceParams& p) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "format_version" << YAML::Value << kFaceParamsFormatVersion;
  out << YAML::Key << "shape" << YAML::Value << YAML::Flow << p.shape;
  out << YAML::Key << "pose" << YAML::Value << YAML::Flow << YAML::BeginMap;
  out << YAML::Key << "yaw" << YAML::Value << p.pose.yaw;
  out << YAML::Key << "pitch" << YAML::Value << p.pose.pitch;
  out << YAML::Key << "roll" << YAML::Value << p.pose.roll;
  out << YAML::Key << "tx" << YAML::Value << p.pose.tx;
  out << YAML::Key << "ty" << YAML::Value << p.pose.ty;
  out << YAML::Key << "scale" << YAML::Value << p.pose.scale;
  out << YAML::EndMap;
  out << YAML::Key << "expression" << YAML::Value << YAML::Flow << p.expression;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

inline FaceParams load_face_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open face params file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_face_params(ss.str(), path.string());
}

inline void save_face_params(const std::filesystem::path& path, const FaceParams& p) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write face params file " + path.string());
  out << format_face_params(p);
}

/// Sidecar text of 72 rows "x y visible".
inline std::string format_landmarks(const LandmarkSet72& lm) {
  std::ostringstream os;
  os.precision(17);
  for (int i = 0; i < kNumLandmarks; ++i)
    os << lm.points[static_cast<size_t>(i)][0] << ' ' << lm.points[static_cast<size_t>(i)][1] << ' '
       << (lm.visible[static_cast<size_t>(i)] ? 1 : 0) << '\n';
  return os.str();
}

}  // namespace idportrait::io
