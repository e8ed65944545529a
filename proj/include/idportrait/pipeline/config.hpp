#pragma once

// Training / inference configuration. The file format is YAML with four
// sections (model, diffusion, train, ablation); every key is optional and
// unknown keys are rejected.

#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "idportrait/attribute_mixer.hpp"
#include "idportrait/diffusion.hpp"
#include "idportrait/errors.hpp"
#include "idportrait/rng.hpp"

namespace idportrait {

enum class ControlMode { kNone, kDrive, kPredictor };
enum class FeatureMode { kId, kClip, kConcat, kMixer };

inline std::string to_string(ControlMode m) {
  switch (m) {
    case ControlMode::kNone: return "none";
    case ControlMode::kDrive: return "drive";
    case ControlMode::kPredictor: return "predictor";
  }
  return "?";
}

inline std::string to_string(FeatureMode m) {
  switch (m) {
    case FeatureMode::kId: return "id";
    case FeatureMode::kClip: return "clip";
    case FeatureMode::kConcat: return "concat";
    case FeatureMode::kMixer: return "mixer";
  }
  return "?";
}

inline std::string to_string(LossNormalization n) {
  return n == LossNormalization::kAllElements ? "all_elements" : "mask_area";
}

inline void parse_enum(const std::string& s, ControlMode& out) {
  for (auto m : {ControlMode::kNone, ControlMode::kDrive, ControlMode::kPredictor})
    if (to_string(m) == s) return void(out = m);
  throw ConfigError("control_mode must be one of none|drive|predictor, got '" + s + "'");
}

inline void parse_enum(const std::string& s, FeatureMode& out) {
  for (auto m : {FeatureMode::kId, FeatureMode::kClip, FeatureMode::kConcat, FeatureMode::kMixer})
    if (to_string(m) == s) return void(out = m);
  throw ConfigError("feature_mode must be one of id|clip|concat|mixer, got '" + s + "'");
}

inline void parse_enum(const std::string& s, LossNormalization& out) {
  for (auto m : {LossNormalization::kAllElements, LossNormalization::kMaskArea})
    if (to_string(m) == s) return void(out = m);
  throw ConfigError("loss_normalization must be all_elements or mask_area, got '" + s + "'");
}

struct TrainConfig {
  // model
  int64_t width = 64;
  int64_t id_dim = 512;
  int64_t clip_dim = 64;
  int64_t latent_channels = 4;
  int64_t latent_size = 16;
  std::vector<int64_t> channels{16, 32, 32};
  int64_t context_tokens = 8;
  int64_t mixer_layers = 2;
  int64_t heads = 1;
  uint64_t model_seed = 0;
  // diffusion
  int64_t timesteps = 100;
  int64_t lightning_steps = 4;
  int64_t sample_steps = 4;
  double guidance_scale = 2.0;
  LossNormalization loss_normalization = LossNormalization::kAllElements;
  // train
  double lr = 1e-5;
  int64_t batch_size = 4;
  int64_t steps = 1000;
  double lambda_id = 0.5;
  int64_t id_loss_every_n = 1;
  double cfg_dropout_p = 0.1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  std::string dataset = "data/synthetic";
  std::string output = "runs/default";
  int64_t checkpoint_every = 0;
  int64_t log_every = 10;
  // ablation
  bool use_ffrnet = true;
  ControlMode control_mode = ControlMode::kPredictor;
  FeatureMode feature_mode = FeatureMode::kMixer;
  bool base_id_attention = false;

  DenoiserConfig denoiser() const {
    DenoiserConfig d;
    d.latent_channels = latent_channels;
    d.latent_size = latent_size;
    d.channels = channels;
    d.context_dim = width;
    d.context_tokens = context_tokens;
    d.heads = heads;
    return d;
  }

  MixerConfig mixer() const {
    MixerConfig m;
    m.id_dim = id_dim;
    m.clip_dim = clip_dim;
    m.width = width;
    m.layers = mixer_layers;
    m.heads = heads;
    return m;
  }
};

/// Calls fn(section, key, field) for every configuration field in file order.
template <class C, class Fn>
void for_each_field(C& c, Fn&& fn) {
  fn("model", "width", c.width);
  fn("model", "id_dim", c.id_dim);
  fn("model", "clip_dim", c.clip_dim);
  fn("model", "latent_channels", c.latent_channels);
  fn("model", "latent_size", c.latent_size);
  fn("model", "channels", c.channels);
  fn("model", "context_tokens", c.context_tokens);
  fn("model", "mixer_layers", c.mixer_layers);
  fn("model", "heads", c.heads);
  fn("model", "seed", c.model_seed);
  fn("diffusion", "timesteps", c.timesteps);
  fn("diffusion", "lightning_steps", c.lightning_steps);
  fn("diffusion", "sample_steps", c.sample_steps);
  fn("diffusion", "guidance_scale", c.guidance_scale);
  fn("diffusion", "loss_normalization", c.loss_normalization);
  fn("train", "lr", c.lr);
  fn("train", "batch_size", c.batch_size);
  fn("train", "steps", c.steps);
  fn("train", "lambda_id", c.lambda_id);
  fn("train", "id_loss_every_n", c.id_loss_every_n);
  fn("train", "cfg_dropout_p", c.cfg_dropout_p);
  fn("train", "weight_decay", c.weight_decay);
  fn("train", "beta1", c.beta1);
  fn("train", "beta2", c.beta2);
  fn("train", "adam_eps", c.adam_eps);
  fn("train", "seed", c.seed);
  fn("train", "dataset", c.dataset);
  fn("train", "output", c.output);
  fn("train", "checkpoint_every", c.checkpoint_every);
  fn("train", "log_every", c.log_every);
  fn("ablation", "use_ffrnet", c.use_ffrnet);
  fn("ablation", "control_mode", c.control_mode);
  fn("ablation", "feature_mode", c.feature_mode);
  fn("ablation", "base_id_attention", c.base_id_attention);
}

inline void validate(const TrainConfig& c) {
  auto positive = [](int64_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(c.width, "model.width");
  positive(c.id_dim, "model.id_dim");
  positive(c.clip_dim, "model.clip_dim");
  positive(c.latent_channels, "model.latent_channels");
  positive(c.latent_size, "model.latent_size");
  positive(c.context_tokens, "model.context_tokens");
  positive(c.mixer_layers, "model.mixer_layers");
  positive(c.heads, "model.heads");
  positive(c.lightning_steps, "diffusion.lightning_steps");
  positive(c.sample_steps, "diffusion.sample_steps");
  positive(c.batch_size, "train.batch_size");
  positive(c.id_loss_every_n, "train.id_loss_every_n");
  if (c.steps < 0) throw ConfigError("train.steps must be non-negative");
  if (c.channels.empty()) throw ConfigError("model.channels must list at least one level");
  if (c.timesteps < 2) throw ConfigError("diffusion.timesteps must be at least 2");
  if (c.lightning_steps > c.timesteps || c.sample_steps > c.timesteps)
    throw ConfigError("sampler steps exceed diffusion.timesteps");
  if (!(c.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(c.lambda_id >= 0.0)) throw ConfigError("train.lambda_id must be non-negative");
  if (!(c.guidance_scale >= 0.0)) throw ConfigError("diffusion.guidance_scale must be non-negative");
  if (!(c.cfg_dropout_p >= 0.0 && c.cfg_dropout_p <= 1.0)) throw ConfigError("train.cfg_dropout_p must lie in [0, 1]");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0))
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  if (!(c.adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  try {
    idportrait::validate(c.denoiser());
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (c.width % c.heads != 0) throw ConfigError("model.heads must divide model.width");
}

/// Applies the keys present in `root` on top of `c`.
inline void apply_yaml(TrainConfig& c, const YAML::Node& root) {
  if (!root || root.IsNull()) return;
  if (!root.IsMap()) throw ConfigError("config: top level must be a mapping of sections");
  for (const auto& sec : root) {
    const auto section = sec.first.as<std::string>();
    if (section != "model" && section != "diffusion" && section != "train" && section != "ablation")
      throw ConfigError("config: unknown section '" + section + "'");
    if (sec.second.IsNull()) continue;
    if (!sec.second.IsMap()) throw ConfigError("config: section '" + section + "' must be a mapping");
    for (const auto& kv : sec.second) {
      const auto key = kv.first.as<std::string>();
      bool found = false;
      for_each_field(c, [&](const char* s, const char* k, auto& field) {
        if (found || section != s || key != k) return;
        found = true;
        using T = std::decay_t<decltype(field)>;
        try {
          if constexpr (std::is_enum_v<T>) parse_enum(kv.second.as<std::string>(), field);
          else field = kv.second.as<T>();
        } catch (const YAML::Exception&) {
          throw ConfigError("config: bad value for " + section + "." + key);
        }
      });
      if (!found) throw ConfigError("config: unknown key '" + section + "." + key + "'");
    }
  }
}

inline TrainConfig parse_config(const std::string& text) {
  TrainConfig c;
  try {
    apply_yaml(c, YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text form: every field, fixed order, round-trip precision.
inline std::string format_config(const TrainConfig& c) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  std::string open;
  for_each_field(c, [&](const char* s, const char* k, const auto& field) {
    if (open != s) {
      if (!open.empty()) out << YAML::EndMap;
      out << YAML::Key << s << YAML::Value << YAML::BeginMap;
      open = s;
    }
    using T = std::decay_t<decltype(field)>;
    out << YAML::Key << k << YAML::Value;
    if constexpr (std::is_enum_v<T>) out << to_string(field);
    else if constexpr (std::is_same_v<T, std::vector<int64_t>>) out << YAML::Flow << field;
    else out << field;
  });
  out << YAML::EndMap << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

inline uint64_t config_hash(const TrainConfig& c) { return fnv1a(format_config(c)); }

}  // namespace idportrait
