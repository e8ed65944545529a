#pragma once

// The assembled system: frozen stub encoders and base denoiser, trainable
// feature path (mixer or one of its ablations) and control branch.

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "idportrait/diffusion.hpp"
#include "idportrait/landmark3d.hpp"
#include "idportrait/pipeline/config.hpp"
#include "idportrait/pipeline/dataset.hpp"

namespace idportrait {

struct Model {
  TrainConfig config;
  MorphableBasis basis;
  StubFaceEncoder face_encoder;
  StubClipEncoder clip_encoder;
  NoiseSchedule schedule;
  DenoiserWeights base;
  MixerWeights mixer;
  nn::Linear concat_proj;  // feature_mode concat: d -> d over the joined token sequence
  FFRNetWeights ffrnet;

  const FFRNetWeights* control_branch() const { return config.use_ffrnet ? &ffrnet : nullptr; }

  /// Every model tensor under a stable, sorted-by-construction name.
  template <class F>
  void visit(F& f) {
    base.visit(f, "base");
    mixer.visit(f, "mixer");
    concat_proj.visit(f, "concat_proj");
    ffrnet.visit(f, "ffrnet");
  }

  std::vector<std::pair<std::string, Tensor>> named_tensors() {
    std::vector<std::pair<std::string, Tensor>> out;
    auto fn = [&out](const std::string& name, Tensor& t) { out.emplace_back(name, t); };
    visit(fn);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
  }

  /// Names of the tensors the optimizer updates under the configured ablation.
  bool is_trainable(const std::string& name) const {
    auto under = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
    if (under("ffrnet.")) return config.use_ffrnet;
    switch (config.feature_mode) {
      case FeatureMode::kMixer: return under("mixer.");
      case FeatureMode::kId: return under("mixer.proj_id.");
      case FeatureMode::kClip: return under("mixer.proj_clip.");
      case FeatureMode::kConcat: return under("mixer.proj_id.") || under("mixer.proj_clip.") || under("concat_proj.");
    }
    return false;
  }

  std::vector<std::pair<std::string, Tensor>> trainable_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, t] : named_tensors())
      if (is_trainable(name)) out.emplace_back(name, t);
    return out;
  }
};

inline Model build_model(const TrainConfig& c) {
  validate(c);
  Model m{c,
          make_toy_basis(),
          StubFaceEncoder({EncoderKind::kStubId, derive_seed(c.model_seed, "face_encoder"), c.id_dim}, c.latent_channels),
          StubClipEncoder({EncoderKind::kStubClip, derive_seed(c.model_seed, "clip_encoder"), c.clip_dim},
                          c.latent_channels),
          NoiseSchedule::linear(c.timesteps),
          init_denoiser(c.denoiser(), c.model_seed),
          init_mixer(c.mixer(), c.model_seed),
          nn::Linear::make(nn::ParamInit(derive_seed(c.model_seed, "concat")), "concat_proj", c.width, c.width, true),
          {}};
  m.ffrnet = init_from_base(m.base, c.model_seed);
  return m;
}

/// Conditioning features for the configured feature_mode: [N, T_f, d].
inline Tensor fused_features(const Model& m, const FaceIdEmbedding& f_id, const ClipFeatureGrid& f_clip) {
  switch (m.config.feature_mode) {
    case FeatureMode::kId: return project_id(f_id, m.mixer).tokens;
    case FeatureMode::kClip: return project_clip(f_clip, m.mixer).tokens;
    case FeatureMode::kConcat:
      return m.concat_proj(concat({project_id(f_id, m.mixer).tokens, project_clip(f_clip, m.mixer).tokens}, 1));
    case FeatureMode::kMixer: return mix_forward(f_id, f_clip, m.mixer).tokens;
  }
  throw ConfigError("unknown feature mode");
}

/// Control image [1, 3, 4 H_l, 4 W_l] for the configured control_mode.
inline Tensor control_tensor(const Model& m, const FaceParams& source, const FaceParams& drive) {
  const int64_t s = m.base.config.control_size();
  switch (m.config.control_mode) {
    case ControlMode::kNone: return ControlImage::black(s, s).to_tensor();
    case ControlMode::kDrive: return rasterize_control(extract_landmarks(drive, m.basis), s, s, m.basis).to_tensor();
    case ControlMode::kPredictor: return predict_landmarks(source, drive, m.basis, s, s).second.to_tensor();
  }
  throw ConfigError("unknown control mode");
}

inline const Box kFullFrame{0.0, 0.0, 1.0, 1.0};

/// Identity embedding of whole latents, the representation the identity
/// loss and the similarity report compare.
inline FaceIdEmbedding full_frame_embedding(const Model& m, const Tensor& z) {
  return face_embed(detect_and_crop(z, kFullFrame, z.dim(2), z.dim(3)), m.face_encoder);
}

/// Per-sample tensors that do not depend on trainable weights.
struct PreparedSample {
  Tensor z0;       // [1, C, H, W]
  Tensor context;  // [1, T_txt, d]
  Tensor mask;     // [1, 1, H, W]
  Tensor f_id;     // [1, D_id]
  Tensor f_clip;   // [1, 257, D_clip]
  Tensor control;  // [1, 3, 4H, 4W]
  Tensor ref_id;   // [1, D_id], full-frame embedding of z0
};

inline PreparedSample prepare_sample(const Model& m, const Sample& s) {
  NoGradGuard ng;
  const auto& c = m.config;
  const FaceCrop crop = detect_and_crop(s.z0, s.bbox, c.latent_size, c.latent_size);
  return {s.z0,
          caption_context(s.caption, c.context_tokens, c.width),
          crop.mask,
          face_embed(crop, m.face_encoder).vec,
          clip_grid(crop, m.clip_encoder).tokens,
          control_tensor(m, s.source, s.drive.value_or(s.source)),
          full_frame_embedding(m, s.z0).vec};
}

inline std::vector<PreparedSample> prepare_dataset(const Model& m, const std::vector<Sample>& data) {
  std::vector<PreparedSample> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(prepare_sample(m, s));
  return out;
}

struct Batch {
  Tensor z0, context, mask, f_id, f_clip, control, ref_id;

  int64_t size() const { return z0.dim(0); }
};

inline Batch make_batch(const std::vector<PreparedSample>& data, const std::vector<size_t>& idx) {
  if (idx.empty()) throw UsageError("make_batch: empty batch");
  auto stack = [&](Tensor PreparedSample::*field) {
    std::vector<Tensor> parts;
    for (size_t i : idx) parts.push_back(data.at(i).*field);
    return concat(parts, 0);
  };
  return {stack(&PreparedSample::z0),     stack(&PreparedSample::context), stack(&PreparedSample::mask),
          stack(&PreparedSample::f_id),   stack(&PreparedSample::f_clip),  stack(&PreparedSample::control),
          stack(&PreparedSample::ref_id)};
}

}  // namespace idportrait
