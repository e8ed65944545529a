#pragma once

// Generation from a reference latent and face parameters, evaluation over
// (identity, pose) grids, and ablation sweeps.

#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "idportrait/pipeline/checkpoint.hpp"

namespace idportrait {

struct InferenceRequest {
  Tensor reference;         // [1, C, H, W]
  std::optional<Box> bbox;  // face box in the reference; default box when absent
  FaceParams source;
  FaceParams drive;
  std::string prompt;
  uint64_t seed = 0;
};

struct InferenceReport {
  double face_sim = 0.0;   // identity similarity of generated vs reference
  double clip_face = 0.0;  // cosine of mean-pooled detail tokens over the face box
};

struct InferenceResult {
  Tensor latent;
  InferenceReport report;
};

inline double clip_face_similarity(const Model& m, const Tensor& a, const Tensor& b, const Box& box) {
  const auto& c = m.config;
  auto pooled = [&](const Tensor& z) {
    return mean_axis(clip_grid(detect_and_crop(z, box, c.latent_size, c.latent_size), m.clip_encoder).tokens, 1);
  };
  return face_sim({pooled(a)}, {pooled(b)});
}

inline InferenceResult infer(const Model& m, const InferenceRequest& req) {
  NoGradGuard ng;
  const auto& c = m.config;
  check_latent(m.base.config, req.reference, "infer");
  if (req.reference.dim(0) != 1) throw ShapeError("infer: one reference image at a time");
  const Box box = req.bbox.value_or(kDefaultFaceBox);
  const FaceCrop crop = detect_and_crop(req.reference, box, c.latent_size, c.latent_size);
  const Conditioning cond{control_tensor(m, req.source, req.drive),
                          fused_features(m, face_embed(crop, m.face_encoder), clip_grid(crop, m.clip_encoder)),
                          caption_context(req.prompt, c.context_tokens, c.width), c.base_id_attention};
  Rng rng(derive_seed(req.seed, "infer"));
  InferenceResult out;
  out.latent = guided_sample(m.base, m.control_branch(), cond, c.sample_steps, c.guidance_scale, rng, m.schedule);
  out.report.face_sim = face_sim(full_frame_embedding(m, out.latent), full_frame_embedding(m, req.reference));
  out.report.clip_face = clip_face_similarity(m, out.latent, req.reference, box);
  return out;
}

inline std::string format_report(const InferenceReport& r) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "face_sim: %.6f\nclip_face: %.6f\n", r.face_sim, r.clip_face);
  return buf;
}

struct EvalRow {
  std::string id;
  int64_t pose = 0;
  double face_sim = 0.0;
  double clip_face = 0.0;
};

struct EvalTable {
  std::vector<EvalRow> rows;
  double mean_face_sim = 0.0;
  double mean_clip_face = 0.0;
};

/// One generation per (identity, pose template); the template supplies pose
/// and expression, the identity keeps its own shape.
inline EvalTable evaluate(const Model& m, const std::vector<Sample>& ids, const std::vector<FaceParams>& poses,
                          const std::string& prompt = "a portrait photo of a person") {
  if (ids.empty()) throw UsageError("evaluate: the identity set is empty");
  if (poses.empty()) throw UsageError("evaluate: no pose templates given");
  EvalTable t;
  for (const Sample& s : ids)
    for (size_t k = 0; k < poses.size(); ++k) {
      const InferenceRequest req{s.z0, s.bbox, s.source, poses[k], prompt,
                                 derive_seed(m.config.seed, s.id + "/" + std::to_string(k))};
      const InferenceReport r = infer(m, req).report;
      t.rows.push_back({s.id, static_cast<int64_t>(k), r.face_sim, r.clip_face});
    }
  for (const auto& r : t.rows) {
    t.mean_face_sim += r.face_sim;
    t.mean_clip_face += r.clip_face;
  }
  t.mean_face_sim /= static_cast<double>(t.rows.size());
  t.mean_clip_face /= static_cast<double>(t.rows.size());
  return t;
}

inline std::string format_tsv(const EvalTable& t) {
  std::ostringstream os;
  os.precision(10);
  os << "id\tpose\tface_sim\tclip_face\n";
  for (const auto& r : t.rows) os << r.id << '\t' << r.pose << '\t' << r.face_sim << '\t' << r.clip_face << '\n';
  os << "mean\t-\t" << t.mean_face_sim << '\t' << t.mean_clip_face << '\n';
  return os.str();
}

/// FID needs a pretrained Inception network and a large reference set.
[[noreturn]] inline double fid(const std::vector<Tensor>&, const std::vector<Tensor>&) {
  throw NotImplementedError("FID is not available: it requires a pretrained Inception network and a real image corpus");
}

/// CLIP-T needs a pretrained joint text-image model.
[[noreturn]] inline double clip_t(const std::vector<Tensor>&, const std::vector<std::string>&) {
  throw NotImplementedError("CLIP-T is not available: it requires a pretrained text-image model");
}

/// One named configuration in an ablation sweep: overrides on a base config.
struct AblationEntry {
  std::string name;
  YAML::Node overrides;  // same sections as a config file
};

/// The feature and control variants compared in the ablation study, plus
/// the full model.
inline std::vector<AblationEntry> standard_ablation_matrix() {
  auto entry = [](const std::string& name, const std::string& yaml) { return AblationEntry{name, YAML::Load(yaml)}; };
  return {
      entry("full", "ablation: {feature_mode: mixer, use_ffrnet: true, control_mode: predictor}"),
      entry("feature_id", "ablation: {feature_mode: id}"),
      entry("feature_clip", "ablation: {feature_mode: clip}"),
      entry("feature_concat", "ablation: {feature_mode: concat}"),
      entry("no_ffrnet", "ablation: {use_ffrnet: false}"),
      entry("ffrnet_no_landmark", "ablation: {control_mode: none}"),
      entry("ffrnet_drive_landmark", "ablation: {control_mode: drive}"),
  };
}

struct AblationMatrix {
  int64_t steps = 20;
  std::vector<uint64_t> seeds{0};
  YAML::Node base;  // overrides applied to every entry first
  std::vector<AblationEntry> entries;
};

/// Matrix file: steps, seeds, optional base overrides and a list of entries
/// (name plus config sections). Without an entry list the standard matrix
/// is used.
inline AblationMatrix parse_ablation_matrix(const std::string& text) {
  AblationMatrix mtx;
  YAML::Node doc;
  try {
    doc = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("ablation matrix: ") + e.what());
  }
  if (doc.IsNull()) doc = YAML::Node(YAML::NodeType::Map);
  if (!doc.IsMap()) throw ConfigError("ablation matrix: top level must be a mapping");
  for (const auto& kv : doc) {
    const auto key = kv.first.as<std::string>();
    if (key == "steps") mtx.steps = kv.second.as<int64_t>();
    else if (key == "seeds") mtx.seeds = kv.second.as<std::vector<uint64_t>>();
    else if (key == "base") mtx.base = kv.second;
    else if (key == "configs") {
      for (const auto& e : kv.second) {
        AblationEntry entry;
        YAML::Node rest(YAML::NodeType::Map);
        for (const auto& f : e) {
          const auto k = f.first.as<std::string>();
          if (k == "name") entry.name = f.second.as<std::string>();
          else rest[k] = f.second;
        }
        if (entry.name.empty()) throw ConfigError("ablation matrix: every config needs a name");
        entry.overrides = rest;
        mtx.entries.push_back(entry);
      }
    } else
      throw ConfigError("ablation matrix: unknown key '" + key + "'");
  }
  if (mtx.steps < 0) throw ConfigError("ablation matrix: steps must be non-negative");
  if (mtx.seeds.empty()) throw ConfigError("ablation matrix: at least one seed required");
  if (mtx.entries.empty()) mtx.entries = standard_ablation_matrix();
  return mtx;
}

inline TrainConfig ablation_config(const TrainConfig& base, const AblationMatrix& mtx, const AblationEntry& e,
                                   uint64_t seed) {
  TrainConfig c = base;
  apply_yaml(c, mtx.base);
  apply_yaml(c, e.overrides);
  c.seed = seed;
  validate(c);
  return c;
}

struct AblationResult {
  std::string name;
  uint64_t seed = 0;
  double final_l_diff = 0.0;
  double face_sim = 0.0;  // mean over the training identities
  double clip_face = 0.0;
};

/// Trains one configuration for `steps` and generates once per identity
/// (each with its own drive parameters).
inline AblationResult run_ablation_entry(const TrainConfig& c, const std::string& name, const std::vector<Sample>& data,
                                         int64_t steps) {
  TrainState s = init_train_state(c);
  const auto prepared = prepare_dataset(s.model, data);
  AblationResult r{name, c.seed, 0.0, 0.0, 0.0};
  for (int64_t i = 0; i < steps; ++i) r.final_l_diff = train_step(s, prepared).l_diff;
  for (const Sample& smp : data) {
    const InferenceReport rep =
        infer(s.model, {smp.z0, smp.bbox, smp.source, smp.drive.value_or(smp.source), smp.caption, c.seed}).report;
    r.face_sim += rep.face_sim / static_cast<double>(data.size());
    r.clip_face += rep.clip_face / static_cast<double>(data.size());
  }
  return r;
}

inline std::string format_ablation_tsv(const std::vector<AblationResult>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "config\tseed\tfinal_l_diff\tface_sim\tclip_face\n";
  for (const auto& r : rows)
    os << r.name << '\t' << r.seed << '\t' << r.final_l_diff << '\t' << r.face_sim << '\t' << r.clip_face << '\n';
  return os.str();
}

}  // namespace idportrait
