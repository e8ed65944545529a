#pragma once

// Training: AdamW over the trainable subset, one step = masked denoising
// loss + identity loss through the few-step sampler.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "idportrait/pipeline/model.hpp"

namespace idportrait {

/// Decoupled-weight-decay Adam. Moments are keyed by parameter name.
struct AdamW {
  std::map<std::string, std::vector<double>> m, v;
  int64_t t = 0;

  void step(const std::vector<std::pair<std::string, Tensor>>& params, const TrainConfig& c) {
    ++t;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    for (const auto& [name, p] : params) {
      auto& mm = m[name];
      auto& vv = v[name];
      const auto n = static_cast<size_t>(p.numel());
      if (mm.empty()) mm.assign(n, 0.0);
      if (vv.empty()) vv.assign(n, 0.0);
      auto w = Tensor(p).mutable_data();
      const bool has = p.has_grad();
      for (size_t i = 0; i < n; ++i) {
        const double g = has ? p.grad()[i] : 0.0;
        mm[i] = c.beta1 * mm[i] + (1.0 - c.beta1) * g;
        vv[i] = c.beta2 * vv[i] + (1.0 - c.beta2) * g * g;
        w[i] *= 1.0 - c.lr * c.weight_decay;
        w[i] -= c.lr * (mm[i] / bc1) / (std::sqrt(vv[i] / bc2) + c.adam_eps);
      }
    }
  }
};

struct TrainState {
  Model model;
  AdamW adam;
  Rng rng;
  int64_t step = 0;
};

inline TrainState init_train_state(const TrainConfig& c) {
  return {build_model(c), {}, Rng(derive_seed(c.seed, "train")), 0};
}

/// Batch indices drawn without replacement from the state's random stream.
inline std::vector<size_t> draw_batch(TrainState& s, size_t dataset_size) {
  if (dataset_size == 0) throw UsageError("training needs a non-empty dataset");
  const auto b = std::min(static_cast<size_t>(s.model.config.batch_size), dataset_size);
  std::vector<size_t> pool(dataset_size);
  for (size_t i = 0; i < dataset_size; ++i) pool[i] = i;
  for (size_t i = 0; i < b; ++i)
    std::swap(pool[i], pool[static_cast<size_t>(s.rng.uniform_int(static_cast<int64_t>(i), static_cast<int64_t>(dataset_size)))]);
  pool.resize(b);
  return pool;
}

inline void check_finite(double v, const char* term, int64_t step) {
  if (!std::isfinite(v))
    throw TrainingDivergedError("non-finite " + std::string(term) + " at step " + std::to_string(step) + " (value " +
                                std::to_string(v) + ")");
}

/// Random quantities consumed by one training step.
struct StepDraws {
  std::vector<int64_t> t;
  Tensor eps;
  Tensor context;             // text context after dropout
  std::optional<Tensor> x_T;  // present when the identity loss runs
};

/// Draws in a fixed order: t, eps, dropout, then x_T if the identity loss
/// runs at this step.
inline StepDraws draw_step(const Model& m, const Batch& b, int64_t step, Rng& rng) {
  const auto& c = m.config;
  StepDraws d;
  d.t.resize(static_cast<size_t>(b.size()));
  for (auto& ti : d.t) ti = rng.uniform_int(0, c.timesteps);
  d.eps = standard_normal(b.z0.shape(), rng);
  d.context = cfg_dropout(b.context, m.base.null_context, c.cfg_dropout_p, rng).context;
  if (c.lambda_id > 0.0 && step % c.id_loss_every_n == 0) d.x_T = standard_normal(b.z0.shape(), rng);
  return d;
}

struct StepLosses {
  Tensor l_diff;
  Tensor l_id;  // undefined when the identity loss is skipped
  Tensor l_total;
};

/// Loss graph for one step with every random quantity fixed. Throws
/// TrainingDivergedError on the first non-finite term.
inline StepLosses step_losses(const Model& m, const Batch& b, const StepDraws& d, int64_t step = 0) {
  const auto& c = m.config;
  const Tensor z_t = add_noise(b.z0, d.t, d.eps, m.schedule);
  const Conditioning cond{b.control, fused_features(m, {b.f_id}, {b.f_clip}), d.context, c.base_id_attention};
  StepLosses out;
  out.l_diff = masked_diffusion_loss(d.eps, predict_noise(m.base, m.control_branch(), cond, z_t, d.t), b.mask,
                                     c.loss_normalization);
  check_finite(out.l_diff.item(), "l_diff", step);
  out.l_total = out.l_diff;
  if (d.x_T) {
    const Tensor z0_hat = lightning_generate(m.base, m.control_branch(), cond, *d.x_T, c.lightning_steps, m.schedule);
    out.l_id = id_loss({b.ref_id}, full_frame_embedding(m, z0_hat));
    check_finite(out.l_id.item(), "l_id", step);
    out.l_total = total_loss(out.l_diff, out.l_id, c.lambda_id);
  }
  return out;
}

/// One optimizer update. Returns the loss terms evaluated before the update.
inline LossBreakdown train_step(TrainState& s, const Batch& b) {
  Model& m = s.model;
  const auto& c = m.config;
  const StepDraws d = draw_step(m, b, s.step, s.rng);
  const StepLosses l = step_losses(m, b, d, s.step);
  const LossBreakdown out = total_loss(l.l_diff.item(), d.x_T ? l.l_id.item() : 0.0, c.lambda_id);
  check_finite(l.l_total.item(), "l_total", s.step);

  const auto params = m.trainable_parameters();
  for (const auto& [name, p] : params) Tensor(p).zero_grad();
  l.l_total.backward();
  for (const auto& [name, p] : params)
    if (p.has_grad())
      for (double g : p.grad())
        if (!std::isfinite(g)) throw TrainingDivergedError("non-finite gradient for " + name + " at step " + std::to_string(s.step));
  s.adam.step(params, c);
  for (const auto& [name, p] : params) Tensor(p).zero_grad();
  ++s.step;
  return out;
}

/// Draws a batch and trains on it.
inline LossBreakdown train_step(TrainState& s, const std::vector<PreparedSample>& data) {
  return train_step(s, make_batch(data, draw_batch(s, data.size())));
}

/// Masked denoising loss on every sample at fixed timesteps and noise,
/// without updating anything. Comparable across training steps.
inline double probe_diffusion_loss(const Model& m, const std::vector<PreparedSample>& data, uint64_t seed,
                                   const std::vector<int64_t>& timesteps = {10, 30, 50, 70, 90}) {
  NoGradGuard ng;
  Rng rng(derive_seed(seed, "probe"));
  std::vector<size_t> all(data.size());
  for (size_t i = 0; i < data.size(); ++i) all[i] = i;
  const Batch b = make_batch(data, all);
  double acc = 0.0;
  for (int64_t ts : timesteps) {
    const std::vector<int64_t> t(static_cast<size_t>(b.size()), ts);
    const Tensor eps = standard_normal(b.z0.shape(), rng);
    const Conditioning cond{b.control, fused_features(m, {b.f_id}, {b.f_clip}), b.context, m.config.base_id_attention};
    const Tensor pred = predict_noise(m.base, m.control_branch(), cond, add_noise(b.z0, t, eps, m.schedule), t);
    acc += masked_diffusion_loss(eps, pred, b.mask, m.config.loss_normalization).item();
  }
  return acc / static_cast<double>(timesteps.size());
}

}  // namespace idportrait
