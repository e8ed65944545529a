#pragma once

// Noise schedule, training losses, classifier-free guidance and the
// deterministic few-step sampler used both for the identity loss and for
// inference.

#include <cmath>
#include <string>
#include <vector>

#include "idportrait/encoders.hpp"
#include "idportrait/ffrnet.hpp"

namespace idportrait {

struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alpha_bar;

  int64_t steps() const { return static_cast<int64_t>(betas.size()); }

  /// Linear betas over [beta_start, beta_end] as defined for a 1000-step
  /// chain, stretched by 1000 / T so a short chain still reaches near-pure
  /// noise.
  static NoiseSchedule linear(int64_t T = 100, double beta_start = 1e-4, double beta_end = 0.02) {
    if (T < 2) throw RangeError("NoiseSchedule: need at least 2 timesteps");
    const double stretch = 1000.0 / static_cast<double>(T);
    NoiseSchedule s;
    double prod = 1.0;
    for (int64_t i = 0; i < T; ++i) {
      const double frac = static_cast<double>(i) / static_cast<double>(T - 1);
      const double beta = stretch * (beta_start + frac * (beta_end - beta_start));
      if (!(beta > 0.0 && beta < 1.0)) throw RangeError("NoiseSchedule: beta outside (0, 1)");
      prod *= 1.0 - beta;
      s.betas.push_back(beta);
      s.alpha_bar.push_back(prod);
    }
    return s;
  }

  void check(int64_t t) const {
    if (t < 0 || t >= steps())
      throw RangeError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + ")");
  }
};

/// Per-item coefficient tensor [N, 1, 1, 1].
inline Tensor per_item(const std::vector<double>& v) {
  return Tensor::from_data({static_cast<int64_t>(v.size()), 1, 1, 1}, v);
}

/// z_t = sqrt(ab[t]) z0 + sqrt(1 - ab[t]) eps, one timestep per batch item.
inline Tensor add_noise(const Tensor& z0, const std::vector<int64_t>& t, const Tensor& eps, const NoiseSchedule& s) {
  if (z0.shape() != eps.shape())
    throw ShapeError("add_noise: z0 " + to_string(z0.shape()) + " vs eps " + to_string(eps.shape()));
  if (z0.ndim() < 1 || static_cast<int64_t>(t.size()) != z0.dim(0))
    throw ShapeError("add_noise: one timestep per batch item required");
  std::vector<double> a, b;
  for (int64_t ti : t) {
    s.check(ti);
    a.push_back(std::sqrt(s.alpha_bar[static_cast<size_t>(ti)]));
    b.push_back(std::sqrt(1.0 - s.alpha_bar[static_cast<size_t>(ti)]));
  }
  Shape cs(static_cast<size_t>(z0.ndim()), 1);
  cs[0] = z0.dim(0);
  return add(mul(z0, reshape(per_item(a), cs)), mul(eps, reshape(per_item(b), cs)));
}

inline Tensor add_noise(const Tensor& z0, int64_t t, const Tensor& eps, const NoiseSchedule& s) {
  return add_noise(z0, std::vector<int64_t>(static_cast<size_t>(z0.ndim() ? z0.dim(0) : 1), t), eps, s);
}

enum class LossNormalization { kAllElements, kMaskArea };

/// Squared error restricted to the face mask. mask: [N, 1, H, W] in [0, 1].
/// kAllElements divides by N*C*H*W; kMaskArea divides by C * sum(mask).
inline Tensor masked_diffusion_loss(const Tensor& eps, const Tensor& eps_pred, const Tensor& mask,
                                    LossNormalization norm = LossNormalization::kAllElements) {
  if (eps.shape() != eps_pred.shape())
    throw ShapeError("masked_diffusion_loss: eps " + to_string(eps.shape()) + " vs prediction " +
                     to_string(eps_pred.shape()));
  if (eps.ndim() != 4 || mask.ndim() != 4 || mask.dim(0) != eps.dim(0) || mask.dim(1) != 1 ||
      mask.dim(2) != eps.dim(2) || mask.dim(3) != eps.dim(3))
    throw ShapeError("masked_diffusion_loss: mask " + to_string(mask.shape()) + " does not broadcast over " +
                     to_string(eps.shape()));
  double area = 0.0;
  for (double m : mask.data()) {
    if (!(m >= 0.0 && m <= 1.0)) throw RangeError("masked_diffusion_loss: mask values must lie in [0, 1]");
    area += m;
  }
  const Tensor se = sum(square(sub(mul(eps, mask), mul(eps_pred, mask))));
  if (norm == LossNormalization::kAllElements) return scale(se, 1.0 / static_cast<double>(eps.numel()));
  if (area == 0.0) return scale(se, 0.0);
  return scale(se, 1.0 / (static_cast<double>(eps.dim(1)) * area));
}

/// Learned null context broadcast to a batch: [n, T, d].
inline Tensor null_context_batch(const DenoiserWeights& w, int64_t n) {
  const Tensor& e = w.null_context;
  return broadcast_to(reshape(e, {1, e.dim(0), e.dim(1)}), {n, e.dim(0), e.dim(1)});
}

struct DropoutResult {
  Tensor context;
  std::vector<bool> dropped;
};

/// Replaces each item's context with the null embedding with probability p.
/// One Bernoulli draw per item regardless of p.
inline DropoutResult cfg_dropout(const Tensor& text_ctx, const Tensor& null_ctx, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw RangeError("cfg_dropout: p must lie in [0, 1]");
  if (text_ctx.ndim() != 3 || null_ctx.ndim() != 2 || text_ctx.dim(1) != null_ctx.dim(0) ||
      text_ctx.dim(2) != null_ctx.dim(1))
    throw ShapeError("cfg_dropout: context " + to_string(text_ctx.shape()) + " vs null " +
                     to_string(null_ctx.shape()));
  DropoutResult r;
  const Tensor null_row = reshape(null_ctx, {1, null_ctx.dim(0), null_ctx.dim(1)});
  std::vector<Tensor> rows;
  for (int64_t i = 0; i < text_ctx.dim(0); ++i) {
    const bool drop = rng.bernoulli(p);
    r.dropped.push_back(drop);
    rows.push_back(drop ? null_row : slice(text_ctx, 0, i, 1));
  }
  r.context = concat(rows, 0);
  return r;
}

/// Mean over the batch of 1 - cos(ref, gen).
inline Tensor id_loss(const FaceIdEmbedding& ref, const FaceIdEmbedding& gen) {
  return mean(scale(add_scalar(cosine_similarity(ref.vec, gen.vec), -1.0), -1.0));
}

struct LossBreakdown {
  double l_diff = 0.0;
  double l_id = 0.0;
  double l_total = 0.0;
  double lambda_id = 0.0;
};

inline LossBreakdown total_loss(double l_diff, double l_id, double lambda_id) {
  if (!(lambda_id >= 0.0)) throw RangeError("total_loss: lambda_id must be non-negative");
  return {l_diff, l_id, l_diff + lambda_id * l_id, lambda_id};
}

/// Differentiable l_diff + lambda * l_id, accumulated in the same order as
/// total_loss.
inline Tensor total_loss(const Tensor& l_diff, const Tensor& l_id, double lambda_id) {
  if (!(lambda_id >= 0.0)) throw RangeError("total_loss: lambda_id must be non-negative");
  return add(l_diff, scale(l_id, lambda_id));
}

inline Tensor guided_eps(const Tensor& eps_cond, const Tensor& eps_uncond, double g) {
  return add(eps_uncond, scale(sub(eps_cond, eps_uncond), g));
}

/// Everything the noise predictor conditions on besides (z_t, t).
struct Conditioning {
  Tensor control;  // [N, 3, 4 H_l, 4 W_l]
  Tensor f_mix;    // [N, T_f, d]; fused identity features
  Tensor context;  // [N, T_txt, d]; text or null embedding
  bool base_feature_attention = false;  // also expose f_mix to the base cross-attention
};

/// Base context: text alone when the control branch carries the features,
/// text followed by the features otherwise.
inline Tensor base_context(const FFRNetWeights* ffr, const Conditioning& c) {
  if (!c.f_mix.defined() || (ffr && !c.base_feature_attention)) return c.context;
  return concat({c.context, c.f_mix}, 1);
}

inline Tensor predict_noise(const DenoiserWeights& w, const FFRNetWeights* ffr, const Conditioning& c,
                            const Tensor& z_t, const std::vector<int64_t>& t) {
  if (!ffr) return denoise(w, z_t, t, base_context(ffr, c));
  const ResidualSet r = ffrnet_forward(*ffr, c.control, z_t, t, c.f_mix);
  return denoise(w, z_t, t, base_context(ffr, c), &r);
}

/// Timesteps visited by a k-step sampler, evenly spaced from T-1 down to 0.
inline std::vector<int64_t> sampling_timesteps(int64_t T, int64_t steps) {
  if (steps < 1) throw RangeError("sampler: steps must be >= 1, got " + std::to_string(steps));
  if (steps > T) throw RangeError("sampler: steps exceed the schedule length");
  if (steps == 1) return {T - 1};
  std::vector<int64_t> ts;
  for (int64_t i = 0; i < steps; ++i)
    ts.push_back(static_cast<int64_t>(
        std::llround(static_cast<double>(T - 1) * static_cast<double>(steps - 1 - i) / static_cast<double>(steps - 1))));
  return ts;
}

/// One deterministic DDIM update from alpha_bar ab to ab_prev. ab_prev == 1
/// returns the clean-latent prediction itself.
inline Tensor ddim_step(const Tensor& x, const Tensor& eps, double ab, double ab_prev) {
  const Tensor x0 = scale(sub(x, scale(eps, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
  if (ab_prev == 1.0) return x0;
  return add(scale(x0, std::sqrt(ab_prev)), scale(eps, std::sqrt(1.0 - ab_prev)));
}

/// Few-step deterministic generation from x_T. The autodiff graph is kept
/// so losses on the result reach every trainable input.
inline Tensor lightning_generate(const DenoiserWeights& w, const FFRNetWeights* ffr, const Conditioning& c,
                                 const Tensor& x_T, int64_t steps, const NoiseSchedule& s) {
  const auto ts = sampling_timesteps(s.steps(), steps);
  const auto n = static_cast<size_t>(x_T.dim(0));
  Tensor x = x_T;
  for (size_t i = 0; i < ts.size(); ++i) {
    const Tensor eps = predict_noise(w, ffr, c, x, std::vector<int64_t>(n, ts[i]));
    const double ab = s.alpha_bar[static_cast<size_t>(ts[i])];
    const double ab_prev = i + 1 < ts.size() ? s.alpha_bar[static_cast<size_t>(ts[i + 1])] : 1.0;
    x = ddim_step(x, eps, ab, ab_prev);
  }
  return x;
}

/// Classifier-free guided sampling from a given x_T. The unconditional pass
/// swaps the text context for the null embedding and keeps everything else.
inline Tensor guided_sample(const DenoiserWeights& w, const FFRNetWeights* ffr, const Conditioning& c,
                            const Tensor& x_T, int64_t steps, double guidance, const NoiseSchedule& s) {
  if (!(guidance >= 0.0)) throw RangeError("guided_sample: guidance scale must be non-negative");
  const auto ts = sampling_timesteps(s.steps(), steps);
  const auto n = static_cast<size_t>(x_T.dim(0));
  Conditioning uncond = c;
  uncond.context = null_context_batch(w, x_T.dim(0));
  Tensor x = x_T;
  for (size_t i = 0; i < ts.size(); ++i) {
    const std::vector<int64_t> t(n, ts[i]);
    const Tensor eps = guided_eps(predict_noise(w, ffr, c, x, t), predict_noise(w, ffr, uncond, x, t), guidance);
    const double ab = s.alpha_bar[static_cast<size_t>(ts[i])];
    const double ab_prev = i + 1 < ts.size() ? s.alpha_bar[static_cast<size_t>(ts[i + 1])] : 1.0;
    x = ddim_step(x, eps, ab, ab_prev);
  }
  return x;
}

inline Tensor standard_normal(const Shape& shape, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (double& x : v) x = rng.normal();
  return Tensor::from_data(shape, std::move(v));
}

/// Draws x_T ~ N(0, I) from rng, then samples with guidance.
inline Tensor guided_sample(const DenoiserWeights& w, const FFRNetWeights* ffr, const Conditioning& c, int64_t steps,
                            double guidance, Rng& rng, const NoiseSchedule& s) {
  const auto& cfg = w.config;
  const Tensor x_T = standard_normal({c.context.dim(0), cfg.latent_channels, cfg.latent_size, cfg.latent_size}, rng);
  return guided_sample(w, ffr, c, x_T, steps, guidance, s);
}

}  // namespace idportrait
