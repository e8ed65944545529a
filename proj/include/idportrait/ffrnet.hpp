#pragma once

// Control branch: a trainable copy of the denoiser encoder that sees the
// landmark control image and attends only to the fused identity features.
// Its R + 1 outputs pass through zero-initialized 1x1 connectors.

#include <string>
#include <vector>

#include "idportrait/unet.hpp"

namespace idportrait {

/// Three convolutions bringing the control image down 4x to the latent grid.
struct HintHead {
  nn::Conv2d conv1, conv2, conv3;

  Tensor operator()(const Tensor& x) const { return conv3(silu(conv2(silu(conv1(x))))); }

  template <class F>
  void visit(F& f, const std::string& p) {
    conv1.visit(f, p + ".conv1");
    conv2.visit(f, p + ".conv2");
    conv3.visit(f, p + ".conv3");
  }
};

struct FFRNetWeights {
  DenoiserConfig config;
  HintHead hint;
  EncoderWeights encoder;
  std::vector<nn::Conv2d> connectors;  // R + 1

  template <class F>
  void visit(F& f, const std::string& p) {
    hint.visit(f, p + ".hint");
    encoder.visit(f, p + ".encoder");
    for (size_t i = 0; i < connectors.size(); ++i) connectors[i].visit(f, p + ".connectors." + std::to_string(i));
  }
};

/// Value copy of the base encoder plus a fresh hint head and zero connectors.
/// Every returned tensor is trainable; the base is untouched.
inline FFRNetWeights init_from_base(const DenoiserWeights& base, uint64_t seed = 0) {
  const auto& c = base.config;
  const nn::ParamInit init(derive_seed(seed, "ffrnet"), true);
  FFRNetWeights w;
  w.config = c;
  w.hint = {nn::Conv2d::make(init, "hint.conv1", 3, 16, 3, 2), nn::Conv2d::make(init, "hint.conv2", 16, 32, 3, 2),
            nn::Conv2d::make(init, "hint.conv3", 32, c.latent_channels, 3)};
  w.encoder = nn::deep_copy(base.encoder);
  nn::set_trainable(w.encoder, true);
  for (const Shape& s : injection_shapes(c, 1)) w.connectors.push_back(nn::Conv2d::make_zero(init, s[1], s[1]));
  return w;
}

/// Residuals for the base denoiser. control: [N, 3, 4 H_l, 4 W_l];
/// f_mix: [N, T, context_dim].
inline ResidualSet ffrnet_forward(const FFRNetWeights& w, const Tensor& control, const Tensor& z_t,
                                  const std::vector<int64_t>& t, const Tensor& f_mix) {
  const auto& c = w.config;
  check_latent(c, z_t, "ffrnet_forward");
  const int64_t n = z_t.dim(0);
  if (control.ndim() != 4 || control.dim(0) != n || control.dim(1) != 3 || control.dim(2) != c.control_size() ||
      control.dim(3) != c.control_size())
    throw ShapeError("ffrnet_forward: control " + to_string(control.shape()) + " does not match latent grid " +
                     to_string(z_t.shape()) + " (expected [N, 3, " + std::to_string(c.control_size()) + ", " +
                     std::to_string(c.control_size()) + "])");
  if (f_mix.ndim() != 3 || f_mix.dim(0) != n || f_mix.dim(2) != c.context_dim)
    throw ShapeError("ffrnet_forward: f_mix " + to_string(f_mix.shape()) + " must be [N, T, " +
                     std::to_string(c.context_dim) + "]");
  if (static_cast<int64_t>(t.size()) != n) throw ShapeError("ffrnet_forward: one timestep per batch item required");
  const Tensor temb = w.encoder.time(t);
  const EncoderFeatures f = encoder_forward(w.encoder, add(z_t, w.hint(control)), temb, f_mix);
  ResidualSet out;
  for (size_t k = 0; k < f.skips.size(); ++k) out.residuals.push_back(w.connectors[k](f.skips[k]));
  out.residuals.push_back(w.connectors.back()(f.mid));
  return out;
}

}  // namespace idportrait
