#pragma once

// Toy conditional UNet: R resolution levels of (ResBlock + cross-attention),
// a bottleneck, and a mirrored decoder with skip connections. The encoder
// half is a standalone struct so the control branch can hold a value copy
// of it. External residuals are added to the R skip features and to the
// bottleneck before the decoder consumes them.

#include <cmath>
#include <string>
#include <vector>

#include "idportrait/nn.hpp"

namespace idportrait {

struct DenoiserConfig {
  int64_t latent_channels = 4;
  int64_t latent_size = 16;
  std::vector<int64_t> channels{16, 32, 32};  // one entry per resolution level
  int64_t time_dim = 32;                      // sinusoidal features
  int64_t context_dim = 64;                   // width of cross-attention context tokens
  int64_t context_tokens = 8;                 // text / null context length
  int64_t groups = 4;
  int64_t heads = 1;

  int64_t levels() const { return static_cast<int64_t>(channels.size()); }
  int64_t embed_dim() const { return 2 * time_dim; }
  int64_t control_size() const { return 4 * latent_size; }
};

/// Sinusoidal timestep features [N, dim]; constants, no gradient.
inline Tensor timestep_features(const std::vector<int64_t>& t, int64_t dim) {
  const int64_t half = dim / 2;
  std::vector<double> v(static_cast<size_t>(static_cast<int64_t>(t.size()) * dim), 0.0);
  for (size_t i = 0; i < t.size(); ++i)
    for (int64_t j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
      const double a = static_cast<double>(t[i]) * freq;
      v[i * static_cast<size_t>(dim) + static_cast<size_t>(j)] = std::sin(a);
      v[i * static_cast<size_t>(dim) + static_cast<size_t>(half + j)] = std::cos(a);
    }
  return Tensor::from_data({static_cast<int64_t>(t.size()), dim}, std::move(v));
}

struct TimeEmbedding {
  nn::Linear fc1, fc2;

  Tensor operator()(const std::vector<int64_t>& t) const {
    return fc2(silu(fc1(timestep_features(t, fc1.in_features()))));
  }

  template <class F>
  void visit(F& f, const std::string& p) {
    fc1.visit(f, p + ".fc1");
    fc2.visit(f, p + ".fc2");
  }
};

struct ResBlock {
  nn::GroupNorm norm1;
  nn::Conv2d conv1;
  nn::Linear time_proj;
  nn::GroupNorm norm2;
  nn::Conv2d conv2;
  nn::Conv2d skip;  // 1x1, only when channel counts differ

  static ResBlock make(const nn::ParamInit& init, const std::string& name, int64_t in, int64_t out, int64_t embed,
                       int64_t groups) {
    ResBlock b{nn::GroupNorm::make(init, groups, in),
               nn::Conv2d::make(init, name + ".conv1", in, out, 3),
               nn::Linear::make(init, name + ".time_proj", embed, out, true),
               nn::GroupNorm::make(init, groups, out),
               nn::Conv2d::make(init, name + ".conv2", out, out, 3),
               {}};
    if (in != out) b.skip = nn::Conv2d::make(init, name + ".skip", in, out, 1);
    return b;
  }

  Tensor operator()(const Tensor& x, const Tensor& temb) const {
    Tensor h = conv1(silu(norm1(x)));
    const Tensor tb = time_proj(silu(temb));
    h = add(h, reshape(tb, {tb.dim(0), tb.dim(1), 1, 1}));
    h = conv2(silu(norm2(h)));
    return add(skip.weight.defined() ? skip(x) : x, h);
  }

  template <class F>
  void visit(F& f, const std::string& p) {
    norm1.visit(f, p + ".norm1");
    conv1.visit(f, p + ".conv1");
    time_proj.visit(f, p + ".time_proj");
    norm2.visit(f, p + ".norm2");
    conv2.visit(f, p + ".conv2");
    skip.visit(f, p + ".skip");
  }
};

/// Pre-norm residual cross-attention from spatial positions into a context
/// sequence.
struct CrossAttnBlock {
  nn::LayerNorm norm;
  nn::Attention attn;

  static CrossAttnBlock make(const nn::ParamInit& init, const std::string& name, int64_t channels,
                             int64_t context_dim, int64_t heads) {
    return {nn::LayerNorm::make(init, channels), nn::Attention::make(init, name + ".attn", channels, context_dim, heads)};
  }

  Tensor operator()(const Tensor& x, const Tensor& context) const {
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (context.ndim() != 3 || context.dim(0) != n || context.dim(2) != attn.wk.in_features())
      throw ShapeError("cross-attention: context " + to_string(context.shape()) + " does not match batch " +
                       std::to_string(n) + " / width " + std::to_string(attn.wk.in_features()));
    const Tensor tokens = permute(reshape(x, {n, c, h * w}), {0, 2, 1});
    const Tensor out = add(tokens, attn(norm(tokens), context));
    return reshape(permute(out, {0, 2, 1}), {n, c, h, w});
  }

  template <class F>
  void visit(F& f, const std::string& p) {
    norm.visit(f, p + ".norm");
    attn.visit(f, p + ".attn");
  }
};

struct EncoderLevel {
  ResBlock res;
  CrossAttnBlock attn;
  nn::Conv2d down;  // stride 2; undefined on the last level

  template <class F>
  void visit(F& f, const std::string& p) {
    res.visit(f, p + ".res");
    attn.visit(f, p + ".attn");
    down.visit(f, p + ".down");
  }
};

struct MidBlock {
  ResBlock res1;
  CrossAttnBlock attn;
  ResBlock res2;

  template <class F>
  void visit(F& f, const std::string& p) {
    res1.visit(f, p + ".res1");
    attn.visit(f, p + ".attn");
    res2.visit(f, p + ".res2");
  }
};

/// Everything up to and including the bottleneck.
struct EncoderWeights {
  TimeEmbedding time;
  nn::Conv2d conv_in;
  std::vector<EncoderLevel> levels;
  MidBlock mid;

  template <class F>
  void visit(F& f, const std::string& p) {
    time.visit(f, p + ".time");
    conv_in.visit(f, p + ".conv_in");
    for (size_t i = 0; i < levels.size(); ++i) levels[i].visit(f, p + ".levels." + std::to_string(i));
    mid.visit(f, p + ".mid");
  }
};

struct DecoderLevel {
  ResBlock res;
  CrossAttnBlock attn;
  nn::Conv2d up;  // after nearest 2x upsampling; undefined on level 0

  template <class F>
  void visit(F& f, const std::string& p) {
    res.visit(f, p + ".res");
    attn.visit(f, p + ".attn");
    up.visit(f, p + ".up");
  }
};

struct DenoiserWeights {
  DenoiserConfig config;
  EncoderWeights encoder;
  std::vector<DecoderLevel> decoder;  // decoder[k] serves resolution level k
  nn::GroupNorm out_norm;
  nn::Conv2d conv_out;
  Tensor null_context;  // learned null-text embedding [context_tokens, context_dim]

  template <class F>
  void visit(F& f, const std::string& p) {
    encoder.visit(f, p + ".encoder");
    for (size_t i = 0; i < decoder.size(); ++i) decoder[i].visit(f, p + ".decoder." + std::to_string(i));
    out_norm.visit(f, p + ".out_norm");
    conv_out.visit(f, p + ".conv_out");
    nn::visit_tensor(f, p + ".null_context", null_context);
  }
};

inline void validate(const DenoiserConfig& c) {
  if (c.levels() < 1) throw ShapeError("denoiser: at least one resolution level required");
  if (c.latent_size % (int64_t{1} << (c.levels() - 1)) != 0)
    throw ShapeError("denoiser: latent size must be divisible by 2^(levels-1)");
  for (int64_t ch : c.channels)
    if (ch % c.groups != 0 || ch % c.heads != 0)
      throw ShapeError("denoiser: groups and heads must divide every channel count");
  if (c.time_dim % 2 != 0) throw ShapeError("denoiser: time_dim must be even");
}

inline EncoderWeights init_encoder(const DenoiserConfig& c, const nn::ParamInit& init, const std::string& p) {
  EncoderWeights e;
  e.time = {nn::Linear::make(init, p + ".time.fc1", c.time_dim, c.embed_dim(), true),
            nn::Linear::make(init, p + ".time.fc2", c.embed_dim(), c.embed_dim(), true)};
  e.conv_in = nn::Conv2d::make(init, p + ".conv_in", c.latent_channels, c.channels[0], 3);
  for (int64_t k = 0; k < c.levels(); ++k) {
    const std::string lp = p + ".levels." + std::to_string(k);
    const int64_t ch = c.channels[static_cast<size_t>(k)];
    EncoderLevel lv{ResBlock::make(init, lp + ".res", ch, ch, c.embed_dim(), c.groups),
                    CrossAttnBlock::make(init, lp + ".attn", ch, c.context_dim, c.heads),
                    {}};
    if (k + 1 < c.levels())
      lv.down = nn::Conv2d::make(init, lp + ".down", ch, c.channels[static_cast<size_t>(k + 1)], 3, 2);
    e.levels.push_back(std::move(lv));
  }
  const int64_t top = c.channels.back();
  e.mid = {ResBlock::make(init, p + ".mid.res1", top, top, c.embed_dim(), c.groups),
           CrossAttnBlock::make(init, p + ".mid.attn", top, c.context_dim, c.heads),
           ResBlock::make(init, p + ".mid.res2", top, top, c.embed_dim(), c.groups)};
  return e;
}

/// Seeded base denoiser. Its parameters do not require gradients: the base
/// model is a frozen prior.
inline DenoiserWeights init_denoiser(const DenoiserConfig& c, uint64_t seed) {
  validate(c);
  const nn::ParamInit init(derive_seed(seed, "denoiser"), false);
  DenoiserWeights w;
  w.config = c;
  w.encoder = init_encoder(c, init, "encoder");
  for (int64_t k = 0; k < c.levels(); ++k) {
    const std::string lp = "decoder." + std::to_string(k);
    const int64_t ch = c.channels[static_cast<size_t>(k)];
    const int64_t below = k + 1 < c.levels() ? c.channels[static_cast<size_t>(k + 1)] : c.channels.back();
    DecoderLevel lv{ResBlock::make(init, lp + ".res", below + ch, ch, c.embed_dim(), c.groups),
                    CrossAttnBlock::make(init, lp + ".attn", ch, c.context_dim, c.heads),
                    {}};
    if (k > 0) lv.up = nn::Conv2d::make(init, lp + ".up", ch, ch, 3);
    w.decoder.push_back(std::move(lv));
  }
  w.out_norm = nn::GroupNorm::make(init, c.groups, c.channels[0]);
  w.conv_out = nn::Conv2d::make(init, "conv_out", c.channels[0], c.latent_channels, 3);
  w.null_context = init.normal("null_context", {c.context_tokens, c.context_dim}, 1.0);
  return w;
}

/// Additive features for the R skip connections followed by the bottleneck.
struct ResidualSet {
  std::vector<Tensor> residuals;
};

/// Encoder outputs at each injection point: skips[0..R) then the bottleneck.
struct EncoderFeatures {
  std::vector<Tensor> skips;
  Tensor mid;
};

inline EncoderFeatures encoder_forward(const EncoderWeights& e, const Tensor& x, const Tensor& temb,
                                       const Tensor& context) {
  EncoderFeatures out;
  Tensor h = e.conv_in(x);
  for (const auto& lv : e.levels) {
    h = lv.attn(lv.res(h, temb), context);
    out.skips.push_back(h);
    if (lv.down.weight.defined()) h = lv.down(h);
  }
  out.mid = e.mid.res2(e.mid.attn(e.mid.res1(h, temb), context), temb);
  return out;
}

/// Shapes of the R + 1 injection points for a batch of n.
inline std::vector<Shape> injection_shapes(const DenoiserConfig& c, int64_t n) {
  std::vector<Shape> shapes;
  int64_t size = c.latent_size;
  for (int64_t k = 0; k < c.levels(); ++k) {
    shapes.push_back({n, c.channels[static_cast<size_t>(k)], size, size});
    if (k + 1 < c.levels()) size /= 2;
  }
  shapes.push_back({n, c.channels.back(), size, size});
  return shapes;
}

inline void check_latent(const DenoiserConfig& c, const Tensor& z, const char* op) {
  if (z.ndim() != 4 || z.dim(1) != c.latent_channels || z.dim(2) != c.latent_size || z.dim(3) != c.latent_size)
    throw ShapeError(std::string(op) + ": latent " + to_string(z.shape()) + " does not match [N, " +
                     std::to_string(c.latent_channels) + ", " + std::to_string(c.latent_size) + ", " +
                     std::to_string(c.latent_size) + "]");
}

/// Noise prediction eps_theta(z_t, t, context) with optional residuals.
inline Tensor denoise(const DenoiserWeights& w, const Tensor& z_t, const std::vector<int64_t>& t,
                      const Tensor& context, const ResidualSet* residuals = nullptr) {
  const auto& c = w.config;
  check_latent(c, z_t, "denoise");
  const int64_t n = z_t.dim(0);
  if (static_cast<int64_t>(t.size()) != n) throw ShapeError("denoise: one timestep per batch item required");
  const Tensor temb = w.encoder.time(t);
  EncoderFeatures f = encoder_forward(w.encoder, z_t, temb, context);
  if (residuals) {
    const auto shapes = injection_shapes(c, n);
    if (residuals->residuals.size() != shapes.size())
      throw ShapeError("denoise: expected " + std::to_string(shapes.size()) + " residuals, got " +
                       std::to_string(residuals->residuals.size()));
    for (size_t k = 0; k < shapes.size(); ++k)
      if (residuals->residuals[k].shape() != shapes[k])
        throw ShapeError("denoise: residual " + std::to_string(k) + " has shape " +
                         to_string(residuals->residuals[k].shape()) + ", expected " + to_string(shapes[k]));
    for (int64_t k = 0; k < c.levels(); ++k)
      f.skips[static_cast<size_t>(k)] = add(f.skips[static_cast<size_t>(k)], residuals->residuals[static_cast<size_t>(k)]);
    f.mid = add(f.mid, residuals->residuals.back());
  }
  Tensor h = f.mid;
  for (int64_t k = c.levels() - 1; k >= 0; --k) {
    const auto& lv = w.decoder[static_cast<size_t>(k)];
    h = lv.attn(lv.res(concat({h, f.skips[static_cast<size_t>(k)]}, 1), temb), context);
    if (k > 0) h = lv.up(upsample_nearest2x(h));
  }
  return w.conv_out(silu(w.out_norm(h)));
}

}  // namespace idportrait
