#pragma once

// Facial attribute mixer: projects a face-ID embedding and a CLIP-style
// token grid to a shared width, fuses them with one cross-attention pass
// (ID tokens as queries, ID + CLIP tokens as keys/values) and distills a
// fixed number of fused tokens with a learnable-query transformer decoder.
// No positional encodings are used anywhere in the mixer.

#include <string>
#include <vector>

#include "idportrait/nn.hpp"

namespace idportrait {

/// Identity vectors, one row per batch item: [N, D_id].
struct FaceIdEmbedding {
  Tensor vec;
};

/// CLIP-style detail features: [N, 257, D_clip].
struct ClipFeatureGrid {
  Tensor tokens;
};

/// Token sequence [N, T, d].
struct TokenSequence {
  Tensor tokens;

  int64_t batch() const { return tokens.dim(0); }
  int64_t length() const { return tokens.dim(1); }
  int64_t width() const { return tokens.dim(2); }
};

/// The fused conditioning sequence, [N, 16, d] at default settings.
using FusedFeatures = TokenSequence;

struct MixerConfig {
  int64_t id_dim = 512;
  int64_t clip_dim = 64;
  int64_t width = 64;
  int64_t id_tokens = 20;
  int64_t clip_tokens = 257;
  int64_t query_tokens = 16;
  int64_t layers = 2;
  int64_t heads = 1;
  int64_t ffn_mult = 4;
};

/// One post-norm transformer decoder layer: self-attention over the
/// queries, cross-attention into the memory, then a GELU feed-forward.
struct DecoderLayer {
  nn::Attention self_attn;
  nn::LayerNorm norm1;
  nn::Attention cross_attn;
  nn::LayerNorm norm2;
  nn::Linear ff1, ff2;
  nn::LayerNorm norm3;

  Tensor operator()(const Tensor& x, const Tensor& memory) const {
    Tensor h = norm1(add(x, self_attn(x, x)));
    h = norm2(add(h, cross_attn(h, memory)));
    return norm3(add(h, ff2(gelu(ff1(h)))));
  }

  template <class F>
  void visit(F& f, const std::string& p) {
    self_attn.visit(f, p + ".self_attn");
    norm1.visit(f, p + ".norm1");
    cross_attn.visit(f, p + ".cross_attn");
    norm2.visit(f, p + ".norm2");
    ff1.visit(f, p + ".ff1");
    ff2.visit(f, p + ".ff2");
    norm3.visit(f, p + ".norm3");
  }
};

struct MixerWeights {
  MixerConfig config;
  nn::Linear proj_id;    // D_id -> id_tokens * d
  nn::Linear proj_clip;  // D_clip -> d, per token
  nn::Attention fuse;    // preliminary cross-attention
  std::vector<DecoderLayer> decoder;
  Tensor queries;  // learnable [query_tokens, d]

  template <class F>
  void visit(F& f, const std::string& p) {
    proj_id.visit(f, p + ".proj_id");
    proj_clip.visit(f, p + ".proj_clip");
    fuse.visit(f, p + ".fuse");
    for (size_t i = 0; i < decoder.size(); ++i) decoder[i].visit(f, p + ".decoder." + std::to_string(i));
    nn::visit_tensor(f, p + ".queries", queries);
  }
};

inline MixerWeights init_mixer(const MixerConfig& c, uint64_t seed) {
  if (c.heads < 1 || c.width % c.heads != 0) throw ShapeError("mixer: heads must divide width");
  const nn::ParamInit init(derive_seed(seed, "mixer"));
  MixerWeights w;
  w.config = c;
  w.proj_id = nn::Linear::make(init, "proj_id", c.id_dim, c.id_tokens * c.width, true);
  w.proj_clip = nn::Linear::make(init, "proj_clip", c.clip_dim, c.width, true);
  w.fuse = nn::Attention::make(init, "fuse", c.width, c.width, c.heads);
  for (int64_t i = 0; i < c.layers; ++i) {
    const std::string p = "decoder." + std::to_string(i);
    w.decoder.push_back({nn::Attention::make(init, p + ".self_attn", c.width, c.width, c.heads),
                         nn::LayerNorm::make(init, c.width),
                         nn::Attention::make(init, p + ".cross_attn", c.width, c.width, c.heads),
                         nn::LayerNorm::make(init, c.width),
                         nn::Linear::make(init, p + ".ff1", c.width, c.ffn_mult * c.width, true),
                         nn::Linear::make(init, p + ".ff2", c.ffn_mult * c.width, c.width, true),
                         nn::LayerNorm::make(init, c.width)});
  }
  w.queries = init.normal("queries", {c.query_tokens, c.width}, 0.02);
  return w;
}

/// Maps [N, D_id] identity vectors to [N, id_tokens, d] tokens.
inline TokenSequence project_id(const FaceIdEmbedding& f_id, const MixerWeights& w) {
  const auto& c = w.config;
  if (f_id.vec.ndim() != 2 || f_id.vec.dim(1) != c.id_dim)
    throw ShapeError("project_id: expected [N, " + std::to_string(c.id_dim) + "], got " +
                     to_string(f_id.vec.shape()));
  return {reshape(w.proj_id(f_id.vec), {f_id.vec.dim(0), c.id_tokens, c.width})};
}

/// Per-token projection of [N, clip_tokens, D_clip] to [N, clip_tokens, d].
inline TokenSequence project_clip(const ClipFeatureGrid& f_clip, const MixerWeights& w) {
  const auto& c = w.config;
  const Tensor& t = f_clip.tokens;
  if (t.ndim() != 3 || t.dim(1) != c.clip_tokens || t.dim(2) != c.clip_dim)
    throw ShapeError("project_clip: expected [N, " + std::to_string(c.clip_tokens) + ", " +
                     std::to_string(c.clip_dim) + "], got " + to_string(t.shape()));
  return {w.proj_clip(t)};
}

inline void require_width(const TokenSequence& s, int64_t d, const char* op) {
  if (s.tokens.ndim() != 3 || s.tokens.dim(2) != d)
    throw ShapeError(std::string(op) + ": expected token width " + std::to_string(d) + ", got shape " +
                     to_string(s.tokens.shape()));
}

/// Preliminary fusion: queries from the ID tokens, keys and values from
/// concat(ID tokens, CLIP tokens) along the token axis.
inline TokenSequence cross_attention_fuse(const TokenSequence& id_tokens, const TokenSequence& clip_tokens,
                                          const MixerWeights& w) {
  const int64_t d = w.config.width;
  require_width(id_tokens, d, "cross_attention_fuse");
  require_width(clip_tokens, d, "cross_attention_fuse");
  if (id_tokens.batch() != clip_tokens.batch()) throw ShapeError("cross_attention_fuse: batch sizes differ");
  const Tensor kv = concat({id_tokens.tokens, clip_tokens.tokens}, 1);
  return {w.fuse(id_tokens.tokens, kv)};
}

/// Learnable queries attend into the preliminary features through the
/// decoder stack.
inline FusedFeatures decode_fuse(const TokenSequence& f_pre, const MixerWeights& w) {
  const auto& c = w.config;
  require_width(f_pre, c.width, "decode_fuse");
  Tensor x = broadcast_to(w.queries, {f_pre.batch(), c.query_tokens, c.width});
  for (const auto& layer : w.decoder) x = layer(x, f_pre.tokens);
  return {x};
}

inline FusedFeatures mix_forward(const FaceIdEmbedding& f_id, const ClipFeatureGrid& f_clip, const MixerWeights& w) {
  return decode_fuse(cross_attention_fuse(project_id(f_id, w), project_clip(f_clip, w), w), w);
}

}  // namespace idportrait
