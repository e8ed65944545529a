#pragma once

// Mixer forward pass rebuilt from the scalar reference ops.

#include <algorithm>

#include "idportrait/attribute_mixer.hpp"
#include "naive_oracles.hpp"

namespace idportrait::oracle {

inline Mat tokens_of(const Tensor& t, int64_t batch_index) {
  const int64_t T = t.dim(1), d = t.dim(2);
  Mat m(static_cast<size_t>(T), Vec(static_cast<size_t>(d)));
  for (int64_t i = 0; i < T; ++i)
    for (int64_t c = 0; c < d; ++c) m[static_cast<size_t>(i)][static_cast<size_t>(c)] = t[(batch_index * T + i) * d + c];
  return m;
}

inline Mat oracle_fuse(const Mat& id, const Mat& clip, const MixerWeights& w) {
  Mat kv = id;
  kv.insert(kv.end(), clip.begin(), clip.end());
  return attention(id, kv, to_mat(w.fuse.wq.weight), to_mat(w.fuse.wk.weight), to_mat(w.fuse.wv.weight),
                   to_mat(w.fuse.wo.weight));
}

inline Mat oracle_decoder(const Mat& memory, const MixerWeights& w) {
  Mat x = to_mat(w.queries);
  auto vec = [](const Tensor& t) { return Vec(t.data().begin(), t.data().end()); };
  for (const auto& L : w.decoder) {
    auto attn = [](const nn::Attention& a, const Mat& q, const Mat& kv) {
      return attention(q, kv, to_mat(a.wq.weight), to_mat(a.wk.weight), to_mat(a.wv.weight), to_mat(a.wo.weight));
    };
    const Mat sa = attn(L.self_attn, x, x);
    for (size_t i = 0; i < x.size(); ++i) x[i] = layer_norm(plus(x[i], sa[i]), vec(L.norm1.gamma), vec(L.norm1.beta));
    const Mat ca = attn(L.cross_attn, x, memory);
    for (size_t i = 0; i < x.size(); ++i) x[i] = layer_norm(plus(x[i], ca[i]), vec(L.norm2.gamma), vec(L.norm2.beta));
    for (auto& row : x) {
      Vec h = plus(matvec(to_mat(L.ff1.weight), row), vec(L.ff1.bias));
      for (double& v : h) v = gelu(v);
      const Vec f = plus(matvec(to_mat(L.ff2.weight), h), vec(L.ff2.bias));
      row = layer_norm(plus(row, f), vec(L.norm3.gamma), vec(L.norm3.beta));
    }
  }
  return x;
}

inline double max_diff(const Mat& a, const Mat& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  return m;
}

}  // namespace idportrait::oracle
