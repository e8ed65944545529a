#pragma once

// Latent tensors on disk: eight little-endian uint32 header words
// (magic, version, N, C, H, W, dtype code, reserved) followed by N*C*H*W
// little-endian float32 values.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "idportrait/errors.hpp"
#include "idportrait/tensor.hpp"

namespace idportrait::io {

inline constexpr uint32_t kLatentMagic = 0x544c5049;  // "IPLT"
inline constexpr uint32_t kLatentVersion = 1;
inline constexpr uint32_t kLatentF32 = 1;

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 | static_cast<uint32_t>(p[2]) << 16 |
         static_cast<uint32_t>(p[3]) << 24;
}

}  // namespace detail

inline std::string encode_latent(const Tensor& z) {
  if (z.ndim() != 4) throw ShapeError("latent file: expected [N, C, H, W], got " + to_string(z.shape()));
  std::string out;
  out.reserve(32 + 4 * static_cast<size_t>(z.numel()));
  for (uint32_t w : {kLatentMagic, kLatentVersion, static_cast<uint32_t>(z.dim(0)), static_cast<uint32_t>(z.dim(1)),
                     static_cast<uint32_t>(z.dim(2)), static_cast<uint32_t>(z.dim(3)), kLatentF32, 0u})
    detail::put_u32(out, w);
  for (double v : z.data()) detail::put_u32(out, std::bit_cast<uint32_t>(static_cast<float>(v)));
  return out;
}

inline Tensor decode_latent(const std::string& bytes, const std::string& origin = "<bytes>") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 32) throw IngestionError(origin + ": truncated latent header");
  std::array<uint32_t, 8> h{};
  for (size_t i = 0; i < 8; ++i) h[i] = detail::get_u32(p + 4 * i);
  if (h[0] != kLatentMagic) throw IngestionError(origin + ": not a latent file");
  if (h[1] != kLatentVersion) throw IngestionError(origin + ": unsupported latent version " + std::to_string(h[1]));
  if (h[6] != kLatentF32) throw IngestionError(origin + ": unsupported dtype code " + std::to_string(h[6]));
  const Shape shape{h[2], h[3], h[4], h[5]};
  const auto n = static_cast<size_t>(numel(shape));
  if (bytes.size() != 32 + 4 * n) throw IngestionError(origin + ": payload size does not match header");
  std::vector<double> v(n);
  for (size_t i = 0; i < n; ++i) {
    v[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(p + 32 + 4 * i)));
    if (!std::isfinite(v[i])) throw IngestionError(origin + ": non-finite latent value");
  }
  return Tensor::from_data(shape, std::move(v));
}

inline void save_latent(const std::filesystem::path& path, const Tensor& z) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write latent file " + path.string());
  const std::string bytes = encode_latent(z);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Tensor load_latent(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open latent file " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_latent(bytes, path.string());
}

}  // namespace idportrait::io
