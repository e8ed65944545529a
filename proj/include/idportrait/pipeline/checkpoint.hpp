#pragma once

// Checkpoint container, all integers little-endian:
//   "IDPTCKPT" | u32 version | u64 config hash | u64 step | u64 adam t
//   | str rng state | str config text | u32 tensor count
//   | per tensor (sorted by name): str name | u8 dtype | u32 rank | u64 dims... | f64 values...
//   | u64 FNV-1a of every preceding byte
// where str is u32 length + bytes. The file is fully parsed and verified
// before any state is built from it.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>

#include "idportrait/pipeline/trainer.hpp"

namespace idportrait {

inline constexpr char kCheckpointMagic[8] = {'I', 'D', 'P', 'T', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr uint8_t kDtypeF64 = 1;

struct Checkpoint {
  uint32_t version = kCheckpointVersion;
  uint64_t config_hash = 0;
  int64_t step = 0;
  int64_t adam_t = 0;
  std::string rng_state;
  std::string config_text;
  std::map<std::string, Tensor> tensors;  // model tensors plus adam.m.* / adam.v.*
};

namespace detail {

class Writer {
 public:
  void bytes(const void* p, size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <class T>
  void le(T v) {
    for (size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void str(const std::string& s) {
    le(static_cast<uint32_t>(s.size()));
    out_ += s;
  }
  std::string& buffer() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& data, size_t end) : data_(data), end_(end) {}

  const char* take(size_t n) {
    if (n > end_ - pos_) throw CorruptCheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <class T>
  T le() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(sizeof(T)));
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return static_cast<T>(v);
  }
  std::string str() {
    const auto n = le<uint32_t>();
    return std::string(take(n), n);
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& data_;
  size_t end_;
  size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.le(c.version);
  w.le(c.config_hash);
  w.le(static_cast<uint64_t>(c.step));
  w.le(static_cast<uint64_t>(c.adam_t));
  w.str(c.rng_state);
  w.str(c.config_text);
  w.le(static_cast<uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.le(kDtypeF64);
    w.le(static_cast<uint32_t>(t.ndim()));
    for (int64_t d : t.shape()) w.le(static_cast<uint64_t>(d));
    for (double v : t.data()) w.le(std::bit_cast<uint64_t>(v));
  }
  w.le(fnv1a(w.buffer()));
  return std::move(w.buffer());
}

inline Checkpoint decode_checkpoint(const std::string& data) {
  if (data.size() < sizeof(kCheckpointMagic) + 4) throw CorruptCheckpointError("checkpoint truncated in header");
  if (std::memcmp(data.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw CorruptCheckpointError("not a checkpoint file");
  detail::Reader head(data, data.size());
  head.take(sizeof(kCheckpointMagic));
  const auto version = head.le<uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint format version " + std::to_string(version) + ", this build reads " +
                                 std::to_string(kCheckpointVersion));
  if (data.size() < sizeof(kCheckpointMagic) + 4 + 8) throw CorruptCheckpointError("checkpoint truncated");
  const size_t body = data.size() - 8;
  detail::Reader tail(data, data.size());
  tail.take(body);
  if (tail.le<uint64_t>() != fnv1a(std::string_view(data.data(), body)))
    throw CorruptCheckpointError("checkpoint checksum mismatch (truncated or damaged file)");

  detail::Reader r(data, body);
  r.take(sizeof(kCheckpointMagic) + 4);
  Checkpoint c;
  c.version = version;
  c.config_hash = r.le<uint64_t>();
  c.step = static_cast<int64_t>(r.le<uint64_t>());
  c.adam_t = static_cast<int64_t>(r.le<uint64_t>());
  c.rng_state = r.str();
  c.config_text = r.str();
  const auto count = r.le<uint32_t>();
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    if (r.le<uint8_t>() != kDtypeF64) throw CorruptCheckpointError("tensor " + name + ": unsupported dtype");
    const auto rank = r.le<uint32_t>();
    if (rank > 8) throw CorruptCheckpointError("tensor " + name + ": implausible rank");
    Shape shape;
    for (uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<int64_t>(r.le<uint64_t>()));
    std::vector<double> v(static_cast<size_t>(numel(shape)));
    for (double& x : v) x = std::bit_cast<double>(r.le<uint64_t>());
    c.tensors.emplace(std::move(name), Tensor::from_data(std::move(shape), std::move(v)));
  }
  if (!r.done()) throw CorruptCheckpointError("trailing bytes after tensor table");
  return c;
}

inline Checkpoint snapshot(TrainState& s) {
  Checkpoint c;
  c.config_text = format_config(s.model.config);
  c.config_hash = fnv1a(c.config_text);
  c.step = s.step;
  c.adam_t = s.adam.t;
  c.rng_state = s.rng.state();
  for (auto& [name, t] : s.model.named_tensors()) c.tensors.emplace(name, t.detach());
  for (const auto& [name, m] : s.adam.m) c.tensors.emplace("adam.m." + name, Tensor::from_data({static_cast<int64_t>(m.size())}, m));
  for (const auto& [name, v] : s.adam.v) c.tensors.emplace("adam.v." + name, Tensor::from_data({static_cast<int64_t>(v.size())}, v));
  return c;
}

/// Builds a training state from a verified checkpoint. Throws before
/// returning anything if a tensor is missing, extra or misshapen.
inline TrainState restore(const Checkpoint& c) {
  if (fnv1a(c.config_text) != c.config_hash) throw CorruptCheckpointError("checkpoint config hash mismatch");
  TrainState s = init_train_state(parse_config(c.config_text));
  size_t used = 0;
  for (auto& [name, t] : s.model.named_tensors()) {
    const auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw CorruptCheckpointError("checkpoint lacks tensor " + name);
    if (it->second.shape() != t.shape())
      throw CorruptCheckpointError("tensor " + name + " has shape " + to_string(it->second.shape()) + ", expected " +
                                   to_string(t.shape()));
    auto dst = t.mutable_data();
    std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
    ++used;
  }
  const auto trainable = s.model.trainable_parameters();
  for (const auto& [name, t] : trainable)
    for (const char* kind : {"adam.m.", "adam.v."}) {
      const auto it = c.tensors.find(kind + name);
      if (it == c.tensors.end()) {
        if (c.adam_t == 0) continue;
        throw CorruptCheckpointError(std::string("checkpoint lacks optimizer state ") + kind + name);
      }
      if (it->second.numel() != t.numel()) throw CorruptCheckpointError(std::string("optimizer state ") + kind + name + " misshapen");
      auto& dst = kind[5] == 'm' ? s.adam.m[name] : s.adam.v[name];
      dst.assign(it->second.data().begin(), it->second.data().end());
      ++used;
    }
  if (used != c.tensors.size()) throw CorruptCheckpointError("checkpoint holds tensors this model does not have");
  s.adam.t = c.adam_t;
  s.step = c.step;
  s.rng.set_state(c.rng_state);
  return s;
}

/// Writes to a temporary sibling then renames over the target.
inline void save_checkpoint(const std::filesystem::path& path, TrainState& s) {
  const std::string bytes = encode_checkpoint(snapshot(s));
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(data);
}

inline TrainState load_train_state(const std::filesystem::path& path) { return restore(load_checkpoint(path)); }

}  // namespace idportrait
