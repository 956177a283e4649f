#pragma once

// Binary checkpoint, little-endian throughout:
//
//   "GCF1"            4 bytes magic
//   version           u32 (= 1)
//   config digest     u64
//   tensor count      u32
//   per tensor:
//     name length     u32, then name bytes (UTF-8, no terminator)
//     rank            u32, then rank x u32 dims
//     data            product(dims) x f32 (IEEE-754 bits)
//
// Values are always stored as 32-bit floats; 64-bit parameters are rounded
// on save.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "gcf/errors.hpp"
#include "gcf/model.hpp"

namespace gcf {

inline constexpr char kCheckpointMagic[4] = {'G', 'C', 'F', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

struct Checkpoint {
  std::uint64_t digest = 0;
  std::vector<CheckpointTensor> tensors;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, ckpt.digest);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_u32(out, d);
    for (float v : t.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::Reader in(bytes);
  if (in.str(4) != std::string(kCheckpointMagic, 4)) throw CheckpointError("not a GCF1 checkpoint (bad magic)");
  const auto version = in.u32();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.digest = in.u64();
  const auto count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = in.str(in.u32());
    const auto rank = in.u32();
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(in.u32());
      n *= t.dims.back();
    }
    if (n > bytes.size()) throw CheckpointError("checkpoint truncated");
    t.values.resize(n);
    for (auto& v : t.values) v = std::bit_cast<float>(in.u32());
    ckpt.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw CheckpointError("trailing bytes after checkpoint");
  return ckpt;
}

template <class T>
Checkpoint make_checkpoint(const ModelParams<T>& params, std::uint64_t digest) {
  Checkpoint ckpt;
  ckpt.digest = digest;
  for (const auto& e : params.entries()) {
    CheckpointTensor t;
    t.name = e.name;
    for (auto d : e.tensor.shape()) t.dims.push_back(static_cast<std::uint32_t>(d));
    t.values.assign(e.tensor.data().begin(), e.tensor.data().end());
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

// Copies checkpoint values into `params`, requiring the same digest, the same
// tensor names and identical shapes.
template <class T>
void apply_checkpoint(const Checkpoint& ckpt, ModelParams<T>& params, std::uint64_t expected_digest) {
  if (ckpt.digest != expected_digest) {
    throw CheckpointError("checkpoint config digest " + hex64(ckpt.digest) + " does not match current config " +
                          hex64(expected_digest));
  }
  if (ckpt.tensors.size() != params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
  }
  for (const auto& t : ckpt.tensors) {
    auto* target = params.find(t.name);
    if (!target) throw CheckpointError("checkpoint tensor '" + t.name + "' not in model");
    Shape shape(t.dims.begin(), t.dims.end());
    if (shape != target->shape()) {
      throw CheckpointError("checkpoint tensor '" + t.name + "' has shape " + shape_str(shape) + ", model expects " +
                            shape_str(target->shape()));
    }
    auto dst = target->mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(t.values[i]);
  }
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params, std::uint64_t digest) {
  write_bytes(path, encode_checkpoint(make_checkpoint(params, digest)));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_bytes(path)); }

}  // namespace gcf
