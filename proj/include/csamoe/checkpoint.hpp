#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "csamoe/errors.hpp"
#include "csamoe/moe.hpp"
#include "csamoe/rng.hpp"
#include "csamoe/tensor.hpp"

// Binary layout, all integers little-endian:
//   "CSMN" | u32 version | u32 entry count
//   entry: u32 name length | name | u32 rank | u32 dims[rank] | f32 values
//   u64 FNV-1a of every preceding byte

namespace csamoe {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  Shape shape;
  std::vector<float> values;
};

/// Entries keyed (and therefore serialized) in lexicographic name order.
using Checkpoint = std::map<std::string, CheckpointEntry>;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t end) : b_(bytes), end_(end) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw FormatError("checkpoint truncated");
  }
  const std::string& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out = "CSMN";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.size()));
  for (const auto& [name, e] : ck) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::put_u32(out, bits);
    }
  }
  detail::put_u64(out, fnv1a64(out));
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 + 4 + 4 + 8) throw FormatError("checkpoint truncated");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
  if (bytes.compare(0, 4, "CSMN") != 0) throw FormatError("not a checkpoint (bad magic)");
  if (fnv1a64(std::string_view(bytes).substr(0, body)) != stored)
    throw FormatError("checkpoint checksum mismatch");
  detail::Reader r(bytes, body);
  r.str(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u32());
    CheckpointEntry e;
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("checkpoint entry " + name + " has bad rank");
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.shape.push_back(r.u32());
      n *= e.shape.back();
    }
    if (n == 0 || n * 4 > body - r.pos()) throw FormatError("checkpoint truncated in " + name);
    e.values.resize(n);
    for (auto& v : e.values) v = r.f32();
    if (!ck.emplace(name, std::move(e)).second) throw FormatError("duplicate checkpoint entry " + name);
  }
  if (r.pos() != body) throw FormatError("trailing bytes in checkpoint");
  return ck;
}

inline void write_checkpoint_file(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path.string());
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("failed writing " + path.string());
}

inline Checkpoint read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

/// Values are stored as 32-bit floats whatever T is.
template <class T>
Checkpoint to_checkpoint(CsaMoeModel<T>& model) {
  Checkpoint ck;
  for (const auto& [name, t] : model.state()) {
    CheckpointEntry e{t.shape(), {}};
    e.values.reserve(t.numel());
    for (T v : t.data()) e.values.push_back(static_cast<float>(v));
    ck.emplace(name, std::move(e));
  }
  return ck;
}

/// Copies checkpoint values into the model; names and shapes must match exactly.
template <class T>
void load_into(CsaMoeModel<T>& model, const Checkpoint& ck) {
  auto state = model.state();
  if (state.size() != ck.size())
    throw FormatError("checkpoint has " + std::to_string(ck.size()) + " entries, model expects " +
                      std::to_string(state.size()));
  for (auto& [name, t] : state) {
    auto it = ck.find(name);
    if (it == ck.end()) throw FormatError("checkpoint lacks " + name);
    if (it->second.shape != t.shape())
      throw FormatError("checkpoint entry " + name + " has shape " + shape_str(it->second.shape) +
                        ", model expects " + shape_str(t.shape()));
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.values[i]);
  }
}

/// Recovers variant, expert set and preset from entry names and the stem shape.
inline ModelConfig infer_model_config(const Checkpoint& ck) {
  auto has = [&](const std::string& n) { return ck.count(n) != 0; };
  const auto stem = ck.find("expert_img.stem.conv.weight");
  if (stem == ck.end()) throw FormatError("checkpoint lacks expert_img.stem.conv.weight");
  ModelConfig cfg;
  const auto& s = stem->second.shape;
  if (s == Shape{64, 3, 7, 7}) cfg.preset = Preset::full;
  else if (s == Shape{8, 3, 3, 3}) cfg.preset = Preset::tiny;
  else throw FormatError("unrecognized stem shape " + shape_str(s));
  if (has("expert_img.csa.query")) cfg.variant = Variant::csa_moe;
  else if (has("expert_tumor.stem.conv.weight") || has("expert_boundary.stem.conv.weight"))
    cfg.variant = Variant::resnet_moe;
  else cfg.variant = Variant::resnet18;
  if (cfg.variant != Variant::resnet18) {
    cfg.drop_tumor = !has("expert_tumor.stem.conv.weight");
    cfg.drop_boundary = !has("expert_boundary.stem.conv.weight");
  }
  return cfg;
}

}  // namespace csamoe
