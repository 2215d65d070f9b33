#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "noseprint/errors.hpp"
#include "noseprint/image.hpp"
#include "noseprint/model.hpp"
#include "noseprint/tensor.hpp"

namespace noseprint {

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
  bool operator==(const NamedTensor&) const = default;
};

/// Named tensor table. Binary layout (little-endian):
///   "PRCK" | u32 version=1 | u32 count |
///   count x { u16 name_len | name | u32 rank | u32 dims[rank] | f32 values }
struct Checkpoint {
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  bool operator==(const Checkpoint&) const = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kPoolModeTensor = "meta.pool_mode";

namespace detail {

inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v));
  out.push_back(static_cast<unsigned char>(v >> 8));
}
inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void put_f32(std::vector<unsigned char>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n) throw FormatError(what_ + ": truncated while reading " + field, pos_);
  }
  std::uint16_t u16(const char* field) {
    need(2, field);
    const std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* field) { return std::bit_cast<float>(u32(field)); }
  std::string str(std::size_t n, const char* field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<unsigned char>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<unsigned char> out = {'P', 'R', 'C', 'K'};
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 0xFFFF) throw ArgumentError("checkpoint: tensor name too long: " + t.name.substr(0, 64));
    std::size_t count = 1;
    for (auto d : t.dims) count *= d;
    if (count != t.values.size()) throw ShapeError("checkpoint: tensor '" + t.name + "' value count does not match its dims");
    detail::put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_u32(out, d);
    for (float v : t.values) detail::put_f32(out, v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  detail::ByteReader in(bytes, "checkpoint");
  if (in.str(4, "magic") != "PRCK") throw FormatError("checkpoint: bad magic (expected PRCK)", 0);
  const std::size_t version_at = in.pos();
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version), version_at);
  const std::uint32_t count = in.u32("tensor count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint16_t len = in.u16("name length");
    t.name = in.str(len, "tensor name");
    const std::size_t rank_at = in.pos();
    const std::uint32_t rank = in.u32("rank");
    if (rank > 8) throw FormatError("checkpoint: implausible rank " + std::to_string(rank) + " for '" + t.name + "'", rank_at);
    std::uint64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(in.u32("dims"));
      n *= t.dims.back();
    }
    in.need(n * 4, "tensor values");
    t.values.resize(n);
    for (auto& v : t.values) v = in.f32("tensor values");
    ckpt.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw FormatError("checkpoint: trailing bytes after last tensor", in.pos());
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.message(), e.offset());
  }
}

/// Every parameter and running statistic, plus the pool mode code.
template <typename T>
Checkpoint checkpoint_of(const Network<T>& net) {
  Checkpoint ckpt;
  for (const auto& p : net.params().all()) {
    NamedTensor t{p.name, {}, {}};
    for (auto d : p.value.shape) t.dims.push_back(static_cast<std::uint32_t>(d));
    t.values.assign(p.value.data.begin(), p.value.data.end());
    ckpt.tensors.push_back(std::move(t));
  }
  ckpt.tensors.push_back({kPoolModeTensor, {1}, {static_cast<float>(static_cast<int>(net.config().pool))}});
  return ckpt;
}

/// Copies tensors into `net`; every network tensor must be present with the
/// same shape, and the checkpoint may not carry unknown tensors.
template <typename T>
void load_into(Network<T>& net, const Checkpoint& ckpt) {
  auto& store = net.params();
  for (auto& p : store.all()) {
    const NamedTensor* t = ckpt.find(p.name);
    if (!t) throw FormatError("checkpoint is missing tensor '" + p.name + "' required by the configured network");
    Shape s(t->dims.begin(), t->dims.end());
    if (s != p.value.shape) {
      throw ShapeError("checkpoint tensor '" + p.name + "' has shape " + shape_string(s) + ", network expects " +
                       shape_string(p.value.shape));
    }
    p.value.data.assign(t->values.begin(), t->values.end());
  }
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind("meta.", 0) == 0) continue;
    if (!store.find(t.name)) throw FormatError("checkpoint tensor '" + t.name + "' does not exist in the configured network");
  }
  if (const NamedTensor* m = ckpt.find(kPoolModeTensor); m && !m->values.empty()) {
    if (static_cast<int>(m->values[0]) != static_cast<int>(net.config().pool)) {
      throw FormatError("checkpoint pool mode differs from the configured network");
    }
  }
}

/// Reconstructs the architecture from tensor names and shapes.
inline ModelConfig infer_model_config(const Checkpoint& ckpt) {
  ModelConfig cfg;
  const NamedTensor* stem = ckpt.find("backbone.stem.conv.weight");
  if (!stem || stem->dims.size() != 4) throw FormatError("checkpoint is missing tensor 'backbone.stem.conv.weight'");
  cfg.backbone.in_channels = static_cast<int>(stem->dims[1]);
  cfg.backbone.stem_channels = static_cast<int>(stem->dims[0]);
  cfg.backbone.stage_channels.clear();
  for (int i = 1;; ++i) {
    const NamedTensor* t = ckpt.find("backbone.stage" + std::to_string(i) + ".conv.weight");
    if (!t) break;
    cfg.backbone.stage_channels.push_back(static_cast<int>(t->dims.at(0)));
  }
  if (cfg.backbone.stage_channels.empty()) throw FormatError("checkpoint is missing tensor 'backbone.stage1.conv.weight'");
  if (const NamedTensor* m = ckpt.find(kPoolModeTensor); m && !m->values.empty()) {
    const int code = static_cast<int>(m->values[0]);
    if (code < 0 || code > 3) throw FormatError("checkpoint: invalid pool mode code " + std::to_string(code));
    cfg.pool = static_cast<PoolMode>(code);
  } else if (ckpt.find("gem.p")) {
    cfg.pool = PoolMode::gem;
  } else if (ckpt.find("attn.weight")) {
    cfg.pool = PoolMode::attention;
  } else {
    cfg.pool = PoolMode::avg;
  }
  if (const NamedTensor* p = ckpt.find("gem.p"); p && !p->values.empty()) cfg.gem_p = p->values[0];
  if (const NamedTensor* r = ckpt.find("head.reduce.weight")) {
    cfg.head.kind = HeadKind::reduction;
    cfg.head.embed_dim = static_cast<int>(r->dims.at(0));
  } else if (ckpt.find("head.bn.weight")) {
    cfg.head.kind = HeadKind::bn;
  } else {
    cfg.head.kind = HeadKind::linear;
  }
  const NamedTensor* cls = ckpt.find("head.classifier.weight");
  if (!cls || cls->dims.size() != 2) throw FormatError("checkpoint is missing tensor 'head.classifier.weight'");
  cfg.head.num_classes = static_cast<int>(cls->dims[0]);
  return cfg;
}

template <typename T = float>
Network<T> network_from_checkpoint(const Checkpoint& ckpt) {
  Network<T> net(infer_model_config(ckpt), 0);
  load_into(net, ckpt);
  return net;
}

}  // namespace noseprint
