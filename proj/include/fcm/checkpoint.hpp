#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   magic            8 bytes  "FCMCKPT\0"
//   version          u32      kCheckpointVersion
//   config           u32 field count, then u64 per field:
//                    n_layers n_heads d_model d_head vocab_size seq_len d_ff
//   train step       i64
//   optimizer kind   u32
//   optimizer step   i64
//   tensor count     u32
//   per tensor       u32 name length, name bytes, u8 dtype (0 = f32),
//                    u32 ndim, u64 dims[ndim], f32 payload
//   checksum         u64 FNV-1a over every preceding byte

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fcm/error.hpp"
#include "fcm/model.hpp"
#include "fcm/optimizer.hpp"

namespace fcm {

inline constexpr std::array<char, 8> kCheckpointMagic = {'F', 'C', 'M', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::int64_t step = 0;
  Params<float> params;
  OptState opt;
};

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      buf_.push_back(static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
    }
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  std::vector<unsigned char>& bytes() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const unsigned char> data, std::string path) : data_(data), path_(std::move(path)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CheckpointTruncatedError("checkpoint " + path_ + " is truncated");
  }

 private:
  std::span<const unsigned char> data_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline void put_tensor(ByteWriter& w, const std::string& name, const Shape& shape, std::span<const float> values) {
  w.put(static_cast<std::uint32_t>(name.size()));
  w.put_bytes(name);
  w.put(std::uint8_t{0});
  w.put(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.put(static_cast<std::uint64_t>(d));
  for (float v : values) w.put_f32(v);
}

struct RawTensor {
  Shape shape;
  std::vector<float> values;
};

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const Params<float>& params, const OptState& opt,
                                                       const ModelConfig& cfg, std::int64_t step) {
  detail::ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic.data(), kCheckpointMagic.size()));
  w.put(kCheckpointVersion);
  const std::array<std::size_t, 7> fields = {cfg.n_layers, cfg.n_heads,  cfg.d_model, cfg.d_head,
                                             cfg.vocab_size, cfg.seq_len, cfg.d_ff};
  w.put(static_cast<std::uint32_t>(fields.size()));
  for (auto f : fields) w.put(static_cast<std::uint64_t>(f));
  w.put(static_cast<std::int64_t>(step));
  w.put(static_cast<std::uint32_t>(opt.kind));
  w.put(static_cast<std::int64_t>(opt.step));

  const auto named = params.named();
  std::uint32_t count = static_cast<std::uint32_t>(named.size());
  for (const auto& ps : opt.slots) {
    count += 1 + (ps.row.empty() ? 0 : 1) + (ps.col.empty() ? 0 : 1) + (ps.full.empty() ? 0 : 1);
  }
  w.put(count);
  for (const auto& [name, t] : named) detail::put_tensor(w, name, t.shape(), t.data());
  for (std::size_t i = 0; i < opt.slots.size(); ++i) {
    const auto& ps = opt.slots[i];
    const auto prefix = "opt." + opt.names[i] + ".";
    detail::put_tensor(w, prefix + "momentum", ps.shape, ps.momentum);
    if (!ps.row.empty()) detail::put_tensor(w, prefix + "row", {ps.row.size()}, ps.row);
    if (!ps.col.empty()) detail::put_tensor(w, prefix + "col", {ps.col.size()}, ps.col);
    if (!ps.full.empty()) detail::put_tensor(w, prefix + "full", {ps.full.size()}, ps.full);
  }
  auto& bytes = w.bytes();
  const auto sum = fnv1a64(bytes);
  w.put(sum);
  return std::move(bytes);
}

inline void save_checkpoint(const Params<float>& params, const OptState& opt, const ModelConfig& cfg,
                            std::int64_t step, const std::string& path) {
  const auto bytes = serialize_checkpoint(params, opt, cfg, step);
  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

// With `expected` set, every tensor must also match that architecture.
inline Checkpoint parse_checkpoint(std::span<const unsigned char> bytes, const std::string& path,
                                   const ModelConfig* expected = nullptr) {
  detail::ByteReader r(bytes, path);
  const auto magic = r.get_string(kCheckpointMagic.size());
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw CheckpointError(path + " is not a checkpoint file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint " + path + " has format version " + std::to_string(version) +
                                 ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto nfields = r.get<std::uint32_t>();
  if (nfields != 7) throw CheckpointVersionError("checkpoint " + path + " has an unknown config block");
  Checkpoint ck;
  ck.config.n_layers = r.get<std::uint64_t>();
  ck.config.n_heads = r.get<std::uint64_t>();
  ck.config.d_model = r.get<std::uint64_t>();
  ck.config.d_head = r.get<std::uint64_t>();
  ck.config.vocab_size = r.get<std::uint64_t>();
  ck.config.seq_len = r.get<std::uint64_t>();
  ck.config.d_ff = r.get<std::uint64_t>();
  ck.step = r.get<std::int64_t>();
  const auto kind = r.get<std::uint32_t>();
  if (kind > 1) throw CheckpointError("checkpoint " + path + " has unknown optimizer kind");
  ck.opt.kind = static_cast<OptimizerKind>(kind);
  ck.opt.step = r.get<std::int64_t>();

  const auto count = r.get<std::uint32_t>();
  std::vector<std::pair<std::string, detail::RawTensor>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    auto name = r.get_string(name_len);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 0) throw CheckpointError("tensor " + name + " has unsupported dtype");
    const auto ndim = r.get<std::uint32_t>();
    detail::RawTensor t;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(r.get<std::uint64_t>());
      numel *= t.shape.back();
    }
    r.need(numel * 4);
    t.values.resize(numel);
    for (auto& v : t.values) v = r.get_f32();
    tensors.emplace_back(std::move(name), std::move(t));
  }
  const std::size_t body_end = r.pos();
  const auto stored = r.get<std::uint64_t>();
  if (r.remaining() != 0) throw CheckpointError("checkpoint " + path + " has trailing bytes");
  if (fnv1a64(bytes.first(body_end)) != stored) {
    throw CheckpointChecksumError("checkpoint " + path + " failed checksum verification");
  }

  auto check_against = [&](const ModelConfig& cfg, const char* what) {
    const auto shapes = param_shapes(cfg);
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      if (i >= tensors.size() || tensors[i].first != shapes[i].first) {
        throw CheckpointShapeError("checkpoint " + path + " is missing tensor " + shapes[i].first);
      }
      if (tensors[i].second.shape != shapes[i].second) {
        throw CheckpointShapeError("tensor " + shapes[i].first + " has shape " +
                                   shape_str(tensors[i].second.shape) + " but " + what + " expects " +
                                   shape_str(shapes[i].second));
      }
    }
  };
  check_against(ck.config, "the checkpoint header");
  if (expected) check_against(*expected, "the requested model config");

  const auto shapes = param_shapes(ck.config);
  std::map<std::string, Tensor<float>> loaded;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    loaded[tensors[i].first] = Tensor<float>::from(tensors[i].second.shape, tensors[i].second.values, true);
  }
  ck.params.token_embedding = loaded.at("token_embedding");
  for (std::size_t l = 0; l < ck.config.n_layers; ++l) {
    const auto p = "layers." + std::to_string(l) + ".";
    ck.params.layers.push_back({loaded.at(p + "norm_gain"), loaded.at(p + "wq"), loaded.at(p + "wk"),
                                loaded.at(p + "wv"), loaded.at(p + "wo"), loaded.at(p + "w_gate"),
                                loaded.at(p + "w_up"), loaded.at(p + "w_down")});
  }
  ck.params.final_norm_gain = loaded.at("final_norm_gain");

  std::size_t idx = shapes.size();
  for (const auto& [name, shape] : shapes) {
    const auto prefix = "opt." + name + ".";
    ParamState ps;
    ps.shape = shape;
    auto take = [&](const std::string& suffix, std::vector<float>& dst, std::size_t expect) {
      if (idx >= tensors.size() || tensors[idx].first != prefix + suffix) return false;
      if (tensors[idx].second.values.size() != expect) {
        throw CheckpointShapeError("optimizer tensor " + prefix + suffix + " has the wrong size");
      }
      dst = std::move(tensors[idx].second.values);
      ++idx;
      return true;
    };
    if (!take("momentum", ps.momentum, shape_numel(shape))) {
      throw CheckpointShapeError("checkpoint " + path + " is missing optimizer tensor " + prefix + "momentum");
    }
    if (ck.opt.kind == OptimizerKind::adafactor) {
      if (ps.factored()) {
        if (!take("row", ps.row, ps.slices() * ps.rows()) || !take("col", ps.col, ps.slices() * ps.cols())) {
          throw CheckpointShapeError("checkpoint " + path + " is missing factored state for " + name);
        }
      } else if (!take("full", ps.full, shape_numel(shape))) {
        throw CheckpointShapeError("checkpoint " + path + " is missing accumulator for " + name);
      }
    }
    ck.opt.names.push_back(name);
    ck.opt.slots.push_back(std::move(ps));
  }
  if (idx != tensors.size()) throw CheckpointShapeError("checkpoint " + path + " has unexpected extra tensors");
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path, expected);
}

}  // namespace fcm
