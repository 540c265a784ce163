#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "smsr/model.hpp"
#include "smsr/tensor.hpp"

namespace smsr {

static_assert(std::endian::native == std::endian::little, "the container format is little-endian");

/// Model container layout (all integers little-endian):
///
///   "SMSR"  u16 version=1  u8 scale  u8 K  u8 L  u16 C
///   u32 count, then per tensor:
///     u16 name length, name bytes, u8 rank, rank x u32 dims, prod(dims) x f32
///
/// A checkpoint appends "OPTM", u32 next epoch, and a second tensor table holding the Adam
/// moments and step counters.
inline constexpr std::uint16_t kFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, Malformed };
  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  [[nodiscard]] Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

using TensorTable = std::vector<std::pair<std::string, Tensor<float>>>;

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<char> bytes;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& bytes) : bytes_(bytes) {}
  template <class U>
  U get() {
    U v;
    raw(&v, sizeof(U));
    return v;
  }
  void raw(void* out, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError(FormatError::Kind::Truncated, "model file is truncated");
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  [[nodiscard]] bool at_end() const { return pos_ == bytes_.size(); }
  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

inline void write_table(ByteWriter& w, const TensorTable& table) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, t] : table) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    w.put<std::uint8_t>(4);
    for (int d = 0; d < 4; ++d) w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape().dim(d)));
    w.raw(t.data(), t.size() * sizeof(float));
  }
}

inline TensorTable read_table(ByteReader& r) {
  TensorTable table;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    std::string name(len, '\0');
    r.raw(name.data(), len);
    const auto rank = r.get<std::uint8_t>();
    if (rank > 4) throw FormatError(FormatError::Kind::Malformed, "tensor '" + name + "' has rank > 4");
    int dims[4] = {1, 1, 1, 1};
    std::size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint32_t>();
      if (dim > 0x7fffffffu) throw FormatError(FormatError::Kind::Malformed, "tensor '" + name + "' is too large");
      dims[4 - rank + d] = static_cast<int>(dim);
      numel = (numel > 0 && dim > (std::size_t{1} << 40) / numel) ? (std::size_t{1} << 40) : numel * dim;
    }
    if (numel > r.remaining() / sizeof(float)) {
      throw FormatError(FormatError::Kind::Truncated, "tensor '" + name + "' extends past the end of the file");
    }
    std::vector<float> data(numel);
    r.raw(data.data(), numel * sizeof(float));
    table.emplace_back(std::move(name), Tensor<float>(Shape{dims[0], dims[1], dims[2], dims[3]}, std::move(data)));
  }
  return table;
}

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// written beside the target and renamed, so a failed write never leaves a half file
inline void write_file(const std::string& path, const std::vector<char>& bytes) {
  const std::string part = path + ".part";
  {
    std::ofstream out(part, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) {
      std::filesystem::remove(part);
      throw std::runtime_error("short write to " + path);
    }
  }
  std::filesystem::rename(part, path);
}

inline TensorTable model_table(const SmsrModel& model) {
  TensorTable table;
  for (const auto& [name, p] : model.named_parameters()) table.emplace_back(name, p->value);
  if (model.heuristic_alpha) {
    table.emplace_back("meta.heuristic_alpha", Tensor<float>(1, 1, 1, 1, static_cast<float>(*model.heuristic_alpha)));
  }
  return table;
}

inline void write_header(ByteWriter& w, const ModelConfig& cfg) {
  w.raw("SMSR", 4);
  w.put<std::uint16_t>(kFormatVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(cfg.scale));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(cfg.num_modules));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(cfg.num_layers));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(cfg.channels));
}

inline ModelConfig read_header(ByteReader& r) {
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "SMSR", 4) != 0) throw FormatError(FormatError::Kind::BadMagic, "not an SMSR model file");
  const auto version = r.get<std::uint16_t>();
  if (version != kFormatVersion) {
    throw FormatError(FormatError::Kind::VersionMismatch, "unsupported model version " + std::to_string(version));
  }
  ModelConfig cfg;
  cfg.scale = r.get<std::uint8_t>();
  cfg.num_modules = r.get<std::uint8_t>();
  cfg.num_layers = r.get<std::uint8_t>();
  cfg.channels = r.get<std::uint16_t>();
  return cfg;
}

inline SmsrModel model_from_table(const ModelConfig& cfg, const TensorTable& table) {
  try {
    SmsrModel::validate(cfg);
  } catch (const std::invalid_argument& e) {
    throw FormatError(FormatError::Kind::Malformed, std::string("header: ") + e.what());
  }
  SmsrModel m = SmsrModel::zeros(cfg);
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : table) by_name[name] = &t;
  for (auto& [name, p] : m.named_parameters()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(FormatError::Kind::Malformed, "missing tensor '" + name + "'");
    if (it->second->shape() != p->value.shape()) {
      throw FormatError(FormatError::Kind::Malformed, "tensor '" + name + "' has shape " +
                                                          to_string(it->second->shape()) + ", expected " +
                                                          to_string(p->value.shape()));
    }
    *p = Parameter<float>(*it->second);
  }
  if (auto it = by_name.find("meta.heuristic_alpha"); it != by_name.end()) m.heuristic_alpha = (*it->second)[0];
  return m;
}

}  // namespace detail

inline std::vector<char> serialize_model(const SmsrModel& model) {
  detail::ByteWriter w;
  detail::write_header(w, model.config);
  detail::write_table(w, detail::model_table(model));
  return std::move(w.bytes);
}

inline SmsrModel deserialize_model(const std::vector<char>& bytes) {
  detail::ByteReader r(bytes);
  const ModelConfig cfg = detail::read_header(r);
  return detail::model_from_table(cfg, detail::read_table(r));
}

inline void save_model(const SmsrModel& model, const std::string& path) {
  detail::write_file(path, serialize_model(model));
}

inline SmsrModel load_model(const std::string& path) { return deserialize_model(detail::read_file(path)); }

/// Reads only the header fields.
inline ModelConfig peek_model_config(const std::string& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes);
  return detail::read_header(r);
}

/// Model plus optimizer state for resuming training.
struct Checkpoint {
  SmsrModel model;
  int next_epoch = 0;
};

inline void save_checkpoint(const SmsrModel& model, int next_epoch, const std::string& path) {
  detail::ByteWriter w;
  detail::write_header(w, model.config);
  detail::write_table(w, detail::model_table(model));
  w.raw("OPTM", 4);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(next_epoch));
  TensorTable opt;
  for (const auto& [name, p] : model.named_parameters()) {
    opt.emplace_back(name + ".adam_m", p->adam_m);
    opt.emplace_back(name + ".adam_v", p->adam_v);
    opt.emplace_back(name + ".step", Tensor<float>(1, 1, 1, 1, static_cast<float>(p->step_count)));
  }
  detail::write_table(w, opt);
  detail::write_file(path, w.bytes);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes);
  const ModelConfig cfg = detail::read_header(r);
  Checkpoint ck{detail::model_from_table(cfg, detail::read_table(r)), 0};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "OPTM", 4) != 0) {
    throw FormatError(FormatError::Kind::BadMagic, "checkpoint lacks an optimizer section");
  }
  ck.next_epoch = static_cast<int>(r.get<std::uint32_t>());
  std::map<std::string, Tensor<float>> opt;
  for (auto& [name, t] : detail::read_table(r)) opt.emplace(name, std::move(t));
  for (auto& [name, p] : ck.model.named_parameters()) {
    auto m = opt.find(name + ".adam_m");
    auto v = opt.find(name + ".adam_v");
    auto s = opt.find(name + ".step");
    if (m == opt.end() || v == opt.end() || s == opt.end()) {
      throw FormatError(FormatError::Kind::Malformed, "missing optimizer state for '" + name + "'");
    }
    if (m->second.shape() != p->value.shape() || v->second.shape() != p->value.shape()) {
      throw FormatError(FormatError::Kind::Malformed, "optimizer state shape mismatch for '" + name + "'");
    }
    p->adam_m = m->second;
    p->adam_v = v->second;
    p->step_count = static_cast<long>(s->second[0]);
  }
  return ck;
}

}  // namespace smsr
