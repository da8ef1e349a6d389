#pragma once

// Flat binary checkpoint of a model's named tensors. Layout is described in
// docs/checkpoint_format.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <zlib.h>

#include "ceglab/model.hpp"
#include "ceglab/run_log.hpp"

namespace ceglab {

inline constexpr char checkpoint_magic[8] = {'C', 'E', 'G', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t checkpoint_version = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class byte_writer {
 public:
  template <class V>
  void put(V v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(V));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class byte_reader {
 public:
  explicit byte_reader(std::string_view data) : data_(data) {}
  template <class V>
  V get() {
    V v;
    need(sizeof(V));
    std::memcpy(&v, data_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  const char* take(std::size_t n) {
    need(n);
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw io_error("checkpoint is truncated");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

}  // namespace detail

inline std::string checkpoint_bytes(const Model<float>& model) {
  detail::byte_writer w;
  w.put_bytes(checkpoint_magic, sizeof checkpoint_magic);
  w.put(checkpoint_version);
  w.put_string(canonical_text(model.config()));
  const auto& params = model.parameters();
  w.put(static_cast<std::uint32_t>(params.size()));
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    w.put_string(p.name);
    w.put(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.put(static_cast<std::uint64_t>(d));
    w.put(offset);
    w.put(static_cast<std::uint64_t>(p.tensor.numel()));
    offset += p.tensor.numel();
  }
  w.put(offset);
  for (const auto& p : params) w.put_bytes(p.tensor.data().data(), p.tensor.numel() * sizeof(float));
  const std::uint32_t crc = detail::crc_of(w.buffer());
  w.put(crc);
  return w.buffer();
}

inline void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  write_text_atomic(path, checkpoint_bytes(model));
}

inline Model<float> load_checkpoint_bytes(std::string_view bytes) {
  if (bytes.size() < sizeof checkpoint_magic + 8) throw io_error("checkpoint is truncated");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 4);
  if (detail::crc_of(body) != stored) throw io_error("checkpoint checksum mismatch");

  detail::byte_reader r(body);
  if (std::memcmp(r.take(sizeof checkpoint_magic), checkpoint_magic, sizeof checkpoint_magic) != 0)
    throw io_error("not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != checkpoint_version)
    throw io_error("unsupported checkpoint version " + std::to_string(version));
  ModelConfig config;
  try {
    config = model_config_from_json(json::parse(r.get_string()));
  } catch (const json::exception& e) {
    throw io_error(std::string("checkpoint config: ") + e.what());
  }
  Model<float> model(config);
  auto& params = model.parameters();
  const auto count = r.get<std::uint32_t>();
  if (count != params.size()) throw io_error("checkpoint tensor count does not match its config");
  struct entry {
    std::uint64_t offset, count;
  };
  std::vector<entry> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    shape_t shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.get<std::uint64_t>());
    const auto off = r.get<std::uint64_t>();
    const auto n = r.get<std::uint64_t>();
    if (name != params[i].name || shape != params[i].tensor.shape() || n != params[i].tensor.numel())
      throw io_error("checkpoint tensor '" + name + "' does not match the model layout");
    table.push_back({off, n});
  }
  const auto total = r.get<std::uint64_t>();
  const char* payload = r.take(total * sizeof(float));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (table[i].offset + table[i].count > total) throw io_error("checkpoint offset out of range");
    std::memcpy(params[i].tensor.data().data(), payload + table[i].offset * sizeof(float),
                table[i].count * sizeof(float));
  }
  if (r.position() != body.size()) throw io_error("checkpoint has trailing bytes");
  return model;
}

inline Model<float> load_checkpoint(const std::filesystem::path& path) {
  return load_checkpoint_bytes(read_text(path));
}

}  // namespace ceglab
