#pragma once

// Corpus loading, byte tokenization, tail-holdout split and the counter-based
// batch sampler.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include "ceglab/errors.hpp"

namespace ceglab {

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

class Corpus {
 public:
  Corpus(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {
    if (bytes_.empty()) throw data_error("corpus '" + path_ + "' is empty");
    hash_ = sha256_hex(bytes_);
  }

  static Corpus load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open corpus '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw io_error("failed reading corpus '" + path + "'");
    return Corpus(ss.str(), path);
  }

  const std::string& bytes() const { return bytes_; }
  const std::string& path() const { return path_; }
  const std::string& hash() const { return hash_; }
  std::size_t size() const { return bytes_.size(); }
  std::string provenance() const { return path_ + " sha256:" + hash_; }

 private:
  std::string bytes_;
  std::string path_;
  std::string hash_;
};

inline std::vector<std::int32_t> tokenize_bytes(std::string_view bytes) {
  std::vector<std::int32_t> ids(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) ids[i] = static_cast<unsigned char>(bytes[i]);
  return ids;
}

inline std::vector<std::int32_t> tokenize_bytes(const Corpus& corpus) {
  return tokenize_bytes(corpus.bytes());
}

inline std::string detokenize(std::span<const std::int32_t> ids) {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] > 255) throw index_error("byte id out of range: " + std::to_string(ids[i]));
    out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
  }
  return out;
}

struct SplitDataset {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> val;
  double val_fraction = 0.0;
};

/// The last val_fraction of the stream becomes validation.
inline SplitDataset split(std::span<const std::int32_t> tokens, double val_fraction,
                          std::size_t context_len) {
  if (val_fraction < 0.01 || val_fraction > 0.5)
    throw data_error("val_fraction must lie in [0.01, 0.5]");
  if (tokens.size() <= 10 * context_len)
    throw data_error("corpus of " + std::to_string(tokens.size()) +
                     " tokens is too small for context_len " + std::to_string(context_len));
  const std::size_t n_val = static_cast<std::size_t>(static_cast<double>(tokens.size()) * val_fraction);
  const std::size_t n_train = tokens.size() - n_val;
  if (n_val <= context_len || n_train <= context_len)
    throw data_error("split leaves a region shorter than one window");
  SplitDataset out;
  out.train.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(tokens.begin() + static_cast<std::ptrdiff_t>(n_train), tokens.end());
  out.val_fraction = val_fraction;
  return out;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::size_t> offsets;
  std::vector<std::int32_t> inputs;   // [batch, seq]
  std::vector<std::int32_t> targets;  // inputs shifted left by one in the source stream
};

/// Window offsets are a pure function of (seed, step, row).
class BatchSampler {
 public:
  BatchSampler(std::span<const std::int32_t> stream, std::uint64_t seed, std::size_t batch,
               std::size_t context_len)
      : stream_(stream), key_(splitmix64(seed)), batch_(batch), seq_(context_len) {
    if (batch_ == 0 || seq_ == 0) throw data_error("sampler needs batch and context_len >= 1");
    if (stream_.size() <= seq_) throw data_error("split region shorter than one window");
  }

  std::size_t offset(std::size_t step, std::size_t row) const {
    const std::uint64_t counter = static_cast<std::uint64_t>(step) * batch_ + row;
    const std::uint64_t x = splitmix64(key_ ^ splitmix64(counter));
    const std::uint64_t range = stream_.size() - seq_;  // last window still has a target
    return static_cast<std::size_t>((static_cast<unsigned __int128>(x) * range) >> 64);
  }

  Batch sample(std::size_t step) const {
    Batch b;
    b.batch = batch_;
    b.seq = seq_;
    b.offsets.resize(batch_);
    b.inputs.resize(batch_ * seq_);
    b.targets.resize(batch_ * seq_);
    for (std::size_t r = 0; r < batch_; ++r) {
      const std::size_t off = offset(step, r);
      b.offsets[r] = off;
      for (std::size_t t = 0; t < seq_; ++t) {
        b.inputs[r * seq_ + t] = stream_[off + t];
        b.targets[r * seq_ + t] = stream_[off + t + 1];
      }
    }
    return b;
  }

  std::size_t batch_size() const { return batch_; }
  std::size_t context_len() const { return seq_; }

 private:
  std::span<const std::int32_t> stream_;
  std::uint64_t key_;
  std::size_t batch_;
  std::size_t seq_;
};

}  // namespace ceglab
