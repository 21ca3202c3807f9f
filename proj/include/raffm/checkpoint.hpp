#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "raffm/error.hpp"
#include "raffm/nn.hpp"
#include "raffm/tensor.hpp"

namespace raffm {

// Binary tensor container, little-endian throughout:
//   "RFFM" | u32 version | u64 tensor count |
//   per tensor: u32 name length | UTF-8 name | u32 rank | u64 dims[rank] | f64 payload
// Tensors are written in name order with rank 2. Rank 1 is read as a single row.
inline constexpr char kCheckpointMagic[4] = {'R', 'F', 'F', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::vector<unsigned char> take() { return std::move(out_); }

 private:
  std::vector<unsigned char> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> in) : in_(in) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(concat("truncated container while reading ", what), pos_);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const unsigned char> in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const TensorMap& tensors) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u64(tensors.size());
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(2);
    w.u64(t.rows());
    w.u64(t.cols());
    for (double v : t.values()) w.f64(v);
  }
  return w.take();
}

inline TensorMap decode_checkpoint(std::span<const unsigned char> bytes) {
  detail::ByteReader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("bad magic, expected \"RFFM\"", 0);
  }
  r.str(4, "magic");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError(detail::concat("unsupported format version ", version), version_at);
  }
  const std::uint64_t count = r.u64("tensor count");
  TensorMap out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t entry_at = r.offset();
    const std::uint32_t name_len = r.u32("name length");
    std::string name = r.str(name_len, "tensor name");
    if (name.empty()) throw FormatError("empty tensor name", entry_at);
    const std::size_t rank_at = r.offset();
    const std::uint32_t rank = r.u32("rank");
    if (rank != 1 && rank != 2) {
      throw FormatError(detail::concat("tensor '", name, "' has unsupported rank ", rank), rank_at);
    }
    std::uint64_t rows = 1;
    std::uint64_t cols = r.u64("dimension");
    if (rank == 2) {
      rows = cols;
      cols = r.u64("dimension");
    }
    const std::size_t payload_at = r.offset();
    if (cols != 0 && rows > (r.remaining() / 8) / cols) {
      throw FormatError(detail::concat("tensor '", name, "' payload exceeds the container"),
                        payload_at);
    }
    std::vector<double> data(rows * cols);
    for (auto& v : data) {
      const std::size_t at = r.offset();
      v = std::bit_cast<double>(r.u64("payload"));
      if (!std::isfinite(v)) {
        throw FormatError(detail::concat("tensor '", name, "' holds a non-finite value"), at);
      }
    }
    if (out.contains(name)) {
      throw FormatError(detail::concat("duplicate tensor name '", name, "'"), entry_at);
    }
    out.emplace(std::move(name), Tensor2(rows, cols, std::move(data)));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last tensor", r.offset());
  return out;
}

inline void write_checkpoint(const std::filesystem::path& path, const TensorMap& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

inline TensorMap read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("failed reading " + path.string());
  return decode_checkpoint(bytes);
}

// Model weights travel with a "meta.config" row holding the ModelConfig fields.
inline constexpr const char* kConfigTensor = "meta.config";

inline TensorMap weights_to_tensors(const ModelWeights& w) {
  TensorMap m;
  const auto& c = w.config;
  m.emplace(kConfigTensor,
            Tensor2(1, 9,
                    std::vector<double>{double(c.n_layers), double(c.d_model), double(c.n_heads),
                                        double(c.d_k), double(c.d_v), double(c.d_ff),
                                        double(c.vocab_size), double(c.n_classes),
                                        double(c.max_seq)}));
  visit_tensors(w, [&](const std::string& name, const Tensor2& t) { m.emplace(name, t); });
  return m;
}

inline ModelWeights weights_from_tensors(const TensorMap& m) {
  const auto meta = m.find(kConfigTensor);
  if (meta == m.end() || meta->second.rows() != 1 || meta->second.cols() != 9) {
    throw ValidationError("checkpoint lacks a 1x9 meta.config tensor");
  }
  std::size_t f[9];
  for (std::size_t i = 0; i < 9; ++i) {
    const double v = meta->second(0, i);
    if (v < 1.0 || v != std::floor(v) || v > 1e9) {
      throw ValidationError(detail::concat("meta.config entry ", i, " is not a positive count"));
    }
    f[i] = static_cast<std::size_t>(v);
  }
  ModelConfig c{f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]};
  ModelWeights w = zero_weights(c);
  std::size_t used = 1;
  visit_tensors(w, [&](const std::string& name, Tensor2& t) {
    const auto it = m.find(name);
    if (it == m.end()) throw ValidationError("checkpoint is missing tensor '" + name + "'");
    t = it->second;
    ++used;
  });
  if (used != m.size()) throw ValidationError("checkpoint holds tensors that are not model weights");
  validate_weights(w);
  return w;
}

}  // namespace raffm
