#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include "hypervae/error.hpp"
#include "hypervae/hypernet.hpp"
#include "hypervae/layout.hpp"
#include "hypervae/vae.hpp"

// Checkpoint layout (all integers little-endian):
//   "HVAECKPT" | u32 version | u32 kind | u32 n_arch | u64 arch[n_arch]
//   | u32 n_entries | { u16 len, layer, u16 len, param, u64 rows, u64 cols, u64 offset }*
//   | u64 n_values | f32 values[n_values] | u32 crc32(everything before)

namespace hypervae {

inline constexpr char kCheckpointMagic[8] = {'H', 'V', 'A', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModelKind : std::uint32_t { vae = 1, hypervae = 2 };

using Model = std::variant<ThetaVector, HyperParams>;

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float f) { le(std::bit_cast<std::uint32_t>(f)); }
  void str(const std::string& s) {
    le(static_cast<std::uint16_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}
  void need(std::size_t n) const {
    if (pos_ + n > size_) throw FormatError("checkpoint: truncated");
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(T{data_[pos_ + i]} << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  std::string str() {
    const auto n = le<std::uint16_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  void expect(const void* p, std::size_t n) {
    need(n);
    if (std::memcmp(data_ + pos_, p, n) != 0) throw FormatError("checkpoint: bad magic");
    pos_ += n;
  }
  bool done() const { return pos_ == size_; }

 private:
  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

inline std::vector<std::uint64_t> arch_fields(const Model& model) {
  if (const auto* theta = std::get_if<ThetaVector>(&model)) {
    const VaeArch a = vae_arch_of(*theta);
    return {a.data_dim, a.hidden, a.latent};
  }
  const auto& a = std::get<HyperParams>(model).arch();
  return {a.target.data_dim, a.target.hidden, a.target.latent, a.enc_hidden, a.u_dim, a.dec_hidden};
}

}  // namespace detail

/// Serializes a model; parameters are stored as float32.
inline std::vector<unsigned char> encode_checkpoint(const Model& model) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.le(kCheckpointVersion);
  const bool is_vae = std::holds_alternative<ThetaVector>(model);
  w.le(static_cast<std::uint32_t>(is_vae ? ModelKind::vae : ModelKind::hypervae));
  const auto arch = detail::arch_fields(model);
  w.le(static_cast<std::uint32_t>(arch.size()));
  for (auto v : arch) w.le(v);
  const ThetaVector& params = is_vae ? std::get<ThetaVector>(model) : std::get<HyperParams>(model).gamma();
  const auto& entries = params.layout().entries();
  w.le(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.str(e.layer);
    w.str(e.param);
    w.le(static_cast<std::uint64_t>(e.rows));
    w.le(static_cast<std::uint64_t>(e.cols));
    w.le(static_cast<std::uint64_t>(e.offset));
  }
  w.le(static_cast<std::uint64_t>(params.size()));
  for (double v : params.values()) w.f32(static_cast<float>(v));
  const std::uint32_t crc = detail::crc32_of(w.bytes().data(), w.bytes().size());
  w.le(crc);
  return std::move(w.bytes());
}

inline Model decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4) throw FormatError("checkpoint: truncated");
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader tail(bytes.data() + body, 4);
  if (tail.le<std::uint32_t>() != detail::crc32_of(bytes.data(), body)) {
    throw FormatError("checkpoint: checksum mismatch (corrupt or truncated file)");
  }
  detail::ByteReader r(bytes.data(), body);
  r.expect(kCheckpointMagic, sizeof kCheckpointMagic);
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto kind = static_cast<ModelKind>(r.le<std::uint32_t>());
  const auto n_arch = r.le<std::uint32_t>();
  if (n_arch > 16) throw FormatError("checkpoint: bad architecture header");
  std::vector<std::uint64_t> arch(n_arch);
  for (auto& v : arch) v = r.le<std::uint64_t>();

  ThetaLayout stored;
  const auto n_entries = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    std::string layer = r.str();
    std::string param = r.str();
    const auto rows = r.le<std::uint64_t>();
    const auto cols = r.le<std::uint64_t>();
    const auto offset = r.le<std::uint64_t>();
    stored.add(std::move(layer), std::move(param), rows, cols);
    if (stored.entries().back().offset != offset) throw FormatError("checkpoint: non-contiguous layout table");
  }
  const auto n_values = r.le<std::uint64_t>();
  if (n_values != stored.total_len()) throw FormatError("checkpoint: payload size does not match layout");
  r.need(n_values * 4);
  std::vector<double> values(n_values);
  for (auto& v : values) v = r.f32();
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");

  if (kind == ModelKind::vae) {
    if (arch.size() != 3) throw FormatError("checkpoint: bad VAE architecture header");
    auto layout = make_vae_layout({arch[0], arch[1], arch[2]});
    if (!(*layout == stored)) throw FormatError("checkpoint: layout does not match architecture");
    return ThetaVector(std::move(layout), std::move(values));
  }
  if (kind == ModelKind::hypervae) {
    if (arch.size() != 6) throw FormatError("checkpoint: bad HyperVAE architecture header");
    HyperArch ha{{arch[0], arch[1], arch[2]}, arch[3], arch[4], arch[5]};
    HyperParams hp(ha);
    if (!(hp.gamma().layout() == stored)) throw FormatError("checkpoint: layout does not match architecture");
    std::copy(values.begin(), values.end(), hp.gamma().values().begin());
    return hp;
  }
  throw FormatError("checkpoint: unknown model kind");
}

inline void save_checkpoint(const Model& model, const std::string& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace hypervae
