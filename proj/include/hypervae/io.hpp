#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypervae/error.hpp"
#include "hypervae/tensor.hpp"

namespace hypervae {

inline std::string sha256_hex(const void* data, std::size_t n) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, n, digest, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256: digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Binary PGM (P5) of square images laid out `per_row` to a row with a
/// one-pixel gray gutter. Pixel values in [0, 1] map to 0..255.
inline std::string pgm_grid(const std::vector<Tensor>& images, std::size_t side, std::size_t per_row) {
  if (images.empty() || side == 0 || per_row == 0) throw ShapeError("pgm_grid: nothing to draw");
  for (const auto& im : images) {
    if (im.size() != side * side) throw ShapeError("pgm_grid: image size does not match side");
  }
  const std::size_t cols = std::min(per_row, images.size());
  const std::size_t rows = (images.size() + cols - 1) / cols;
  const std::size_t w = cols * (side + 1) + 1, h = rows * (side + 1) + 1;
  std::string pixels(w * h, static_cast<char>(128));
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t r0 = 1 + (i / cols) * (side + 1), c0 = 1 + (i % cols) * (side + 1);
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        const double v = std::clamp(images[i][r * side + c], 0.0, 1.0);
        pixels[(r0 + r) * w + c0 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
    }
  }
  return "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n" + pixels;
}

/// Collects every file a command emits, hashing as it writes, and records
/// them in manifest.json.
class ArtifactWriter {
 public:
  explicit ArtifactWriter(std::string dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

  const std::string& dir() const { return dir_; }
  std::string path(const std::string& name) const { return (std::filesystem::path(dir_) / name).string(); }

  void write(const std::string& name, const std::string& content) {
    std::ofstream out(path(name), std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path(name));
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("failed writing " + path(name));
    record(name, content);
  }

  void write_csv(const std::string& name, const std::string& header, const std::vector<std::string>& rows) {
    std::string s = header + "\n";
    for (const auto& r : rows) s += r + "\n";
    write(name, s);
  }

  /// Registers a file written by other code (e.g. a checkpoint).
  void adopt(const std::string& name) { record(name, read_text_file(path(name))); }

  const nlohmann::ordered_json& artifacts() const { return artifacts_; }

 private:
  void record(const std::string& name, const std::string& content) {
    artifacts_.push_back({{"path", name}, {"sha256", sha256_hex(content)}, {"bytes", content.size()}});
  }

  std::string dir_;
  nlohmann::ordered_json artifacts_ = nlohmann::ordered_json::array();
};

}  // namespace hypervae
