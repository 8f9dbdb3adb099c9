#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "hypervae/error.hpp"
#include "hypervae/rng.hpp"
#include "hypervae/tensor.hpp"

namespace hypervae {

/// One task: binary vectors of a shared length plus per-item class ids.
struct TaskDataset {
  std::vector<Tensor> items;
  std::vector<int> labels;
  int task_id = 0;
  std::size_t rows = 0;  // image geometry when the items are images
  std::size_t cols = 0;

  std::size_t size() const { return items.size(); }
  std::size_t data_dim() const { return items.empty() ? rows * cols : items.front().size(); }

  void push(Tensor x, int label) {
    if (!items.empty() && x.size() != items.front().size()) throw ShapeError("dataset: item length mismatch");
    items.push_back(std::move(x));
    labels.push_back(label);
  }

  /// Items carrying the given label.
  TaskDataset filter(int label) const {
    TaskDataset out;
    out.task_id = label;
    out.rows = rows;
    out.cols = cols;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (labels[i] == label) out.push(items[i], label);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// IDX container (big-endian): magic 0x00000803 for u8 images [count, rows,
// cols], 0x00000801 for u8 labels [count].

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t at, const std::string& path) {
  if (at + 4 > bytes.size()) throw FormatError(path + ": truncated header");
  return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
         (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
}

inline void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace detail

/// Reads an IDX image/label pair. Pixels are scaled to [0, 1] and set to 1
/// when >= 0.5. Nothing is returned unless both files are fully valid.
inline TaskDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (detail::read_be32(img, 0, images_path) != kIdxImagesMagic) throw FormatError(images_path + ": bad image magic");
  if (detail::read_be32(lab, 0, labels_path) != kIdxLabelsMagic) throw FormatError(labels_path + ": bad label magic");
  const std::uint64_t count = detail::read_be32(img, 4, images_path);
  const std::uint64_t rows = detail::read_be32(img, 8, images_path);
  const std::uint64_t cols = detail::read_be32(img, 12, images_path);
  const std::uint64_t label_count = detail::read_be32(lab, 4, labels_path);
  if (count != label_count) {
    throw FormatError("idx: " + std::to_string(count) + " images but " + std::to_string(label_count) + " labels");
  }
  if (rows == 0 || cols == 0 || rows > 65536 || cols > 65536) throw FormatError(images_path + ": bad image dimensions");
  const std::uint64_t pixels = rows * cols;
  if (count > (img.size() - 16) / pixels) throw FormatError(images_path + ": payload shorter than header claims");
  if (img.size() != 16 + count * pixels) throw FormatError(images_path + ": trailing bytes after payload");
  if (lab.size() != 8 + count) throw FormatError(labels_path + ": label payload size mismatch");

  TaskDataset ds;
  ds.rows = rows;
  ds.cols = cols;
  ds.items.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Tensor x({static_cast<std::size_t>(pixels)});
    const unsigned char* p = img.data() + 16 + i * pixels;
    for (std::uint64_t j = 0; j < pixels; ++j) x[j] = (static_cast<double>(p[j]) / 255.0) >= 0.5 ? 1.0 : 0.0;
    ds.items.push_back(std::move(x));
    ds.labels.push_back(lab[8 + i]);
  }
  return ds;
}

/// Writes binary items as 0/255 pixels.
inline void write_idx(const TaskDataset& ds, const std::string& images_path, const std::string& labels_path) {
  if (ds.rows * ds.cols != ds.data_dim()) throw ShapeError("write_idx: dataset has no image geometry");
  std::vector<unsigned char> img, lab;
  detail::put_be32(img, kIdxImagesMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.rows));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.cols));
  detail::put_be32(lab, kIdxLabelsMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.items[i].values()) img.push_back(v >= 0.5 ? 255 : 0);
    lab.push_back(static_cast<unsigned char>(ds.labels[i]));
  }
  detail::write_file(images_path, img);
  detail::write_file(labels_path, lab);
}

/// k x k max-pool of a binary side x side image.
inline Tensor downsample(const Tensor& image, std::size_t side, std::size_t factor) {
  if (factor == 0 || side % factor != 0) throw ShapeError("downsample: factor must divide the image side");
  if (image.size() != side * side) throw ShapeError("downsample: image is not side x side");
  const std::size_t out_side = side / factor;
  Tensor out({out_side * out_side});
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      if (image[r * side + c] >= 0.5) out[(r / factor) * out_side + c / factor] = 1.0;
    }
  }
  return out;
}

inline TaskDataset downsample(const TaskDataset& ds, std::size_t factor) {
  if (ds.rows != ds.cols) throw ShapeError("downsample: images must be square");
  TaskDataset out;
  out.task_id = ds.task_id;
  out.rows = out.cols = ds.rows / factor;
  for (std::size_t i = 0; i < ds.size(); ++i) out.push(downsample(ds.items[i], ds.rows, factor), ds.labels[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic task families.

enum class SyntheticFamily { bars, blobs, strokes };

struct SyntheticTaskSpec {
  SyntheticFamily family = SyntheticFamily::bars;
  std::size_t side = 14;
  std::size_t classes = 6;
  std::size_t samples_per_class = 200;
  double flip_prob = 0.02;

  void validate() const {
    if (side < 4) throw ConfigError("synthetic: side must be >= 4");
    if (!(flip_prob >= 0.0 && flip_prob < 0.5)) throw ConfigError("synthetic: flip_prob must lie in [0, 0.5)");
    if (classes == 0 || samples_per_class == 0) throw ConfigError("synthetic: classes and samples must be >= 1");
  }
  friend bool operator==(const SyntheticTaskSpec&, const SyntheticTaskSpec&) = default;
};

namespace detail {

/// Pixels of the j-th bar of orientation `orient` (0 horizontal, 1 vertical,
/// 2 diagonal, 3 anti-diagonal) at position `pos`.
inline std::vector<std::size_t> bar_pixels(std::size_t side, int orient, long pos) {
  std::vector<std::size_t> px;
  const long n = static_cast<long>(side);
  for (long i = 0; i < n; ++i) {
    long r = 0, c = 0;
    switch (orient) {
      case 0: r = pos; c = i; break;
      case 1: r = i; c = pos; break;
      case 2: r = i; c = i + pos - n / 2; break;
      default: r = i; c = n - 1 - i + pos - n / 2; break;
    }
    if (r >= 0 && r < n && c >= 0 && c < n) px.push_back(static_cast<std::size_t>(r * n + c));
  }
  return px;
}

/// Bars of class c: orientation c % 4, offset c / 4, one bar every 4 pixels.
inline std::vector<std::vector<std::size_t>> class_bars(std::size_t side, std::size_t c) {
  const int orient = static_cast<int>(c % 4);
  const long offset = static_cast<long>((c / 4) % 4);
  std::vector<std::vector<std::size_t>> bars;
  for (long pos = 1 + offset; pos < static_cast<long>(side) - 1; pos += 4) {
    auto px = bar_pixels(side, orient, pos);
    if (!px.empty()) bars.push_back(std::move(px));
  }
  return bars;
}

inline void draw_disk(Tensor& img, std::size_t side, double cr, double cc, double radius) {
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      const double dr = static_cast<double>(r) - cr, dc = static_cast<double>(c) - cc;
      if (dr * dr + dc * dc <= radius * radius) img[r * side + c] = 1.0;
    }
  }
}

inline void draw_line(Tensor& img, std::size_t side, double r0, double c0, double r1, double c1) {
  const int steps = static_cast<int>(4 * side);
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    const long r = std::lround(r0 + t * (r1 - r0));
    const long c = std::lround(c0 + t * (c1 - c0));
    if (r >= 0 && c >= 0 && r < static_cast<long>(side) && c < static_cast<long>(side)) {
      img[static_cast<std::size_t>(r) * side + static_cast<std::size_t>(c)] = 1.0;
    }
  }
}

}  // namespace detail

/// The deterministic support of class c in the bars family.
inline Tensor bars_template(std::size_t side, std::size_t c) {
  Tensor t({side * side});
  for (const auto& bar : detail::class_bars(side, c)) {
    for (std::size_t p : bar) t[p] = 1.0;
  }
  return t;
}

/// One TaskDataset per class, deterministic given the generator state.
///
/// bars: each item keeps every bar of its class template with probability
/// 1/2 (at least one). blobs: a disk of random radius near a class-specific
/// centre. strokes: a jittered two-segment polyline with class-specific
/// anchors. Every pixel is then flipped with probability flip_prob.
inline std::vector<TaskDataset> generate_synthetic_tasks(const SyntheticTaskSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t side = spec.side;
  const double s = static_cast<double>(side);
  std::vector<TaskDataset> tasks;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    TaskDataset task;
    task.task_id = static_cast<int>(c);
    task.rows = task.cols = side;
    // Class geometry for blobs and strokes, derived from the class index.
    Rng class_rng = Rng(0x5eed).fork(c);
    const double blob_r = s * (0.25 + 0.5 * class_rng.uniform());
    const double blob_c = s * (0.25 + 0.5 * class_rng.uniform());
    std::array<double, 6> anchors{};
    for (double& a : anchors) a = s * (0.1 + 0.8 * class_rng.uniform());
    const auto bars = detail::class_bars(side, c);

    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      Tensor img({side * side});
      switch (spec.family) {
        case SyntheticFamily::bars: {
          const std::size_t forced = rng.index(bars.size());
          for (std::size_t b = 0; b < bars.size(); ++b) {
            const bool keep = rng.uniform() < 0.5;
            if (keep || b == forced) {
              for (std::size_t p : bars[b]) img[p] = 1.0;
            }
          }
          break;
        }
        case SyntheticFamily::blobs: {
          const double radius = s * (0.12 + 0.1 * rng.uniform());
          const double jr = rng.uniform(-1.0, 1.0), jc = rng.uniform(-1.0, 1.0);
          detail::draw_disk(img, side, blob_r + jr, blob_c + jc, radius);
          break;
        }
        case SyntheticFamily::strokes: {
          std::array<double, 6> p{};
          for (std::size_t k = 0; k < p.size(); ++k) p[k] = anchors[k] + rng.uniform(-1.0, 1.0);
          detail::draw_line(img, side, p[0], p[1], p[2], p[3]);
          detail::draw_line(img, side, p[2], p[3], p[4], p[5]);
          break;
        }
      }
      if (spec.flip_prob > 0.0) {
        for (double& v : img.span()) {
          if (rng.uniform() < spec.flip_prob) v = 1.0 - v;
        }
      }
      task.push(std::move(img), static_cast<int>(c));
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

/// Concatenates tasks into one labeled pool.
inline TaskDataset merge_tasks(const std::vector<TaskDataset>& tasks) {
  TaskDataset out;
  for (const auto& t : tasks) {
    out.rows = t.rows;
    out.cols = t.cols;
    for (std::size_t i = 0; i < t.size(); ++i) out.push(t.items[i], t.labels[i]);
  }
  return out;
}

inline std::size_t hamming_distance(const Tensor& a, const Tensor& b) {
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] >= 0.5) != (b[i] >= 0.5);
  return d;
}

}  // namespace hypervae
