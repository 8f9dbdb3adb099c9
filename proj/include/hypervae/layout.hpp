#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hypervae/error.hpp"
#include "hypervae/tensor.hpp"

namespace hypervae {

/// One named parameter inside a flat vector. Biases are rows x 1.
struct SliceEntry {
  std::string layer;
  std::string param;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return rows * cols; }
  std::string key() const { return layer + "." + param; }
  friend bool operator==(const SliceEntry&, const SliceEntry&) = default;
};

/// Ordered, contiguous map from parameter names to slices of a flat vector.
class ThetaLayout {
 public:
  ThetaLayout() = default;

  /// Appends a slice directly after the previous one and returns its index.
  std::size_t add(std::string layer, std::string param, std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) throw ShapeError("layout: empty slice " + layer + "." + param);
    for (const auto& e : entries_) {
      if (e.layer == layer && e.param == param) throw ShapeError("layout: duplicate " + layer + "." + param);
    }
    entries_.push_back({std::move(layer), std::move(param), rows, cols, total_});
    total_ += rows * cols;
    return entries_.size() - 1;
  }

  const std::vector<SliceEntry>& entries() const { return entries_; }
  std::size_t total_len() const { return total_; }

  std::size_t index_of(const std::string& layer, const std::string& param) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].layer == layer && entries_[i].param == param) return i;
    }
    throw ShapeError("layout: no slice " + layer + "." + param);
  }

  const SliceEntry& at(const std::string& layer, const std::string& param) const {
    return entries_[index_of(layer, param)];
  }

  /// True when the slices tile [0, total_len) in order without gaps.
  bool is_contiguous() const {
    std::size_t next = 0;
    for (const auto& e : entries_) {
      if (e.offset != next) return false;
      next += e.size();
    }
    return next == total_;
  }

  friend bool operator==(const ThetaLayout&, const ThetaLayout&) = default;

 private:
  std::vector<SliceEntry> entries_;
  std::size_t total_ = 0;
};

/// A flat parameter vector interpreted through a shared layout.
class ThetaVector {
 public:
  ThetaVector() = default;

  explicit ThetaVector(std::shared_ptr<const ThetaLayout> layout)
      : layout_(std::move(layout)), values_(layout_->total_len(), 0.0) {}

  ThetaVector(std::shared_ptr<const ThetaLayout> layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_->total_len()) {
      throw ShapeError("theta: " + std::to_string(values_.size()) + " values for layout of " +
                       std::to_string(layout_->total_len()));
    }
  }

  const ThetaLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ThetaLayout>& layout_ptr() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  std::vector<double>& storage() { return values_; }

  std::span<const double> slice(std::size_t entry) const {
    const auto& e = layout_->entries()[entry];
    return std::span<const double>(values_).subspan(e.offset, e.size());
  }
  std::span<double> slice(std::size_t entry) {
    const auto& e = layout_->entries()[entry];
    return std::span<double>(values_).subspan(e.offset, e.size());
  }
  std::span<const double> slice(const std::string& layer, const std::string& param) const {
    return slice(layout_->index_of(layer, param));
  }
  std::span<double> slice(const std::string& layer, const std::string& param) {
    return slice(layout_->index_of(layer, param));
  }

  Tensor tensor(const std::string& layer, const std::string& param) const {
    const auto& e = layout_->at(layer, param);
    auto s = slice(layer, param);
    std::vector<double> v(s.begin(), s.end());
    if (e.cols == 1) return Tensor({e.rows}, std::move(v));
    return Tensor({e.rows, e.cols}, std::move(v));
  }

  bool all_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const ThetaVector& a, const ThetaVector& b) {
    return *a.layout_ == *b.layout_ && a.values_ == b.values_;
  }

 private:
  std::shared_ptr<const ThetaLayout> layout_;
  std::vector<double> values_;
};

}  // namespace hypervae
