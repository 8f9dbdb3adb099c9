#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "hypervae/error.hpp"
#include "hypervae/tensor.hpp"

namespace hypervae {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;
inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2 pi)

inline double clamp_log_var(double lv) { return std::clamp(lv, kLogVarMin, kLogVarMax); }

/// Diagonal Gaussian with log-variance clamped to [-10, 10].
struct GaussianDiag {
  Tensor mean;
  Tensor log_var;

  GaussianDiag() = default;
  GaussianDiag(Tensor mu, Tensor lv) : mean(std::move(mu)), log_var(std::move(lv)) {
    if (mean.size() != log_var.size()) throw ShapeError("gaussian: mean/log_var length mismatch");
    require_finite(mean.span(), "gaussian mean");
    require_finite(log_var.span(), "gaussian log_var");
    for (double& v : log_var.span()) v = clamp_log_var(v);
  }

  static GaussianDiag standard(std::size_t dims) {
    return GaussianDiag(Tensor({dims}), Tensor({dims}));
  }

  std::size_t dims() const { return mean.size(); }
};

/// mean + exp(log_var / 2) * eps
inline Tensor reparameterize(const GaussianDiag& g, const Tensor& eps) {
  if (eps.size() != g.dims()) throw ShapeError("reparameterize: eps length mismatch");
  Tensor out({g.dims()});
  for (std::size_t i = 0; i < g.dims(); ++i) {
    out[i] = g.mean[i] + std::exp(0.5 * g.log_var[i]) * eps[i];
  }
  return out;
}

inline double kl_to_standard_normal(std::span<const double> mean, std::span<const double> log_var) {
  double kl = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    kl += mean[i] * mean[i] + std::exp(log_var[i]) - 1.0 - log_var[i];
  }
  return 0.5 * kl;
}

/// KL(g || N(0, I)) in nats.
inline double kl_to_standard_normal(const GaussianDiag& g) {
  return kl_to_standard_normal(g.mean.span(), g.log_var.span());
}

inline double standard_normal_log_density(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += -0.5 * v * v - kHalfLog2Pi;
  return acc;
}

inline double gaussian_log_density(std::span<const double> x, std::span<const double> mean,
                                   std::span<const double> log_var) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mean[i];
    acc += -0.5 * (d * d * std::exp(-log_var[i]) + log_var[i]) - kHalfLog2Pi;
  }
  return acc;
}

inline double gaussian_log_density(const GaussianDiag& g, std::span<const double> x) {
  if (x.size() != g.dims()) throw ShapeError("gaussian_log_density: dimension mismatch");
  return gaussian_log_density(x, g.mean.span(), g.log_var.span());
}

inline double log_sum_exp(std::span<const double> values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  const double top = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(top)) return top;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - top);
  return top + std::log(acc);
}

inline double log_mean_exp(std::span<const double> values) {
  return log_sum_exp(values) - std::log(static_cast<double>(values.size()));
}

/// exp(v - logsumexp(v)), summing to one.
inline std::vector<double> softmax_weights(std::span<const double> values) {
  const double lse = log_sum_exp(values);
  std::vector<double> w(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) w[i] = std::exp(values[i] - lse);
  return w;
}

}  // namespace hypervae
