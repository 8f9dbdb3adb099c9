#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "hypervae/error.hpp"

namespace hypervae {

struct GpHyper {
  double lengthscale = 1.0;
  double signal_var = 1.0;
  double noise_var = 1e-6;
};

struct GpPrediction {
  double mean = 0.0;
  double variance = 0.0;
};

/// Gaussian-process regression with a squared-exponential kernel and a
/// constant prior mean equal to the mean of the observations.
class GpSurrogate {
 public:
  explicit GpSurrogate(std::size_t dims, GpHyper hyper = {}) : dims_(dims), hyper_(hyper) {
    if (dims == 0) throw ShapeError("gp: dims must be >= 1");
  }

  std::size_t dims() const { return dims_; }
  std::size_t size() const { return ys_.size(); }
  const GpHyper& hyper() const { return hyper_; }
  double prior_mean() const { return prior_mean_; }
  double jitter() const { return jitter_; }
  const std::vector<std::vector<double>>& points() const { return zs_; }
  const std::vector<double>& values() const { return ys_; }

  void set_hyper(const GpHyper& h) {
    hyper_ = h;
    dirty_ = true;
  }

  void add(std::span<const double> z, double y) {
    if (z.size() != dims_) throw ShapeError("gp: observation dimension mismatch");
    zs_.emplace_back(z.begin(), z.end());
    ys_.push_back(y);
    dirty_ = true;
  }

  double kernel(std::span<const double> a, std::span<const double> b, const GpHyper& h) const {
    double d2 = 0.0;
    for (std::size_t i = 0; i < dims_; ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
    return h.signal_var * std::exp(-0.5 * d2 / (h.lengthscale * h.lengthscale));
  }

  /// Log marginal likelihood of the observations under `h`, or -inf when
  /// the kernel matrix cannot be factorized.
  double log_marginal_likelihood(const GpHyper& h) const {
    if (ys_.empty()) return 0.0;
    Eigen::LLT<Eigen::MatrixXd> llt;
    double jitter = 0.0;
    if (!factorize(h, llt, jitter)) return -std::numeric_limits<double>::infinity();
    const Eigen::VectorXd r = residuals();
    const Eigen::VectorXd alpha = llt.solve(r);
    double log_det = 0.0;
    const Eigen::MatrixXd& l = llt.matrixLLT();
    for (Eigen::Index i = 0; i < l.rows(); ++i) log_det += 2.0 * std::log(l(i, i));
    const double n = static_cast<double>(ys_.size());
    return -0.5 * r.dot(alpha) - 0.5 * log_det - 0.5 * n * std::log(2.0 * std::numbers::pi);
  }

  /// Grid search over lengthscale and signal variance; the noise stays fixed.
  void fit_hyperparameters(const std::vector<double>& lengthscales, const std::vector<double>& variance_scales) {
    if (ys_.size() < 2) return;
    double var_y = 0.0;
    const double mean = mean_y();
    for (double y : ys_) var_y += (y - mean) * (y - mean);
    var_y = std::max(var_y / static_cast<double>(ys_.size()), 1e-12);
    GpHyper best = hyper_;
    double best_lml = -std::numeric_limits<double>::infinity();
    for (double ls : lengthscales) {
      for (double vs : variance_scales) {
        GpHyper h{ls, vs * var_y, hyper_.noise_var};
        const double lml = log_marginal_likelihood(h);
        if (lml > best_lml) {
          best_lml = lml;
          best = h;
        }
      }
    }
    set_hyper(best);
  }

  GpPrediction predict(std::span<const double> z) const {
    if (z.size() != dims_) throw ShapeError("gp: query dimension mismatch");
    if (ys_.empty()) throw StateError("gp: no observations");
    refresh();
    const auto n = static_cast<Eigen::Index>(ys_.size());
    Eigen::VectorXd k(n);
    for (Eigen::Index i = 0; i < n; ++i) k(i) = kernel(zs_[i], z, hyper_);
    GpPrediction p;
    p.mean = prior_mean_ + k.dot(alpha_);
    llt_.matrixL().solveInPlace(k);
    p.variance = std::max(0.0, hyper_.signal_var - k.squaredNorm());
    return p;
  }

 private:
  double mean_y() const {
    double acc = 0.0;
    for (double y : ys_) acc += y;
    return acc / static_cast<double>(ys_.size());
  }

  Eigen::VectorXd residuals() const {
    const double m = mean_y();
    Eigen::VectorXd r(static_cast<Eigen::Index>(ys_.size()));
    for (std::size_t i = 0; i < ys_.size(); ++i) r(static_cast<Eigen::Index>(i)) = ys_[i] - m;
    return r;
  }

  /// Cholesky of K + jitter I, escalating the jitter tenfold up to six times.
  bool factorize(const GpHyper& h, Eigen::LLT<Eigen::MatrixXd>& llt, double& jitter) const {
    const auto n = static_cast<Eigen::Index>(ys_.size());
    Eigen::MatrixXd kmat(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) kmat(i, j) = kmat(j, i) = kernel(zs_[i], zs_[j], h);
    }
    jitter = h.noise_var;
    for (int attempt = 0; attempt < 7; ++attempt) {
      Eigen::MatrixXd a = kmat;
      a.diagonal().array() += jitter;
      llt.compute(a);
      if (llt.info() == Eigen::Success) return true;
      jitter = jitter > 0.0 ? 10.0 * jitter : 1e-10 * h.signal_var;
    }
    return false;
  }

  void refresh() const {
    if (!dirty_) return;
    if (!factorize(hyper_, llt_, jitter_)) throw NumericError("gp: Cholesky failed after jitter escalation");
    prior_mean_ = mean_y();
    alpha_ = llt_.solve(residuals());
    dirty_ = false;
  }

  std::size_t dims_;
  GpHyper hyper_;
  std::vector<std::vector<double>> zs_;
  std::vector<double> ys_;
  mutable bool dirty_ = true;
  mutable Eigen::LLT<Eigen::MatrixXd> llt_;
  mutable Eigen::VectorXd alpha_;
  mutable double prior_mean_ = 0.0;
  mutable double jitter_ = 0.0;
};

inline GpPrediction gp_posterior(const GpSurrogate& gp, std::span<const double> z) { return gp.predict(z); }

inline double standard_normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
inline double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// Closed-form expected improvement for maximization.
inline double expected_improvement(double mean, double variance, double best_so_far) {
  const double delta = mean - best_so_far;
  if (!(variance > 0.0)) return std::max(delta, 0.0);
  const double sigma = std::sqrt(variance);
  const double z = delta / sigma;
  return std::max(0.0, delta * standard_normal_cdf(z) + sigma * standard_normal_pdf(z));
}

}  // namespace hypervae
