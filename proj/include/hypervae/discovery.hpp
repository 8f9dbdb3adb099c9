#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hypervae/error.hpp"
#include "hypervae/gp.hpp"
#include "hypervae/hypernet.hpp"
#include "hypervae/mdl.hpp"
#include "hypervae/rng.hpp"
#include "hypervae/vae.hpp"

namespace hypervae {

/// 1 - cos(a, b). A zero vector has no direction; the distance is then 1.
inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_distance: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    std::clog << "cosine_distance: zero vector, returning 1\n";
    return 1.0;
  }
  const double cos = dot / (std::sqrt(na) * std::sqrt(nb));
  return 1.0 - std::clamp(cos, -1.0, 1.0);
}

inline double cosine_distance(const Tensor& a, const Tensor& b) { return cosine_distance(a.span(), b.span()); }

struct BoConfig {
  double lower = -5.0;
  double upper = 5.0;
  std::size_t max_iters = 300;  // objective evaluations, initial design included
  std::size_t init_points = 10;
  std::size_t refit_every = 25;
  std::size_t candidates = 256;
  std::size_t refine_starts = 8;
  double noise_var = 1e-6;

  friend bool operator==(const BoConfig&, const BoConfig&) = default;
};

struct BoStep {
  std::vector<double> z;
  double value = 0.0;
  double best_so_far = 0.0;
};

struct BoResult {
  std::vector<double> best_z;
  double best_value = -std::numeric_limits<double>::infinity();
  std::vector<BoStep> trace;
  std::size_t discarded = 0;
};

namespace detail {

inline std::vector<std::vector<double>> latin_hypercube(std::size_t n, std::size_t dims, double lo, double hi,
                                                        Rng& rng) {
  std::vector<std::vector<double>> pts(n, std::vector<double>(dims));
  for (std::size_t d = 0; d < dims; ++d) {
    std::vector<std::size_t> perm = rng.sample_without_replacement(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      const double cell = (static_cast<double>(perm[i]) + rng.uniform()) / static_cast<double>(n);
      pts[i][d] = lo + (hi - lo) * cell;
    }
  }
  return pts;
}

/// Coordinate ascent on `f` inside the box, halving the step on failure.
inline std::vector<double> coordinate_refine(const std::function<double(std::span<const double>)>& f,
                                             std::vector<double> z, double value, double lo, double hi,
                                             std::size_t budget = 64) {
  double step = 0.1 * (hi - lo);
  std::size_t evals = 0;
  while (step > 1e-3 * (hi - lo) && evals < budget) {
    bool improved = false;
    for (std::size_t d = 0; d < z.size() && evals < budget; ++d) {
      for (double dir : {1.0, -1.0}) {
        std::vector<double> trial(z);
        trial[d] = std::clamp(trial[d] + dir * step, lo, hi);
        const double v = f(trial);
        ++evals;
        if (v > value) {
          value = v;
          z = std::move(trial);
          improved = true;
          break;
        }
      }
    }
    if (!improved) step *= 0.5;
  }
  return z;
}

}  // namespace detail

/// Maximizes `objective` over the box [lower, upper]^dims with a GP
/// surrogate and expected improvement.
///
/// A 10-point Latin hypercube seeds the surrogate. Each further point is the
/// EI argmax found by scoring `candidates` uniform draws (plus the incumbent)
/// and coordinate-refining the top `refine_starts`. Kernel hyperparameters
/// are re-fit by grid search every `refit_every` evaluations.
inline BoResult bo_maximize(const std::function<double(std::span<const double>)>& objective, std::size_t dims,
                            const BoConfig& config, Rng& rng) {
  if (dims == 0) throw ShapeError("bo_maximize: dims must be >= 1");
  if (!(config.lower < config.upper)) throw ConfigError("bo_maximize: empty search box");
  const double lo = config.lower, hi = config.upper;
  const std::vector<double> lengthscales{0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.5, 7.0, 10.0};
  const std::vector<double> variance_scales{0.3, 1.0, 3.0};

  GpSurrogate gp(dims, GpHyper{0.2 * (hi - lo), 1.0, config.noise_var});
  BoResult result;
  auto evaluate = [&](const std::vector<double>& z) {
    const double y = objective(z);
    if (!std::isfinite(y)) {
      std::clog << "bo_maximize: discarding non-finite objective value\n";
      ++result.discarded;
      return;
    }
    gp.add(z, y);
    if (y > result.best_value) {
      result.best_value = y;
      result.best_z = z;
    }
    result.trace.push_back({z, y, result.best_value});
  };

  const std::size_t init = std::min(config.init_points, config.max_iters);
  for (auto& z : detail::latin_hypercube(init, dims, lo, hi, rng)) evaluate(z);
  std::size_t since_fit = config.refit_every;

  for (std::size_t iter = init; iter < config.max_iters; ++iter) {
    if (gp.size() == 0) {
      std::vector<double> z(dims);
      for (double& v : z) v = rng.uniform(lo, hi);
      evaluate(z);
      continue;
    }
    if (since_fit >= config.refit_every) {
      gp.fit_hyperparameters(lengthscales, variance_scales);
      since_fit = 0;
    }
    ++since_fit;
    const double best = result.best_value;
    auto acquisition = [&](std::span<const double> z) {
      const auto p = gp.predict(z);
      return expected_improvement(p.mean, p.variance, best);
    };
    std::vector<std::pair<double, std::vector<double>>> scored;
    scored.reserve(config.candidates + 1);
    scored.emplace_back(acquisition(result.best_z), result.best_z);
    for (std::size_t c = 0; c < config.candidates; ++c) {
      std::vector<double> z(dims);
      for (double& v : z) v = rng.uniform(lo, hi);
      const double a = acquisition(z);
      scored.emplace_back(a, std::move(z));
    }
    const std::size_t starts = std::min(config.refine_starts, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<long>(starts), scored.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<double> next = scored.front().second;
    double next_value = scored.front().first;
    for (std::size_t s = 0; s < starts; ++s) {
      auto refined = detail::coordinate_refine(acquisition, scored[s].second, scored[s].first, lo, hi);
      const double v = acquisition(refined);
      if (v > next_value) {
        next_value = v;
        next = std::move(refined);
      }
    }
    for (double& v : next) v = std::clamp(v, lo, hi);
    evaluate(next);
  }
  return result;
}

struct DiscoveryStep {
  std::vector<double> u;
  std::vector<double> best_z;
  Tensor best_design;           // Bernoulli means decoded at best_z
  double best_distance = 1.0;
  std::vector<double> distances;       // per BO evaluation
  std::vector<double> best_distances;  // best-so-far per BO evaluation
};

struct DiscoveryTrace {
  std::vector<DiscoveryStep> steps;

  /// Smallest distance found over all steps.
  double best_distance() const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& s : steps) best = std::min(best, s.best_distance);
    return best;
  }
};

/// BO over z of a fixed VAE decoder, minimizing cosine distance to `target`.
inline DiscoveryStep search_latent(const ThetaVector& theta, const Tensor& target, const BoConfig& config, Rng& rng) {
  const std::size_t dz = vae_arch_of(theta).latent;
  DiscoveryStep step;
  auto objective = [&](std::span<const double> z) {
    const Tensor design = vae_decode(theta, Tensor::vector(std::vector<double>(z.begin(), z.end())));
    const double d = cosine_distance(design, target);
    step.distances.push_back(d);
    return -d;
  };
  BoResult bo = bo_maximize(objective, dz, config, rng);
  for (const auto& s : bo.trace) step.best_distances.push_back(-s.best_so_far);
  step.best_z = bo.best_z;
  step.best_distance = -bo.best_value;
  step.best_design = vae_decode(theta, Tensor::vector(bo.best_z));
  return step;
}

struct HyperSearchOptions {
  bool sample_u = false;  // draw u from q(u | d) instead of taking its mean
  std::optional<Tensor> init;  // d_1; the empty image when absent
};

inline Tensor binarize(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= 0.5 ? 1.0 : 0.0;
  return out;
}

/// Iterative novelty search: u_t from the hyper-posterior of d_{t-1}, theta_t
/// = theta(u_t), BO over z against the target, d_t = the binarized best design.
inline DiscoveryTrace hyper_search(const HyperParams& hp, const Tensor& target, std::size_t steps,
                                   const BoConfig& config, Rng& rng, const HyperSearchOptions& options = {}) {
  if (steps == 0) throw ShapeError("hyper_search: need at least one step");
  if (target.size() != hp.arch().target.data_dim) throw ShapeError("hyper_search: target length mismatch");
  Tensor d = options.init ? *options.init : Tensor({hp.arch().target.data_dim});
  DiscoveryTrace trace;
  for (std::size_t t = 0; t < steps; ++t) {
    const GaussianDiag q = hyper_encode(hp, d);
    Tensor u = q.mean;
    if (options.sample_u) u = reparameterize(q, sample_standard_normal(rng, hp.arch().u_dim));
    const ThetaVector theta = hyper_decode(hp, u);
    DiscoveryStep step = search_latent(theta, target, config, rng);
    step.u = u.values();
    d = binarize(step.best_design);
    trace.steps.push_back(std::move(step));
  }
  return trace;
}

inline const char* discovery_csv_header() { return "step,bo_iter,distance,best_distance,u_norm"; }

inline std::vector<std::string> discovery_csv_rows(const DiscoveryTrace& trace) {
  std::vector<std::string> rows;
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const auto& s = trace.steps[t];
    double u_norm = 0.0;
    for (double v : s.u) u_norm += v * v;
    u_norm = std::sqrt(u_norm);
    for (std::size_t i = 0; i < s.best_distances.size(); ++i) {
      rows.push_back(std::to_string(t + 1) + "," + std::to_string(i) + "," + format_double(s.distances[i]) + "," +
                     format_double(s.best_distances[i]) + "," + format_double(u_norm));
    }
  }
  return rows;
}

}  // namespace hypervae
