#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "hypervae/error.hpp"
#include "hypervae/rng.hpp"

namespace hypervae {

/// Loss callback for grad_check. Must return the loss at `params`; when
/// `grad` is non-empty it must also write the analytic gradient there.
using LossWithGrad = std::function<double(std::span<const double> params, std::span<double> grad)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Central-difference check of an analytic gradient.
///
/// Compares every coordinate, or `max_coords` coordinates sampled with
/// `rng` when the parameter vector is larger than that. The per-coordinate
/// error is |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckResult grad_check(const LossWithGrad& loss_fn, std::span<const double> params,
                                  double step = 1e-5, std::optional<std::size_t> max_coords = {},
                                  std::uint64_t coord_seed = 0) {
  std::vector<double> x(params.begin(), params.end());
  std::vector<double> analytic(x.size(), 0.0);
  const double base = loss_fn(x, analytic);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");

  std::vector<std::size_t> coords;
  if (max_coords && *max_coords < x.size()) {
    Rng rng(coord_seed);
    coords = rng.sample_without_replacement(x.size(), *max_coords);
    std::sort(coords.begin(), coords.end());
  } else {
    coords.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) coords[i] = i;
  }

  GradCheckResult result;
  for (std::size_t i : coords) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = loss_fn(x, {});
    x[i] = saved - step;
    const double down = loss_fn(x, {});
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite loss");
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (result.checked == 0 || err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = i;
      result.analytic = a;
      result.numeric = numeric;
    }
    ++result.checked;
  }
  return result;
}

}  // namespace hypervae
