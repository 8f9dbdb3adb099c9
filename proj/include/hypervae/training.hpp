#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hypervae/dataset.hpp"
#include "hypervae/error.hpp"
#include "hypervae/hypernet.hpp"
#include "hypervae/mdl.hpp"
#include "hypervae/rng.hpp"
#include "hypervae/vae.hpp"

namespace hypervae {

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double learning_rate = 3e-4;
  double adam_eps = 1e-8;
  std::size_t batch_size = 30;
  std::size_t max_iters = 5000;
  std::uint64_t seed = 1;
  std::size_t k = 1;
  std::size_t log_every = 100;
  /// Early stop when the mean per-item objective over the last window
  /// improves by less than early_stop_tol nats on the window before it.
  std::size_t early_stop_window = 500;
  double early_stop_tol = 1e-4;
  bool early_stop = true;
  bool record_wallclock = false;

  void validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw ConfigError("train: beta1 and beta2 must lie in (0, 1)");
    }
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (k == 0 || k > batch_size) throw ConfigError("train: K must be in [1, batch_size]");
    if (log_every == 0) throw ConfigError("train: log_every must be >= 1");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct AdamState {
  std::vector<double> m, v;
  std::size_t t = 0;
  std::size_t skipped = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam step that ascends the objective whose gradient is
/// `grads`. Returns false (and leaves everything untouched apart from the
/// skip counter) when a gradient is non-finite.
inline bool adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      const TrainConfig& config) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment sizes differ");
  }
  for (double g : grads) {
    if (!std::isfinite(g)) {
      ++state.skipped;
      return false;
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grads[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] += config.learning_rate * mhat / (std::sqrt(vhat) + config.adam_eps);
  }
  return true;
}

struct TraceRow {
  std::size_t iter = 0;
  double objective_nats = 0.0;
  double kl_u_nats = 0.0;
  double recon_nats = 0.0;
  double wallclock_s = 0.0;
};

struct TrainTrace {
  std::vector<TraceRow> rows;
  /// Per-item objective (nats per data point) at every iteration.
  std::vector<double> per_item;
  std::size_t iterations = 0;
  std::size_t skipped_steps = 0;
  bool stopped_early = false;

  /// Mean of per_item over [begin, end).
  double window_mean(std::size_t begin, std::size_t end) const {
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) acc += per_item[i];
    return acc / static_cast<double>(end - begin);
  }
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, TrainTrace trace) : NumericError(what), trace_(std::move(trace)) {}
  const TrainTrace& trace() const { return trace_; }

 private:
  TrainTrace trace_;
};

inline std::vector<Tensor> draw_minibatch(const TaskDataset& task, std::size_t batch, Rng& rng) {
  std::vector<Tensor> out;
  out.reserve(batch);
  if (task.items.size() >= batch) {
    for (std::size_t idx : rng.sample_without_replacement(task.items.size(), batch)) out.push_back(task.items[idx]);
  } else {
    for (std::size_t i = 0; i < batch; ++i) out.push_back(task.items[rng.index(task.items.size())]);
  }
  return out;
}

namespace detail {

/// Shared optimization loop. `step` evaluates the objective with gradient.
struct StepResult {
  double objective = 0.0, kl_u = 0.0, recon = 0.0;
  std::size_t items = 1;
};

inline TrainTrace optimize(std::span<double> params, const TrainConfig& config,
                           const std::function<StepResult(std::span<double> grad)>& step) {
  config.validate();
  AdamState adam(params.size());
  TrainTrace trace;
  std::vector<double> grad(params.size());
  const auto start = std::chrono::steady_clock::now();
  const std::size_t window = config.early_stop_window;
  for (std::size_t iter = 0; iter < config.max_iters; ++iter) {
    std::fill(grad.begin(), grad.end(), 0.0);
    const StepResult r = step(grad);
    if (!std::isfinite(r.objective)) {
      trace.iterations = iter;
      throw TrainingDiverged("training diverged at iteration " + std::to_string(iter), std::move(trace));
    }
    adam_step(params, grad, adam, config);
    trace.per_item.push_back(r.objective / static_cast<double>(r.items));
    if (iter % config.log_every == 0 || iter + 1 == config.max_iters) {
      TraceRow row{iter, r.objective, r.kl_u, r.recon, 0.0};
      if (config.record_wallclock) {
        row.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      }
      trace.rows.push_back(row);
    }
    trace.iterations = iter + 1;
    const std::size_t n = trace.per_item.size();
    if (config.early_stop && window > 0 && n >= 2 * window && n % window == 0) {
      const double recent = trace.window_mean(n - window, n);
      const double before = trace.window_mean(n - 2 * window, n - window);
      if (recent - before < config.early_stop_tol) {
        trace.stopped_early = true;
        break;
      }
    }
  }
  trace.skipped_steps = adam.skipped;
  return trace;
}

}  // namespace detail

struct VaeTrainResult {
  ThetaVector theta;
  TrainTrace trace;
};

/// Maximizes the summed single-sample ELBO over random minibatches.
inline VaeTrainResult train_vae(const TaskDataset& task, const VaeArch& arch, const TrainConfig& config) {
  if (task.items.empty()) throw ShapeError("train_vae: empty task");
  if (task.data_dim() != arch.data_dim) throw ShapeError("train_vae: task dimension does not match architecture");
  Rng rng(config.seed);
  VaeTrainResult result{init_vae_theta(arch, rng), {}};
  ThetaVector& theta = result.theta;
  std::vector<double> eps(arch.latent);
  result.trace = detail::optimize(theta.values(), config, [&](std::span<double> grad) {
    const auto batch = draw_minibatch(task, config.batch_size, rng);
    detail::StepResult r;
    r.items = batch.size();
    for (const auto& x : batch) {
      rng.fill_normal(eps);
      const auto e = vae_elbo_with_eps(theta, x.span(), eps, grad);
      r.objective += e.elbo;
      r.recon += e.recon_loglik;
    }
    return r;
  });
  return result;
}

struct HyperTrainResult {
  HyperParams params;
  TrainTrace trace;
};

/// Each iteration draws a task uniformly, a minibatch from it, and ascends
/// the K = 1 bits-back objective (or the importance-weighted one for K > 1).
inline HyperTrainResult train_hypervae(const std::vector<TaskDataset>& tasks, const HyperArch& arch,
                                       const TrainConfig& config) {
  if (tasks.empty()) throw ShapeError("train_hypervae: need at least one task");
  for (const auto& t : tasks) {
    if (t.items.empty()) throw ShapeError("train_hypervae: empty task");
    if (t.data_dim() != arch.target.data_dim) throw ShapeError("train_hypervae: task dimension mismatch");
  }
  config.validate();
  Rng rng(config.seed);
  HyperTrainResult result{init_hyper_params(arch, rng), {}};
  HyperParams& hp = result.params;
  result.trace = detail::optimize(hp.gamma().values(), config, [&](std::span<double> grad) {
    const TaskDataset& task = tasks[rng.index(tasks.size())];
    const auto batch = draw_minibatch(task, config.batch_size, rng);
    const auto noise = draw_objective_noise(rng, batch.size(), config.k, arch.u_dim, arch.target.latent);
    detail::StepResult r;
    r.items = batch.size();
    if (config.k == 1) {
      const auto o = joint_objective_k1(hp, batch, noise, grad);
      r.objective = o.objective;
      r.kl_u = o.kl_u;
      r.recon = o.recon;
    } else {
      const auto o = importance_weighted_objective(hp, batch, noise, grad);
      r.objective = o.objective;
    }
    return r;
  });
  return result;
}

inline const char* trace_csv_header() { return "iter,objective_nats,kl_u_nats,recon_nats,wallclock_s"; }

inline std::string trace_csv_row(const TraceRow& row) {
  return std::to_string(row.iter) + "," + format_double(row.objective_nats) + "," + format_double(row.kl_u_nats) +
         "," + format_double(row.recon_nats) + "," + format_double(row.wallclock_s);
}

}  // namespace hypervae
