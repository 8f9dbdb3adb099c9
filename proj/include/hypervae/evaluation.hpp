#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "hypervae/dataset.hpp"
#include "hypervae/error.hpp"
#include "hypervae/gaussian.hpp"
#include "hypervae/hypernet.hpp"
#include "hypervae/mdl.hpp"
#include "hypervae/rng.hpp"
#include "hypervae/vae.hpp"

namespace hypervae {

struct IsEstimate {
  double nll = 0.0;             // -log-mean-exp of the log importance weights
  std::vector<double> log_weights;
};

/// Importance-sampled negative log-likelihood with proposal q(z|x).
inline IsEstimate is_nll_detail(const ThetaVector& theta, const Tensor& x, std::size_t num_samples, Rng& rng) {
  if (num_samples == 0) throw ShapeError("is_nll: num_samples must be >= 1");
  const auto s = VaeSlices::locate(theta.layout());
  const GaussianDiag q = gaussian_encoder_forward(theta, s.enc, x.span(), nullptr);
  IsEstimate out;
  out.log_weights.resize(num_samples);
  DecoderCache dec;
  std::vector<double> eps(s.arch.latent), z(s.arch.latent), means(s.arch.data_dim);
  for (std::size_t k = 0; k < num_samples; ++k) {
    rng.fill_normal(eps);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = q.mean[i] + std::exp(0.5 * q.log_var[i]) * eps[i];
    decoder_logits(theta, s, z, dec);
    for (std::size_t i = 0; i < means.size(); ++i) means[i] = sigmoid(dec.logits[i]);
    out.log_weights[k] = bernoulli_log_likelihood(x.span(), means) + standard_normal_log_density(z) -
                         gaussian_log_density(z, q.mean.span(), q.log_var.span());
  }
  out.nll = -log_mean_exp(out.log_weights);
  return out;
}

inline double is_nll(const ThetaVector& theta, const Tensor& x, std::size_t num_samples, Rng& rng) {
  return is_nll_detail(theta, x, num_samples, rng).nll;
}

/// Mean over the dataset of KL(q(z|x) || p(z)).
inline double posterior_kl_metric(const ThetaVector& theta, const std::vector<Tensor>& data) {
  if (data.empty()) throw ShapeError("posterior_kl_metric: empty dataset");
  double acc = 0.0;
  for (const auto& x : data) acc += kl_to_standard_normal(vae_encode(theta, x));
  return acc / static_cast<double>(data.size());
}

/// How a HyperVAE picks the VAE that scores a point.
enum class HyperScoring {
  point_posterior,  // theta decoded from the posterior mean of u given the scored point
  task_exemplar,    // theta decoded from the posterior mean of u given a fixed exemplar
};

struct VaeScorer {
  ThetaVector theta;
};

struct HyperScorer {
  HyperParams params;
  HyperScoring mode = HyperScoring::point_posterior;
  Tensor exemplar;  // used by task_exemplar
};

using OutlierModel = std::variant<VaeScorer, HyperScorer>;

/// Theta decoded at the posterior-mean u of a single point.
inline ThetaVector theta_at_posterior_mean(const HyperParams& hp, const Tensor& x) {
  return hyper_decode(hp, hyper_encode(hp, x).mean.span());
}

/// Negative ELBO averaged over `samples` z draws; higher is more anomalous.
inline double outlier_score(const OutlierModel& model, const Tensor& x, Rng& rng, std::size_t samples = 8) {
  if (samples == 0) throw ShapeError("outlier_score: samples must be >= 1");
  const ThetaVector theta = std::visit(
      [&](const auto& m) -> ThetaVector {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, VaeScorer>) {
          return m.theta;
        } else {
          return theta_at_posterior_mean(m.params, m.mode == HyperScoring::point_posterior ? x : m.exemplar);
        }
      },
      model);
  const std::size_t dz = vae_arch_of(theta).latent;
  std::vector<double> eps(dz);
  double acc = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    rng.fill_normal(eps);
    acc -= vae_elbo_with_eps(theta, x.span(), eps).elbo;
  }
  return acc / static_cast<double>(samples);
}

inline void require_both_classes(const std::vector<bool>& flags, const char* what) {
  const auto pos = std::count(flags.begin(), flags.end(), true);
  if (pos == 0 || pos == static_cast<long>(flags.size())) {
    throw ShapeError(std::string(what) + ": both normal and outlier items are required");
  }
}

/// Mann-Whitney AUC: P(outlier score > normal score) with ties counted 1/2.
inline double roc_auc(const std::vector<double>& scores, const std::vector<bool>& flags) {
  if (scores.size() != flags.size()) throw ShapeError("roc_auc: scores/flags length mismatch");
  require_both_classes(flags, "roc_auc");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // For each tie group: every outlier beats all normals strictly below and
  // half of the normals inside the group. Counts are kept in halves.
  double normals_below = 0.0, twice_wins = 0.0, n_pos = 0.0, n_neg = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double pos = 0.0, neg = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (flags[order[j]] ? pos : neg) += 1.0;
      ++j;
    }
    twice_wins += pos * (2.0 * normals_below + neg);
    normals_below += neg;
    n_pos += pos;
    n_neg += neg;
    i = j;
  }
  return twice_wins / (2.0 * n_pos * n_neg);
}

struct ThresholdMetrics {
  double fpr = 0.0;
  double fnr = 0.0;
  std::optional<double> precision;  // absent when nothing is flagged
};

/// Predicted outlier when score > threshold.
inline ThresholdMetrics threshold_metrics(const std::vector<double>& scores, const std::vector<bool>& flags,
                                          double threshold) {
  if (scores.size() != flags.size()) throw ShapeError("threshold_metrics: scores/flags length mismatch");
  require_both_classes(flags, "threshold_metrics");
  double tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] > threshold;
    if (flags[i]) {
      (predicted ? tp : fn) += 1;
    } else {
      (predicted ? fp : tn) += 1;
    }
  }
  ThresholdMetrics m;
  m.fpr = fp / (fp + tn);
  m.fnr = fn / (fn + tp);
  if (tp + fp > 0) m.precision = tp / (tp + fp);
  return m;
}

/// Linear-interpolated percentile (level in [0, 1]).
inline double percentile(std::vector<double> values, double level) {
  if (values.empty()) throw ShapeError("percentile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = level * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct OutlierTask {
  TaskDataset train;           // normals only
  TaskDataset test;            // normals followed by outliers
  std::vector<bool> is_outlier;
  double contamination = 0.05;
  int normal_class = 0;
};

/// Number of outliers so that they form `contamination` of the test set.
inline std::size_t outlier_count(std::size_t normals, double contamination) {
  return static_cast<std::size_t>(
      std::llround(static_cast<double>(normals) * contamination / (1.0 - contamination)));
}

/// Normals of `normal_class` from each split; test outliers drawn uniformly
/// without replacement from the other classes of the test split.
inline OutlierTask build_outlier_task(const TaskDataset& train_pool, const TaskDataset& test_pool, int normal_class,
                                      double contamination, Rng& rng) {
  if (!(contamination >= 0.0 && contamination < 1.0)) {
    throw ConfigError("build_outlier_task: contamination must lie in [0, 1)");
  }
  std::vector<int> classes(test_pool.labels);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2) throw ShapeError("build_outlier_task: pool needs at least two classes");

  OutlierTask task;
  task.contamination = contamination;
  task.normal_class = normal_class;
  task.train = train_pool.filter(normal_class);
  const TaskDataset normals = test_pool.filter(normal_class);
  if (task.train.size() == 0 || normals.size() == 0) {
    throw ShapeError("build_outlier_task: no items of class " + std::to_string(normal_class));
  }
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < test_pool.size(); ++i) {
    if (test_pool.labels[i] != normal_class) others.push_back(i);
  }
  const std::size_t n_out = outlier_count(normals.size(), contamination);
  if (n_out > others.size()) throw ShapeError("build_outlier_task: not enough outlier candidates");

  task.test.task_id = normal_class;
  task.test.rows = test_pool.rows;
  task.test.cols = test_pool.cols;
  for (std::size_t i = 0; i < normals.size(); ++i) {
    task.test.push(normals.items[i], normal_class);
    task.is_outlier.push_back(false);
  }
  for (std::size_t pick : rng.sample_without_replacement(others.size(), n_out)) {
    task.test.push(test_pool.items[others[pick]], test_pool.labels[others[pick]]);
    task.is_outlier.push_back(true);
  }
  return task;
}

struct OutlierReport {
  double auc = 0.0;
  ThresholdMetrics at_threshold;
  double threshold = 0.0;
  std::vector<double> test_scores;
};

/// Scores the test split; the operating threshold is the 95th percentile of
/// the training-normal scores.
inline OutlierReport evaluate_outliers(const OutlierModel& model, const OutlierTask& task, Rng& rng,
                                       std::size_t samples = 8, double threshold_level = 0.95) {
  std::vector<double> train_scores;
  for (const auto& x : task.train.items) train_scores.push_back(outlier_score(model, x, rng, samples));
  OutlierReport report;
  for (const auto& x : task.test.items) report.test_scores.push_back(outlier_score(model, x, rng, samples));
  report.threshold = percentile(train_scores, threshold_level);
  report.auc = roc_auc(report.test_scores, task.is_outlier);
  report.at_threshold = threshold_metrics(report.test_scores, task.is_outlier, report.threshold);
  return report;
}

inline const char* metrics_csv_header() { return "task_id,model,auc,fpr,fnr,precision,nll_mean,kl_mean,seed"; }

inline std::string optional_field(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

}  // namespace hypervae
