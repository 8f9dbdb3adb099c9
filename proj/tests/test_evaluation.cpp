#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "hypervae/evaluation.hpp"
#include "hypervae/training.hpp"

using namespace hypervae;

namespace {

void set(ThetaVector& t, const char* layer, const char* param, std::vector<double> v) {
  auto s = t.slice(layer, param);
  ASSERT_EQ(s.size(), v.size());
  std::copy(v.begin(), v.end(), s.begin());
}

// Gauss-Hermite nodes and weights for weight function exp(-x^2), by Newton
// iteration on the orthonormal Hermite recurrence.
void gauss_hermite(int n, std::vector<long double>& x, std::vector<long double>& w) {
  x.assign(n, 0.0L);
  w.assign(n, 0.0L);
  const long double pim4 = 1.0L / std::pow(std::numbers::pi_v<long double>, 0.25L);
  long double z = 0.0L;
  for (int i = 0; i < (n + 1) / 2; ++i) {
    if (i == 0) {
      z = std::sqrt(static_cast<long double>(2 * n + 1)) - 1.85575L * std::pow(static_cast<long double>(2 * n + 1), -0.16667L);
    } else if (i == 1) {
      z -= 1.14L * std::pow(static_cast<long double>(n), 0.426L) / z;
    } else if (i == 2) {
      z = 1.86L * z - 0.86L * x[0];
    } else if (i == 3) {
      z = 1.91L * z - 0.91L * x[1];
    } else {
      z = 2.0L * z - x[i - 2];
    }
    long double pp = 0.0L;
    for (int iter = 0; iter < 100; ++iter) {
      long double p1 = pim4, p2 = 0.0L;
      for (int j = 0; j < n; ++j) {
        const long double p3 = p2;
        p2 = p1;
        p1 = z * std::sqrt(2.0L / (j + 1)) * p2 - std::sqrt(static_cast<long double>(j) / (j + 1)) * p3;
      }
      pp = std::sqrt(2.0L * n) * p2;
      const long double z1 = z;
      z = z1 - p1 / pp;
      if (std::abs(z - z1) <= 1e-16L) break;
    }
    x[i] = z;
    x[n - 1 - i] = -z;
    w[i] = w[n - 1 - i] = 2.0L / (pp * pp);
  }
}

// One pixel, d_z = 1: relu kink of the decoder sits far in the prior tail and
// the encoder roughly matches the exact posterior moments (variance widened).
ThetaVector one_pixel_model() {
  ThetaVector t(make_vae_layout({1, 1, 1}));
  set(t, "enc.hidden", "weight", {1.0});
  set(t, "enc.hidden", "bias", {1.0});
  set(t, "enc.mean", "weight", {0.9915});
  set(t, "enc.mean", "bias", {-1.6328});
  set(t, "enc.logvar", "weight", {0.0525});
  set(t, "enc.logvar", "bias", {-0.2014});
  set(t, "dec.hidden", "weight", {1.0});
  set(t, "dec.hidden", "bias", {6.0});
  set(t, "dec.out", "weight", {1.3});
  set(t, "dec.out", "bias", {-7.0});
  return t;
}

double exact_log_marginal(const ThetaVector& t, double x) {
  std::vector<long double> nodes, weights;
  gauss_hermite(80, nodes, weights);
  long double acc = 0.0L;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const double z = static_cast<double>(std::numbers::sqrt2_v<long double> * nodes[i]);
    const double m = vae_decode(t, Tensor::vector({z}))[0];
    acc += weights[i] * (x == 1.0 ? m : 1.0 - m);
  }
  return static_cast<double>(std::log(acc / std::sqrt(std::numbers::pi_v<long double>)));
}

std::vector<Tensor> random_binary(std::size_t n, std::size_t d, double p, Rng& rng) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor x({d});
    for (double& v : x.span()) v = rng.uniform() < p ? 1.0 : 0.0;
    out.push_back(std::move(x));
  }
  return out;
}

double brute_auc(const std::vector<double>& s, const std::vector<bool>& f) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!f[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (f[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

}  // namespace

TEST(GaussHermiteOracle, IntegratesPolynomials) {
  std::vector<long double> x, w;
  gauss_hermite(80, x, w);
  long double m0 = 0, m2 = 0, m4 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    m0 += w[i];
    m2 += w[i] * x[i] * x[i];
    m4 += w[i] * x[i] * x[i] * x[i] * x[i];
  }
  const long double sp = std::sqrt(std::numbers::pi_v<long double>);
  EXPECT_NEAR(static_cast<double>(m0 / sp), 1.0, 1e-14);
  EXPECT_NEAR(static_cast<double>(m2 / sp), 0.5, 1e-14);
  EXPECT_NEAR(static_cast<double>(m4 / sp), 0.75, 1e-14);
}

TEST(IsNll, MatchesQuadratureOnOnePixelModel) {
  const ThetaVector t = one_pixel_model();
  Rng rng(11);
  for (double x : {0.0, 1.0}) {
    const double exact = -exact_log_marginal(t, x);
    const double est = is_nll(t, Tensor::vector({x}), 100000, rng);
    EXPECT_NEAR(est, exact, 1e-3) << "x=" << x;
  }
}

TEST(IsNll, JensenBoundAgainstElbo) {
  Rng rng(12);
  const ThetaVector t = init_vae_theta({10, 6, 3}, rng);
  for (const auto& x : random_binary(10, 10, 0.4, rng)) {
    const double nll = is_nll(t, x, 1024, rng);
    const int n = 2000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
      const double e = vae_elbo(t, x, rng).elbo;
      s += e;
      s2 += e * e;
    }
    const double mean = s / n, stderr_ = std::sqrt((s2 / n - mean * mean) / n);
    EXPECT_LE(nll, -mean + 3.0 * stderr_);
  }
}

TEST(IsNll, SingleSampleReduction) {
  Rng rng(13);
  const ThetaVector t = init_vae_theta({6, 4, 2}, rng);
  const Tensor x = Tensor::vector({1, 0, 0, 1, 1, 0});
  Rng a(77), b(77);
  const double nll = is_nll(t, x, 1, a);
  const GaussianDiag q = vae_encode(t, x);
  const Tensor z = reparameterize(q, sample_standard_normal(b, 2));
  const double ratio = bernoulli_log_likelihood(x, vae_decode(t, z)) + standard_normal_log_density(z.span()) -
                       gaussian_log_density(z.span(), q.mean.span(), q.log_var.span());
  EXPECT_NEAR(nll, -ratio, 1e-12);
  EXPECT_THROW(is_nll(t, x, 0, a), ShapeError);
}

TEST(IsNll, MoreSamplesTightenOnAverage) {
  Rng rng(14);
  const ThetaVector t = init_vae_theta({8, 5, 2}, rng);
  const Tensor x = Tensor::vector({1, 1, 0, 0, 1, 0, 1, 0});
  std::vector<double> means;
  for (std::size_t s : {1u, 4u, 16u, 64u}) {
    double acc = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng r(1000 + seed);
      acc += is_nll(t, x, s, r);
    }
    means.push_back(acc / 100.0);
  }
  for (std::size_t i = 1; i < means.size(); ++i) EXPECT_LE(means[i], means[i - 1]);
}

TEST(PosteriorKl, ZeroDirectAndNonnegative) {
  Rng rng(15);
  const auto data = random_binary(12, 7, 0.5, rng);
  EXPECT_EQ(posterior_kl_metric(ThetaVector(make_vae_layout({7, 3, 2})), data), 0.0);
  const ThetaVector t = init_vae_theta({7, 3, 2}, rng);
  double direct = 0.0;
  for (const auto& x : data) {
    const GaussianDiag q = vae_encode(t, x);
    for (std::size_t i = 0; i < 2; ++i) {
      direct += 0.5 * (q.mean[i] * q.mean[i] + std::exp(q.log_var[i]) - 1.0 - q.log_var[i]);
    }
  }
  const double metric = posterior_kl_metric(t, data);
  EXPECT_NEAR(metric, direct / 12.0, 1e-12);
  EXPECT_GE(metric, 0.0);
  EXPECT_THROW(posterior_kl_metric(t, {}), ShapeError);
}

TEST(OutlierScore, NoiseScoresAboveTrainingPoints) {
  SyntheticTaskSpec spec;
  spec.side = 8;
  spec.classes = 1;
  spec.samples_per_class = 100;
  spec.flip_prob = 0.0;
  Rng data_rng(16);
  const auto tasks = generate_synthetic_tasks(spec, data_rng);
  TrainConfig c;
  c.max_iters = 800;
  c.learning_rate = 3e-3;
  c.early_stop = false;
  const auto vae = train_vae(tasks[0], {64, 32, 4}, c);
  const auto hyper = train_hypervae(tasks, {{64, 32, 4}, 32, 4, 16}, c);
  Rng rng(17);
  const auto noise = random_binary(10, 64, 0.5, rng);
  const std::vector<OutlierModel> models{VaeScorer{vae.theta}, HyperScorer{hyper.params, HyperScoring::point_posterior, {}},
                                         HyperScorer{hyper.params, HyperScoring::task_exemplar, tasks[0].items[0]}};
  for (const auto& m : models) {
    double worst_train = -1e300;
    for (int i = 0; i < 10; ++i) worst_train = std::max(worst_train, outlier_score(m, tasks[0].items[i], rng));
    for (const auto& x : noise) {
      const double s = outlier_score(m, x, rng);
      EXPECT_TRUE(std::isfinite(s));
      EXPECT_GT(s, worst_train);
    }
    Rng a(3), b(3);
    EXPECT_EQ(outlier_score(m, noise[0], a), outlier_score(m, noise[0], b));
  }
}

TEST(RocAuc, Examples) {
  EXPECT_DOUBLE_EQ(roc_auc({0.1, 0.4, 0.35, 0.8}, {false, false, true, true}), 0.75);
  EXPECT_DOUBLE_EQ(brute_auc({0.1, 0.4, 0.35, 0.8}, {false, false, true, true}), 0.75);
  EXPECT_EQ(roc_auc({1, 2, 3, 10, 11}, {false, false, false, true, true}), 1.0);
  EXPECT_EQ(roc_auc({5, 5, 5, 5, 5}, {true, false, false, true, false}), 0.5);
  EXPECT_EQ(roc_auc({3, 1}, {false, true}), 0.0);
  EXPECT_THROW(roc_auc({1, 2}, {true, true}), ShapeError);
  EXPECT_THROW(roc_auc({1, 2}, {true}), ShapeError);
}

TEST(RocAuc, MatchesBruteForceExactly) {
  Rng rng(18);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng.index(199);
    std::vector<double> s(n);
    std::vector<bool> f(n);
    const bool coarse = trial % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse ? static_cast<double>(rng.index(5)) : rng.normal();
      f[i] = rng.uniform() < 0.3;
    }
    f[0] = true;
    f[1] = false;
    EXPECT_EQ(roc_auc(s, f), brute_auc(s, f));
  }
}

TEST(RocAuc, InvariantUnderMonotoneTransform) {
  Rng rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 20 + rng.index(100);
    std::vector<double> s(n), t1(n), t2(n);
    std::vector<bool> f(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.index(30)) * 0.1;
      f[i] = i % 3 == 0;
      t1[i] = std::exp(2.0 * s[i]) + 5.0;
      t2[i] = std::atan(s[i] - 1.0) * 3.0;
    }
    EXPECT_EQ(roc_auc(s, f), roc_auc(t1, f));
    EXPECT_EQ(roc_auc(s, f), roc_auc(t2, f));
  }
}

TEST(ThresholdMetrics, Edges) {
  const std::vector<double> s{0.1, 0.5, 0.9, 0.3, 0.7};
  const std::vector<bool> f{false, true, true, false, false};
  const auto low = threshold_metrics(s, f, 0.0);
  EXPECT_EQ(low.fpr, 1.0);
  EXPECT_EQ(low.fnr, 0.0);
  ASSERT_TRUE(low.precision.has_value());
  EXPECT_DOUBLE_EQ(*low.precision, 2.0 / 5.0);
  const auto high = threshold_metrics(s, f, 1.0);
  EXPECT_EQ(high.fpr, 0.0);
  EXPECT_EQ(high.fnr, 1.0);
  EXPECT_FALSE(high.precision.has_value());
  EXPECT_THROW(threshold_metrics(s, std::vector<bool>(5, false), 0.5), ShapeError);
}

TEST(ThresholdMetrics, HandConfusionMatrix) {
  // Two normals, two outliers; threshold 0.5 gives TP=1, FN=1, FP=1, TN=1.
  const auto m = threshold_metrics({0.2, 0.6, 0.4, 0.8}, {false, false, true, true}, 0.5);
  EXPECT_EQ(m.fpr, 0.5);
  EXPECT_EQ(m.fnr, 0.5);
  EXPECT_EQ(*m.precision, 0.5);
  // Strict comparison: a score equal to the threshold is not flagged.
  const auto eq = threshold_metrics({0.5, 0.2, 0.9, 0.5}, {false, false, true, true}, 0.5);
  EXPECT_EQ(eq.fpr, 0.0);
  EXPECT_EQ(eq.fnr, 0.5);
  EXPECT_EQ(*eq.precision, 1.0);
}

TEST(Percentile, Interpolates) {
  EXPECT_EQ(percentile({3, 1, 2}, 0.5), 2.0);
  EXPECT_EQ(percentile({0, 10}, 0.95), 9.5);
  EXPECT_EQ(percentile({4}, 0.3), 4.0);
  EXPECT_EQ(percentile({1, 2, 3, 4, 5}, 1.0), 5.0);
  EXPECT_THROW(percentile({}, 0.5), ShapeError);
}

TEST(OutlierTask, SizingAndDeterminism) {
  EXPECT_EQ(outlier_count(1000, 0.05), 53u);
  EXPECT_EQ(outlier_count(1000, 0.0), 0u);
  EXPECT_EQ(outlier_count(19, 0.05), 1u);

  SyntheticTaskSpec spec;
  spec.side = 8;
  spec.classes = 3;
  spec.samples_per_class = 60;
  Rng data_rng(20);
  const TaskDataset pool = merge_tasks(generate_synthetic_tasks(spec, data_rng));

  Rng r0(1);
  const OutlierTask none = build_outlier_task(pool, pool, 1, 0.0, r0);
  EXPECT_EQ(none.test.size(), 60u);
  for (bool b : none.is_outlier) EXPECT_FALSE(b);

  Rng a(5), b(5);
  const OutlierTask ta = build_outlier_task(pool, pool, 2, 0.05, a);
  const OutlierTask tb = build_outlier_task(pool, pool, 2, 0.05, b);
  EXPECT_EQ(ta.test.labels, tb.test.labels);
  EXPECT_EQ(ta.is_outlier, tb.is_outlier);
  for (std::size_t i = 0; i < ta.test.size(); ++i) EXPECT_TRUE(ta.test.items[i] == tb.test.items[i]);
  EXPECT_EQ(ta.train.size(), 60u);
  EXPECT_EQ(std::count(ta.is_outlier.begin(), ta.is_outlier.end(), true), 3);
  for (std::size_t i = 0; i < ta.test.size(); ++i) EXPECT_EQ(ta.is_outlier[i], ta.test.labels[i] != 2);

  EXPECT_THROW(build_outlier_task(pool, pool, 7, 0.05, a), ShapeError);
  EXPECT_THROW(build_outlier_task(pool, pool, 0, 1.0, a), ConfigError);
  EXPECT_THROW(build_outlier_task(pool.filter(0), pool.filter(0), 0, 0.05, a), ShapeError);
}

TEST(OperatingThreshold, FalsePositiveRateNearLevel) {
  Rng rng(21);
  const ThetaVector t = init_vae_theta({16, 6, 2}, rng);
  const VaeScorer model{t};
  OutlierTask task;
  for (const auto& x : random_binary(1000, 16, 0.3, rng)) task.train.push(x, 0);
  for (const auto& x : random_binary(1000, 16, 0.3, rng)) {
    task.test.push(x, 0);
    task.is_outlier.push_back(false);
  }
  for (const auto& x : random_binary(50, 16, 0.9, rng)) {
    task.test.push(x, 1);
    task.is_outlier.push_back(true);
  }
  const OutlierReport r = evaluate_outliers(model, task, rng);
  // Binomial spread of 1000 test normals plus the threshold's own sampling error.
  const double sd = std::sqrt(2.0 * 0.05 * 0.95 / 1000.0);
  EXPECT_NEAR(r.at_threshold.fpr, 0.05, 4.0 * sd);
  EXPECT_EQ(r.test_scores.size(), 1050u);
}
