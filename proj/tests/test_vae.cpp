#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "hypervae/gaussian.hpp"
#include "hypervae/gradcheck.hpp"
#include "hypervae/vae.hpp"

using namespace hypervae;

namespace {

ThetaVector zero_theta(const VaeArch& arch) { return ThetaVector(make_vae_layout(arch)); }

void set(ThetaVector& t, const char* layer, const char* param, std::vector<double> v) {
  auto s = t.slice(layer, param);
  ASSERT_EQ(s.size(), v.size());
  std::copy(v.begin(), v.end(), s.begin());
}

// Composite Simpson integration of KL(N(m, e^lv) || N(0, 1)) over z.
double kl_by_quadrature(double m, double lv) {
  const double sd = std::exp(0.5 * lv);
  const double lo = m - 14 * sd, hi = m + 14 * sd;
  const int n = 20000;
  const double h = (hi - lo) / n;
  auto f = [&](double z) {
    const double log_q = -0.5 * std::log(2 * std::numbers::pi) - 0.5 * lv - 0.5 * (z - m) * (z - m) / std::exp(lv);
    const double log_p = -0.5 * std::log(2 * std::numbers::pi) - 0.5 * z * z;
    return std::exp(log_q) * (log_q - log_p);
  };
  double acc = f(lo) + f(hi);
  for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(lo + i * h);
  return acc * h / 3.0;
}

}  // namespace

TEST(VaeLayout, CanonicalOrderAndContiguity) {
  const auto layout = make_vae_layout({5, 4, 2});
  ASSERT_TRUE(layout->is_contiguous());
  std::vector<std::string> keys;
  for (const auto& e : layout->entries()) keys.push_back(e.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"enc.hidden.weight", "enc.hidden.bias", "enc.mean.weight", "enc.mean.bias",
                                            "enc.logvar.weight", "enc.logvar.bias", "dec.hidden.weight",
                                            "dec.hidden.bias", "dec.out.weight", "dec.out.bias"}));
  EXPECT_EQ(layout->total_len(), 4u * 5 + 4 + 2 * (2 * 4 + 2) + 4 * 2 + 4 + 5 * 4 + 5);
  EXPECT_THROW(make_vae_layout({0, 4, 2}), ShapeError);
}

TEST(VaeEncode, ZeroThetaGivesStandardNormal) {
  const ThetaVector t = zero_theta({6, 3, 2});
  const GaussianDiag q = vae_encode(t, Tensor::vector({1, 0, 1, 1, 0, 0}));
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(q.mean[i], 0.0);
    EXPECT_EQ(q.log_var[i], 0.0);
  }
}

TEST(VaeEncode, HandBuiltOnePixelEncoder) {
  ThetaVector t = zero_theta({1, 1, 1});
  set(t, "enc.hidden", "weight", {2.0});
  set(t, "enc.hidden", "bias", {0.5});
  set(t, "enc.mean", "weight", {0.4});
  set(t, "enc.mean", "bias", {-0.1});
  set(t, "enc.logvar", "weight", {-0.2});
  set(t, "enc.logvar", "bias", {0.3});
  const GaussianDiag q = vae_encode(t, Tensor::vector({1.0}));
  EXPECT_NEAR(q.mean[0], 0.4 * 2.5 - 0.1, 1e-15);
  EXPECT_NEAR(q.log_var[0], -0.2 * 2.5 + 0.3, 1e-15);
  const GaussianDiag q0 = vae_encode(t, Tensor::vector({0.0}));
  EXPECT_NEAR(q0.mean[0], 0.4 * 0.5 - 0.1, 1e-15);
}

TEST(VaeEncode, Deterministic) {
  Rng rng(4);
  const ThetaVector t = init_vae_theta({8, 5, 3}, rng);
  const Tensor x = Tensor::vector({1, 0, 0, 1, 1, 0, 1, 0});
  const GaussianDiag a = vae_encode(t, x), b = vae_encode(t, x);
  EXPECT_TRUE(a.mean == b.mean);
  EXPECT_TRUE(a.log_var == b.log_var);
}

TEST(VaeDecode, ZeroThetaGivesHalf) {
  const Tensor m = vae_decode(zero_theta({7, 3, 2}), Tensor::vector({0.3, -1.0}));
  for (double v : m.span()) EXPECT_EQ(v, 0.5);
}

TEST(VaeDecode, HandBuiltOnePixelDecoder) {
  ThetaVector t = zero_theta({1, 1, 1});
  set(t, "dec.hidden", "weight", {1.5});
  set(t, "dec.hidden", "bias", {0.2});
  set(t, "dec.out", "weight", {-0.8});
  set(t, "dec.out", "bias", {0.1});
  const Tensor m = vae_decode(t, Tensor::vector({0.7}));
  EXPECT_NEAR(m[0], 1.0 / (1.0 + std::exp(0.9)), 1e-15);
}

TEST(VaeDecode, OutputBiasIsMonotone) {
  Rng rng(8);
  ThetaVector t = init_vae_theta({6, 4, 2}, rng);
  const Tensor z = Tensor::vector({0.2, -0.4});
  double prev = vae_decode(t, z)[3];
  for (int step = 0; step < 5; ++step) {
    t.slice("dec.out", "bias")[3] += 0.5;
    const double now = vae_decode(t, z)[3];
    EXPECT_GT(now, prev);
    prev = now;
  }
}

TEST(Reparameterize, Cases) {
  const GaussianDiag g(Tensor::vector({1.0, -2.0}), Tensor::vector({-10.0, 0.5}));
  const Tensor zero = reparameterize(g, Tensor::vector({0.0, 0.0}));
  EXPECT_EQ(zero.values(), g.mean.values());
  const Tensor tiny = reparameterize(g, Tensor::vector({1.3, 0.0}));
  EXPECT_NEAR(tiny[0], 1.0, std::exp(-5.0) * 1.3 + 1e-15);
  const GaussianDiag clamped(Tensor::vector({0.0}), Tensor::vector({-1e9}));
  EXPECT_EQ(clamped.log_var[0], kLogVarMin);
}

TEST(Reparameterize, MomentsMatch) {
  const GaussianDiag g(Tensor::vector({0.7}), Tensor::vector({0.4}));
  Rng rng(13);
  const int n = 100000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = reparameterize(g, sample_standard_normal(rng, 1))[0];
    s += z;
    s2 += z * z;
  }
  const double mean = s / n, var = s2 / n - mean * mean, true_var = std::exp(0.4);
  EXPECT_LT(std::abs(mean - 0.7), 4 * std::sqrt(true_var / n));
  EXPECT_LT(std::abs(var - true_var), 4 * true_var * std::sqrt(2.0 / n));
}

TEST(Kl, ClosedFormMatchesQuadrature) {
  const GaussianDiag standard = GaussianDiag::standard(3);
  EXPECT_EQ(kl_to_standard_normal(standard), 0.0);
  const double a = kl_to_standard_normal(GaussianDiag(Tensor::vector({1.0}), Tensor::vector({0.0})));
  EXPECT_NEAR(a, 0.5, 1e-12);
  EXPECT_NEAR(a, kl_by_quadrature(1.0, 0.0), 1e-8);
  const double b = kl_to_standard_normal(GaussianDiag(Tensor::vector({0.0}), Tensor::vector({1.0})));
  EXPECT_NEAR(b, 0.35914, 1e-5);
  EXPECT_NEAR(b, kl_by_quadrature(0.0, 1.0), 1e-8);
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const double m = rng.normal(), lv = rng.uniform(-3, 3);
    const double kl = kl_to_standard_normal(GaussianDiag(Tensor::vector({m}), Tensor::vector({lv})));
    EXPECT_GE(kl, 0.0);
    EXPECT_NEAR(kl, kl_by_quadrature(m, lv), 1e-7);
  }
}

TEST(Bernoulli, AnchorsAndOracle) {
  const std::size_t d = 9;
  const Tensor half({d}, 0.5);
  EXPECT_NEAR(bernoulli_log_likelihood(Tensor({d}, 1.0), half), -static_cast<double>(d) * std::log(2.0), 1e-12);
  Tensor x({d}), m({d});
  for (std::size_t i = 0; i < d; ++i) {
    x[i] = i % 3 == 0 ? 1.0 : 0.0;
    m[i] = x[i];
  }
  const double near_perfect = bernoulli_log_likelihood(x, m);
  EXPECT_LT(near_perfect, 0.0);
  EXPECT_NEAR(near_perfect, static_cast<double>(d) * std::log1p(-1e-6), 1e-12);

  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    double oracle = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      x[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
      m[i] = rng.uniform(0.01, 0.99);
      oracle += x[i] == 1.0 ? std::log(m[i]) : std::log(1.0 - m[i]);
    }
    EXPECT_NEAR(bernoulli_log_likelihood(x, m), oracle, 1e-12);
  }
}

TEST(Elbo, ZeroThetaAnchor) {
  const VaeArch arch{10, 4, 3};
  const ThetaVector t = zero_theta(arch);
  Rng rng(1);
  for (int i = 0; i < 5; ++i) {
    Tensor x({10});
    for (double& v : x.span()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    const ElboBreakdown e = vae_elbo(t, x, rng);
    EXPECT_NEAR(e.elbo, -10.0 * std::log(2.0), 1e-12);
    EXPECT_EQ(e.kl, 0.0);
    EXPECT_EQ(e.elbo, e.recon_loglik - e.kl);
  }
}

TEST(Elbo, GradientMatchesFiniteDifferences) {
  Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    const VaeArch arch{12, 6, 3};
    ThetaVector theta = init_vae_theta(arch, rng);
    for (double& v : theta.values()) v += 0.1 * rng.normal();
    Tensor x({12});
    for (double& v : x.span()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    std::vector<double> eps(3);
    rng.fill_normal(eps);
    auto loss = [&](std::span<const double> p, std::span<double> grad) {
      std::copy(p.begin(), p.end(), theta.values().begin());
      const ElboBreakdown e = vae_elbo_with_eps(theta, x.span(), eps, grad);
      EXPECT_EQ(e.elbo, e.recon_loglik - e.kl);
      return e.elbo;
    };
    const std::vector<double> start(theta.values().begin(), theta.values().end());
    EXPECT_LT(grad_check(loss, start).max_relative_error, 1e-4);
  }
}

TEST(Elbo, LayoutMismatchIsRejected) {
  ThetaLayout other;
  other.add("enc.hidden", "weight", 2, 2);
  const ThetaVector bogus(std::make_shared<ThetaLayout>(other));
  EXPECT_THROW(vae_encode(bogus, Tensor::vector({1, 0})), Error);
  const ThetaVector t = zero_theta({4, 2, 2});
  EXPECT_THROW(vae_encode(t, Tensor::vector({1, 0})), ShapeError);
}
