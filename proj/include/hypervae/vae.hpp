#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "hypervae/error.hpp"
#include "hypervae/gaussian.hpp"
#include "hypervae/layers.hpp"
#include "hypervae/layout.hpp"
#include "hypervae/rng.hpp"
#include "hypervae/tensor.hpp"

namespace hypervae {

inline constexpr double kBernoulliClamp = 1e-6;

/// Dense task-level VAE: D -> h (relu) -> {mean, log_var} of size d_z, and
/// d_z -> h (relu) -> D Bernoulli logits.
struct VaeArch {
  std::size_t data_dim = 196;
  std::size_t hidden = 64;
  std::size_t latent = 8;

  friend bool operator==(const VaeArch&, const VaeArch&) = default;
};

/// Canonical order: encoder input to latent, then decoder latent to output,
/// weight before bias within each layer.
inline std::shared_ptr<const ThetaLayout> make_vae_layout(const VaeArch& arch) {
  if (arch.data_dim == 0 || arch.hidden == 0 || arch.latent == 0) {
    throw ShapeError("vae: all dimensions must be >= 1");
  }
  auto layout = std::make_shared<ThetaLayout>();
  layout->add("enc.hidden", "weight", arch.hidden, arch.data_dim);
  layout->add("enc.hidden", "bias", arch.hidden, 1);
  layout->add("enc.mean", "weight", arch.latent, arch.hidden);
  layout->add("enc.mean", "bias", arch.latent, 1);
  layout->add("enc.logvar", "weight", arch.latent, arch.hidden);
  layout->add("enc.logvar", "bias", arch.latent, 1);
  layout->add("dec.hidden", "weight", arch.hidden, arch.latent);
  layout->add("dec.hidden", "bias", arch.hidden, 1);
  layout->add("dec.out", "weight", arch.data_dim, arch.hidden);
  layout->add("dec.out", "bias", arch.data_dim, 1);
  return layout;
}

/// Offsets of a Gaussian encoder (dense relu hidden layer, then parallel
/// mean and log-variance heads) inside a flat parameter vector. Shared by
/// the VAE encoder and the hyper-encoder.
struct GaussianEncoderSlices {
  std::size_t input = 0, hidden = 0, latent = 0;
  std::size_t w1 = 0, b1 = 0, wm = 0, bm = 0, wl = 0, bl = 0;

  static GaussianEncoderSlices locate(const ThetaLayout& layout, const std::string& prefix) {
    GaussianEncoderSlices s;
    const auto& e = layout.entries();
    s.w1 = layout.index_of(prefix + ".hidden", "weight");
    s.b1 = layout.index_of(prefix + ".hidden", "bias");
    s.wm = layout.index_of(prefix + ".mean", "weight");
    s.bm = layout.index_of(prefix + ".mean", "bias");
    s.wl = layout.index_of(prefix + ".logvar", "weight");
    s.bl = layout.index_of(prefix + ".logvar", "bias");
    s.hidden = e[s.w1].rows;
    s.input = e[s.w1].cols;
    s.latent = e[s.wm].rows;
    if (e[s.b1].rows != s.hidden || e[s.wm].cols != s.hidden || e[s.bm].rows != s.latent ||
        e[s.wl].rows != s.latent || e[s.wl].cols != s.hidden || e[s.bl].rows != s.latent) {
      throw ShapeError("layout: encoder '" + prefix + "' slices are inconsistent");
    }
    return s;
  }
};

struct GaussianEncoderCache {
  std::vector<double> pre, act, log_var_raw;
};

inline GaussianDiag gaussian_encoder_forward(const ThetaVector& params, const GaussianEncoderSlices& s,
                                             std::span<const double> x, GaussianEncoderCache* cache) {
  if (x.size() != s.input) {
    throw ShapeError("encoder: input length " + std::to_string(x.size()) + ", expected " +
                     std::to_string(s.input));
  }
  std::vector<double> pre(s.hidden), act(s.hidden);
  kernel::affine(params.slice(s.w1), params.slice(s.b1), x, pre);
  for (std::size_t i = 0; i < s.hidden; ++i) act[i] = pre[i] > 0.0 ? pre[i] : 0.0;
  Tensor mean({s.latent}), log_var({s.latent});
  kernel::affine(params.slice(s.wm), params.slice(s.bm), act, mean.span());
  kernel::affine(params.slice(s.wl), params.slice(s.bl), act, log_var.span());
  if (cache) {
    cache->pre = std::move(pre);
    cache->act = std::move(act);
    cache->log_var_raw = log_var.values();
  }
  return GaussianDiag(std::move(mean), std::move(log_var));
}

/// Accumulates parameter gradients given d/d mean and d/d log_var (of the
/// clamped log-variance). Clamped coordinates pass no gradient.
inline void gaussian_encoder_backward(const ThetaVector& params, const GaussianEncoderSlices& s,
                                      std::span<const double> x, const GaussianEncoderCache& cache,
                                      std::span<const double> g_mean, std::span<const double> g_log_var,
                                      std::span<double> grad) {
  const auto& e = params.layout().entries();
  auto gslice = [&](std::size_t idx) { return grad.subspan(e[idx].offset, e[idx].size()); };
  std::vector<double> g_lv(g_log_var.begin(), g_log_var.end());
  for (std::size_t i = 0; i < s.latent; ++i) {
    const double raw = cache.log_var_raw[i];
    if (raw < kLogVarMin || raw > kLogVarMax) g_lv[i] = 0.0;
  }
  std::vector<double> g_act(s.hidden), g_tmp(s.hidden);
  kernel::affine_backward(params.slice(s.wm), cache.act, g_mean, gslice(s.wm), gslice(s.bm), g_act);
  kernel::affine_backward(params.slice(s.wl), cache.act, g_lv, gslice(s.wl), gslice(s.bl), g_tmp);
  for (std::size_t i = 0; i < s.hidden; ++i) g_act[i] = cache.pre[i] > 0.0 ? g_act[i] + g_tmp[i] : 0.0;
  kernel::affine_backward(params.slice(s.w1), x, g_act, gslice(s.w1), gslice(s.b1), {});
}

/// Validated view of a VAE parameter vector.
struct VaeSlices {
  GaussianEncoderSlices enc;
  std::size_t w3 = 0, b3 = 0, w4 = 0, b4 = 0;
  VaeArch arch;

  static VaeSlices locate(const ThetaLayout& layout) {
    VaeSlices s;
    s.enc = GaussianEncoderSlices::locate(layout, "enc");
    const auto& e = layout.entries();
    s.w3 = layout.index_of("dec.hidden", "weight");
    s.b3 = layout.index_of("dec.hidden", "bias");
    s.w4 = layout.index_of("dec.out", "weight");
    s.b4 = layout.index_of("dec.out", "bias");
    s.arch = {s.enc.input, s.enc.hidden, s.enc.latent};
    if (e[s.w3].rows != s.arch.hidden || e[s.w3].cols != s.arch.latent || e[s.b3].rows != s.arch.hidden ||
        e[s.w4].rows != s.arch.data_dim || e[s.w4].cols != s.arch.hidden ||
        e[s.b4].rows != s.arch.data_dim) {
      throw ShapeError("vae: decoder slices do not match the encoder dimensions");
    }
    const auto& a = s.arch;
    const std::size_t expected = a.hidden * (a.data_dim + 1) + 2 * a.latent * (a.hidden + 1) +
                                 a.hidden * (a.latent + 1) + a.data_dim * (a.hidden + 1);
    if (layout.total_len() != expected) {
      throw ShapeError("vae: layout carries extra slices");
    }
    return s;
  }
};

inline VaeArch vae_arch_of(const ThetaVector& theta) { return VaeSlices::locate(theta.layout()).arch; }

/// He-style random initialization; biases start at zero.
inline ThetaVector init_vae_theta(const VaeArch& arch, Rng& rng) {
  ThetaVector theta(make_vae_layout(arch));
  for (std::size_t i = 0; i < theta.layout().entries().size(); ++i) {
    const auto& e = theta.layout().entries()[i];
    if (e.param != "weight") continue;
    const double scale = std::sqrt((e.layer == "enc.hidden" || e.layer == "dec.hidden" ? 2.0 : 1.0) /
                                   static_cast<double>(e.cols));
    for (double& v : theta.slice(i)) v = scale * rng.normal();
  }
  return theta;
}

inline GaussianDiag vae_encode(const ThetaVector& theta, const Tensor& x) {
  const auto s = VaeSlices::locate(theta.layout());
  return gaussian_encoder_forward(theta, s.enc, x.span(), nullptr);
}

struct DecoderCache {
  std::vector<double> pre, act, logits;
};

inline void decoder_logits(const ThetaVector& theta, const VaeSlices& s, std::span<const double> z,
                           DecoderCache& cache) {
  if (z.size() != s.arch.latent) throw ShapeError("vae_decode: latent length mismatch");
  cache.pre.assign(s.arch.hidden, 0.0);
  cache.act.assign(s.arch.hidden, 0.0);
  cache.logits.assign(s.arch.data_dim, 0.0);
  kernel::affine(theta.slice(s.w3), theta.slice(s.b3), z, cache.pre);
  for (std::size_t i = 0; i < s.arch.hidden; ++i) cache.act[i] = cache.pre[i] > 0.0 ? cache.pre[i] : 0.0;
  kernel::affine(theta.slice(s.w4), theta.slice(s.b4), cache.act, cache.logits);
}

/// Bernoulli means sigmoid(logits); not clamped.
inline Tensor vae_decode(const ThetaVector& theta, const Tensor& z) {
  const auto s = VaeSlices::locate(theta.layout());
  DecoderCache cache;
  decoder_logits(theta, s, z.span(), cache);
  Tensor means({s.arch.data_dim});
  for (std::size_t i = 0; i < means.size(); ++i) means[i] = sigmoid(cache.logits[i]);
  return means;
}

inline double clamp_bernoulli_mean(double m) {
  return std::clamp(m, kBernoulliClamp, 1.0 - kBernoulliClamp);
}

/// sum_i x_i log m_i + (1 - x_i) log(1 - m_i) with means clamped to [1e-6, 1 - 1e-6].
inline double bernoulli_log_likelihood(std::span<const double> x, std::span<const double> means) {
  if (x.size() != means.size()) throw ShapeError("bernoulli_log_likelihood: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double m = clamp_bernoulli_mean(means[i]);
    acc += x[i] * std::log(m) + (1.0 - x[i]) * std::log(1.0 - m);
  }
  return acc;
}

inline double bernoulli_log_likelihood(const Tensor& x, const Tensor& means) {
  return bernoulli_log_likelihood(x.span(), means.span());
}

struct ElboBreakdown {
  double recon_loglik = 0.0;
  double kl = 0.0;
  double elbo = 0.0;
};

/// Single-sample ELBO with fixed noise. When `grad` is non-empty, adds
/// d elbo / d theta into it (same layout as theta).
inline ElboBreakdown vae_elbo_with_eps(const ThetaVector& theta, std::span<const double> x,
                                       std::span<const double> eps, std::span<double> grad = {}) {
  const auto s = VaeSlices::locate(theta.layout());
  if (x.size() != s.arch.data_dim) throw ShapeError("vae_elbo: data length mismatch");
  if (eps.size() != s.arch.latent) throw ShapeError("vae_elbo: eps length mismatch");
  if (!grad.empty() && grad.size() != theta.size()) throw ShapeError("vae_elbo: gradient buffer size");

  GaussianEncoderCache enc_cache;
  const GaussianDiag q = gaussian_encoder_forward(theta, s.enc, x, grad.empty() ? nullptr : &enc_cache);
  const std::size_t dz = s.arch.latent;
  std::vector<double> sd(dz), z(dz);
  for (std::size_t i = 0; i < dz; ++i) {
    sd[i] = std::exp(0.5 * q.log_var[i]);
    z[i] = q.mean[i] + sd[i] * eps[i];
  }
  DecoderCache dec;
  decoder_logits(theta, s, z, dec);

  ElboBreakdown out;
  std::vector<double> g_logits(grad.empty() ? 0 : s.arch.data_dim);
  for (std::size_t i = 0; i < s.arch.data_dim; ++i) {
    const double raw = sigmoid(dec.logits[i]);
    const double m = clamp_bernoulli_mean(raw);
    out.recon_loglik += x[i] * std::log(m) + (1.0 - x[i]) * std::log(1.0 - m);
    if (!grad.empty()) g_logits[i] = (raw > kBernoulliClamp && raw < 1.0 - kBernoulliClamp) ? x[i] - raw : 0.0;
  }
  out.kl = kl_to_standard_normal(q);
  out.elbo = out.recon_loglik - out.kl;
  if (grad.empty()) return out;

  const auto& e = theta.layout().entries();
  auto gslice = [&](std::size_t idx) { return grad.subspan(e[idx].offset, e[idx].size()); };
  std::vector<double> g_act(s.arch.hidden), g_z(dz);
  kernel::affine_backward(theta.slice(s.w4), dec.act, g_logits, gslice(s.w4), gslice(s.b4), g_act);
  for (std::size_t i = 0; i < s.arch.hidden; ++i) {
    if (dec.pre[i] <= 0.0) g_act[i] = 0.0;
  }
  kernel::affine_backward(theta.slice(s.w3), z, g_act, gslice(s.w3), gslice(s.b3), g_z);

  std::vector<double> g_mean(dz), g_lv(dz);
  for (std::size_t i = 0; i < dz; ++i) {
    // elbo = recon(z) - kl; dz/dmean = 1, dz/dlv = 0.5 sd eps.
    g_mean[i] = g_z[i] - q.mean[i];
    g_lv[i] = g_z[i] * 0.5 * sd[i] * eps[i] - 0.5 * (std::exp(q.log_var[i]) - 1.0);
  }
  gaussian_encoder_backward(theta, s.enc, x, enc_cache, g_mean, g_lv, grad);
  return out;
}

inline ElboBreakdown vae_elbo(const ThetaVector& theta, const Tensor& x, Rng& rng) {
  const Tensor eps = sample_standard_normal(rng, vae_arch_of(theta).latent);
  return vae_elbo_with_eps(theta, x.span(), eps.span());
}

}  // namespace hypervae
