#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hypervae/error.hpp"
#include "hypervae/gaussian.hpp"
#include "hypervae/layers.hpp"
#include "hypervae/layout.hpp"
#include "hypervae/rng.hpp"
#include "hypervae/vae.hpp"

namespace hypervae {

/// Hyper-level model: a Gaussian encoder x_k -> u and a decoder
/// u -> dense(relu) -> r x r matrix -> one matrix layer per target slice.
struct HyperArch {
  VaeArch target;
  std::size_t enc_hidden = 64;
  std::size_t u_dim = 8;
  std::size_t dec_hidden = 100;  // reshaped to side x side; must be a perfect square

  std::size_t side() const {
    const auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dec_hidden))));
    return r;
  }
  void validate() const {
    if (enc_hidden == 0 || u_dim == 0 || dec_hidden == 0) throw ShapeError("hyper: dimensions must be >= 1");
    if (side() * side() != dec_hidden) {
      throw ShapeError("hyper: decoder hidden size " + std::to_string(dec_hidden) + " is not a perfect square");
    }
  }
  friend bool operator==(const HyperArch&, const HyperArch&) = default;
};

inline std::string generator_layer_name(const SliceEntry& target) { return "gen." + target.key(); }

inline std::shared_ptr<const ThetaLayout> make_hyper_layout(const HyperArch& arch,
                                                            const ThetaLayout& target) {
  arch.validate();
  const std::size_t r = arch.side();
  auto layout = std::make_shared<ThetaLayout>();
  layout->add("enc.hidden", "weight", arch.enc_hidden, arch.target.data_dim);
  layout->add("enc.hidden", "bias", arch.enc_hidden, 1);
  layout->add("enc.mean", "weight", arch.u_dim, arch.enc_hidden);
  layout->add("enc.mean", "bias", arch.u_dim, 1);
  layout->add("enc.logvar", "weight", arch.u_dim, arch.enc_hidden);
  layout->add("enc.logvar", "bias", arch.u_dim, 1);
  layout->add("dec.hidden", "weight", arch.dec_hidden, arch.u_dim);
  layout->add("dec.hidden", "bias", arch.dec_hidden, 1);
  for (const auto& e : target.entries()) {
    const std::string name = generator_layer_name(e);
    layout->add(name, "U", e.rows, r);
    layout->add(name, "V", r, e.cols);
    layout->add(name, "B", e.rows, e.cols);
  }
  return layout;
}

/// The hyper-parameters gamma together with the layouts they are read through.
class HyperParams {
 public:
  struct Generator {
    std::size_t u = 0, v = 0, b = 0;
  };

  HyperParams() = default;

  explicit HyperParams(const HyperArch& arch)
      : arch_(arch), target_(make_vae_layout(arch.target)),
        gamma_(make_hyper_layout(arch, *target_)) {
    index();
  }

  HyperParams(const HyperArch& arch, ThetaVector gamma)
      : arch_(arch), target_(make_vae_layout(arch.target)), gamma_(std::move(gamma)) {
    if (!(gamma_.layout() == *make_hyper_layout(arch, *target_))) {
      throw ShapeError("hyper: parameter layout does not match the architecture");
    }
    index();
  }

  const HyperArch& arch() const { return arch_; }
  const ThetaLayout& target_layout() const { return *target_; }
  const std::shared_ptr<const ThetaLayout>& target_layout_ptr() const { return target_; }
  const ThetaVector& gamma() const { return gamma_; }
  ThetaVector& gamma() { return gamma_; }
  const GaussianEncoderSlices& encoder() const { return enc_; }
  std::size_t dec_weight() const { return dec_w_; }
  std::size_t dec_bias() const { return dec_b_; }
  const std::vector<Generator>& generators() const { return gens_; }

 private:
  void index() {
    const auto& layout = gamma_.layout();
    enc_ = GaussianEncoderSlices::locate(layout, "enc");
    if (enc_.input != arch_.target.data_dim || enc_.latent != arch_.u_dim) {
      throw ShapeError("hyper: encoder dimensions do not match the architecture");
    }
    dec_w_ = layout.index_of("dec.hidden", "weight");
    dec_b_ = layout.index_of("dec.hidden", "bias");
    gens_.clear();
    for (const auto& e : target_->entries()) {
      const std::string name = generator_layer_name(e);
      gens_.push_back({layout.index_of(name, "U"), layout.index_of(name, "V"), layout.index_of(name, "B")});
    }
  }

  HyperArch arch_;
  std::shared_ptr<const ThetaLayout> target_;
  ThetaVector gamma_;
  GaussianEncoderSlices enc_;
  std::size_t dec_w_ = 0, dec_b_ = 0;
  std::vector<Generator> gens_;
};

/// Random initialization. Each B starts as a freshly initialized VAE slice so
/// that theta(u) is a usable VAE before training; U and V are scaled so that
/// U H V is a smaller perturbation around B.
inline HyperParams init_hyper_params(const HyperArch& arch, Rng& rng) {
  HyperParams hp(arch);
  ThetaVector& g = hp.gamma();
  const auto& entries = g.layout().entries();
  auto he = [&](std::size_t idx, double gain) {
    const double scale = std::sqrt(gain / static_cast<double>(entries[idx].cols));
    for (double& v : g.slice(idx)) v = scale * rng.normal();
  };
  const auto& enc = hp.encoder();
  he(enc.w1, 2.0);
  he(enc.wm, 1.0);
  he(enc.wl, 1.0);
  he(hp.dec_weight(), 2.0);

  const std::size_t r = arch.side();
  const ThetaVector target_init = init_vae_theta(arch.target, rng);
  const auto& targets = hp.target_layout().entries();
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& gen = hp.generators()[i];
    const auto src = target_init.slice(i);
    auto b = g.slice(gen.b);
    std::copy(src.begin(), src.end(), b.begin());
    const bool is_weight = targets[i].param == "weight";
    const double spread = is_weight ? 0.3 / std::sqrt(static_cast<double>(targets[i].cols)) : 0.05;
    for (double& v : g.slice(gen.u)) v = rng.normal() / std::sqrt(static_cast<double>(r));
    for (double& v : g.slice(gen.v)) v = spread * rng.normal() / std::sqrt(static_cast<double>(r));
  }
  return hp;
}

inline GaussianDiag hyper_encode(const HyperParams& hp, const Tensor& x) {
  return gaussian_encoder_forward(hp.gamma(), hp.encoder(), x.span(), nullptr);
}

struct HyperDecodeCache {
  std::vector<double> pre, act;
  std::vector<kernel::MatrixLayerCache> slices;
};

/// Deterministic theta(u).
inline ThetaVector hyper_decode(const HyperParams& hp, std::span<const double> u,
                                HyperDecodeCache* cache = nullptr) {
  const auto& arch = hp.arch();
  if (u.size() != arch.u_dim) throw ShapeError("hyper_decode: u length mismatch");
  const ThetaVector& g = hp.gamma();
  const std::size_t r = arch.side();
  std::vector<double> pre(arch.dec_hidden), act(arch.dec_hidden);
  kernel::affine(g.slice(hp.dec_weight()), g.slice(hp.dec_bias()), u, pre);
  for (std::size_t i = 0; i < pre.size(); ++i) act[i] = pre[i] > 0.0 ? pre[i] : 0.0;

  ThetaVector theta(hp.target_layout_ptr());
  const auto& targets = hp.target_layout().entries();
  if (cache) cache->slices.assign(targets.size(), {});
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& gen = hp.generators()[i];
    const auto& e = targets[i];
    kernel::matrix_layer(g.slice(gen.u), act, g.slice(gen.v), g.slice(gen.b), e.rows, r, r, e.cols,
                         Activation::identity, theta.slice(i), cache ? &cache->slices[i] : nullptr);
  }
  if (cache) {
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return theta;
}

inline ThetaVector hyper_decode(const HyperParams& hp, const Tensor& u) { return hyper_decode(hp, u.span()); }

/// Backpropagates d/d theta into gamma (accumulated) and u (overwritten).
inline void hyper_decode_backward(const HyperParams& hp, std::span<const double> u,
                                  const HyperDecodeCache& cache, std::span<const double> g_theta,
                                  std::span<double> g_gamma, std::span<double> g_u) {
  const auto& arch = hp.arch();
  const ThetaVector& g = hp.gamma();
  const std::size_t r = arch.side();
  const auto& entries = g.layout().entries();
  auto gslice = [&](std::size_t idx) { return g_gamma.subspan(entries[idx].offset, entries[idx].size()); };
  const auto& targets = hp.target_layout().entries();
  std::vector<double> g_h(arch.dec_hidden, 0.0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& gen = hp.generators()[i];
    const auto& e = targets[i];
    kernel::matrix_layer_backward(g.slice(gen.u), g.slice(gen.v), cache.slices[i],
                                  g_theta.subspan(e.offset, e.size()), e.rows, r, r, e.cols,
                                  gslice(gen.u), gslice(gen.v), gslice(gen.b), g_h);
  }
  for (std::size_t i = 0; i < g_h.size(); ++i) {
    if (cache.pre[i] <= 0.0) g_h[i] = 0.0;
  }
  kernel::affine_backward(g.slice(hp.dec_weight()), u, g_h, gslice(hp.dec_weight()),
                          gslice(hp.dec_bias()), g_u);
}

/// Uniform-weight Gaussian mixture over u.
struct MixturePosterior {
  std::vector<GaussianDiag> components;

  std::size_t size() const { return components.size(); }
  double weight() const { return 1.0 / static_cast<double>(components.size()); }
  std::size_t dims() const { return components.empty() ? 0 : components.front().dims(); }
};

inline MixturePosterior build_mixture(const HyperParams& hp, const std::vector<Tensor>& samples) {
  if (samples.empty()) throw ShapeError("build_mixture: K must be >= 1");
  MixturePosterior q;
  for (const auto& x : samples) q.components.push_back(hyper_encode(hp, x));
  return q;
}

/// Mixture from K members drawn without replacement from a minibatch.
inline MixturePosterior build_mixture(const HyperParams& hp, const std::vector<Tensor>& minibatch,
                                      std::size_t k, Rng& rng) {
  if (k == 0) throw ShapeError("build_mixture: K must be >= 1");
  if (k > minibatch.size()) {
    throw ShapeError("build_mixture: K = " + std::to_string(k) + " exceeds minibatch of " +
                     std::to_string(minibatch.size()));
  }
  std::vector<Tensor> chosen;
  for (std::size_t idx : rng.sample_without_replacement(minibatch.size(), k)) chosen.push_back(minibatch[idx]);
  return build_mixture(hp, chosen);
}

/// log sum_k (1/K) N(u; mean_k, diag exp(log_var_k)), via log-sum-exp.
inline double mixture_log_density(const MixturePosterior& q, std::span<const double> u) {
  if (q.size() == 0) throw ShapeError("mixture_log_density: empty mixture");
  std::vector<double> terms(q.size());
  for (std::size_t k = 0; k < q.size(); ++k) {
    if (q.components[k].dims() != u.size()) throw ShapeError("mixture_log_density: dimension mismatch");
    terms[k] = gaussian_log_density(u, q.components[k].mean.span(), q.components[k].log_var.span());
  }
  return log_sum_exp(terms) - std::log(static_cast<double>(q.size()));
}

inline double mixture_log_density(const MixturePosterior& q, const Tensor& u) {
  return mixture_log_density(q, u.span());
}

/// Frozen randomness of one objective evaluation: which minibatch members
/// parameterize the mixture, one eps_u per component and, per component,
/// one eps_z per minibatch item.
struct ObjectiveNoise {
  std::vector<std::size_t> members;
  std::vector<std::vector<double>> eps_u;
  std::vector<std::vector<std::vector<double>>> eps_z;
};

inline ObjectiveNoise draw_objective_noise(Rng& rng, std::size_t batch, std::size_t k,
                                           std::size_t u_dim, std::size_t z_dim) {
  if (batch == 0) throw ShapeError("objective: empty minibatch");
  if (k == 0 || k > batch) throw ShapeError("objective: K must be in [1, minibatch size]");
  ObjectiveNoise noise;
  noise.members = rng.sample_without_replacement(batch, k);
  noise.eps_u.assign(k, std::vector<double>(u_dim));
  noise.eps_z.assign(k, std::vector<std::vector<double>>(batch, std::vector<double>(z_dim)));
  for (std::size_t c = 0; c < k; ++c) {
    rng.fill_normal(noise.eps_u[c]);
    for (auto& e : noise.eps_z[c]) rng.fill_normal(e);
  }
  return noise;
}

/// Ancestral draw theta ~ q(theta | D): pick a component uniformly,
/// reparameterize u inside it, decode.
inline ThetaVector sample_theta(const HyperParams& hp, const std::vector<Tensor>& minibatch, std::size_t k,
                                Rng& rng, Tensor* u_out = nullptr) {
  if (minibatch.empty()) throw ShapeError("sample_theta: empty minibatch");
  const MixturePosterior q = build_mixture(hp, minibatch, k, rng);
  const std::size_t c = rng.index(q.size());
  const Tensor eps = sample_standard_normal(rng, hp.arch().u_dim);
  Tensor u = reparameterize(q.components[c], eps);
  ThetaVector theta = hyper_decode(hp, u.span());
  if (u_out) *u_out = std::move(u);
  return theta;
}

enum class KlMode { closed_form, density_ratio };

struct HyperObjective {
  double objective = 0.0;  // nats, to maximize
  double data_elbo = 0.0;  // sum over the minibatch of elbo(theta(u), x)
  double recon = 0.0;
  double kl_z = 0.0;
  double kl_u = 0.0;
};

/// Sum_x elbo(theta(u), x) - KL(q(u|D) || N(0, I)) for a single Gaussian
/// q(u|D) = q(u | x_k), one reparameterized u. With KlMode::density_ratio
/// the KL term is the single-sample log q(u) - log p(u). Adds the gradient
/// with respect to gamma into `grad` when it is non-empty.
inline HyperObjective joint_objective_k1(const HyperParams& hp, const std::vector<Tensor>& minibatch,
                                         const ObjectiveNoise& noise, std::span<double> grad = {},
                                         KlMode mode = KlMode::closed_form) {
  if (minibatch.empty()) throw ShapeError("objective: empty minibatch");
  if (noise.members.size() != 1) throw ShapeError("joint_objective_k1: noise must carry exactly one component");
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != hp.gamma().size()) throw ShapeError("objective: gradient buffer size");

  const Tensor& xk = minibatch.at(noise.members[0]);
  GaussianEncoderCache enc_cache;
  const GaussianDiag q = gaussian_encoder_forward(hp.gamma(), hp.encoder(), xk.span(), want_grad ? &enc_cache : nullptr);
  const std::size_t du = hp.arch().u_dim;
  const auto& eps = noise.eps_u[0];
  std::vector<double> sd(du), u(du);
  for (std::size_t i = 0; i < du; ++i) {
    sd[i] = std::exp(0.5 * q.log_var[i]);
    u[i] = q.mean[i] + sd[i] * eps[i];
  }
  HyperDecodeCache dec_cache;
  const ThetaVector theta = hyper_decode(hp, u, want_grad ? &dec_cache : nullptr);

  HyperObjective out;
  std::vector<double> g_theta(want_grad ? theta.size() : 0, 0.0);
  for (std::size_t b = 0; b < minibatch.size(); ++b) {
    const auto e = vae_elbo_with_eps(theta, minibatch[b].span(), noise.eps_z[0][b], g_theta);
    out.data_elbo += e.elbo;
    out.recon += e.recon_loglik;
    out.kl_z += e.kl;
  }
  if (mode == KlMode::closed_form) {
    out.kl_u = kl_to_standard_normal(q);
  } else {
    out.kl_u = gaussian_log_density(u, q.mean.span(), q.log_var.span()) - standard_normal_log_density(u);
  }
  out.objective = out.data_elbo - out.kl_u;
  if (!want_grad) return out;

  std::vector<double> g_u(du);
  hyper_decode_backward(hp, u, dec_cache, g_theta, grad, g_u);
  std::vector<double> g_mean(du), g_lv(du);
  for (std::size_t i = 0; i < du; ++i) {
    if (mode == KlMode::closed_form) {
      g_mean[i] = g_u[i] - q.mean[i];
      g_lv[i] = g_u[i] * 0.5 * sd[i] * eps[i] - 0.5 * (std::exp(q.log_var[i]) - 1.0);
    } else {
      // -log q(u) = 0.5 eps^2 + 0.5 lv + c along the path; +log p(u) adds -u to g_u.
      const double gu = g_u[i] - u[i];
      g_mean[i] = gu;
      g_lv[i] = gu * 0.5 * sd[i] * eps[i] + 0.5;
    }
  }
  gaussian_encoder_backward(hp.gamma(), hp.encoder(), xk.span(), enc_cache, g_mean, g_lv, grad);
  return out;
}

inline HyperObjective joint_objective_k1(const HyperParams& hp, const std::vector<Tensor>& minibatch, Rng& rng) {
  const auto noise = draw_objective_noise(rng, minibatch.size(), 1, hp.arch().u_dim, hp.arch().target.latent);
  return joint_objective_k1(hp, minibatch, noise);
}

struct ImportanceWeightedObjective {
  double objective = 0.0;
  std::vector<double> log_weights;
  std::vector<double> normalized_weights;
};

/// log (1/K) sum_k exp(sum_x elbo(theta(u_k), x) + log p(u_k) - log q(u_k | D))
/// with one u_k drawn from each mixture component. The gradient is
/// sum_k w_k d/dgamma log w_k with self-normalized weights w_k, where each
/// log-weight is differentiated along its reparameterized path.
inline ImportanceWeightedObjective importance_weighted_objective(const HyperParams& hp,
                                                                 const std::vector<Tensor>& minibatch,
                                                                 const ObjectiveNoise& noise,
                                                                 std::span<double> grad = {}) {
  if (minibatch.empty()) throw ShapeError("objective: empty minibatch");
  const std::size_t kk = noise.members.size();
  if (kk == 0) throw ShapeError("importance_weighted_objective: K must be >= 1");
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != hp.gamma().size()) throw ShapeError("objective: gradient buffer size");
  const std::size_t du = hp.arch().u_dim;

  std::vector<GaussianEncoderCache> enc_caches(kk);
  MixturePosterior q;
  for (std::size_t k = 0; k < kk; ++k) {
    q.components.push_back(gaussian_encoder_forward(hp.gamma(), hp.encoder(),
                                                    minibatch.at(noise.members[k]).span(), &enc_caches[k]));
  }
  std::vector<std::vector<double>> us(kk, std::vector<double>(du)), sds(kk, std::vector<double>(du));
  for (std::size_t k = 0; k < kk; ++k) {
    for (std::size_t i = 0; i < du; ++i) {
      sds[k][i] = std::exp(0.5 * q.components[k].log_var[i]);
      us[k][i] = q.components[k].mean[i] + sds[k][i] * noise.eps_u[k][i];
    }
  }

  ImportanceWeightedObjective out;
  out.log_weights.resize(kk);
  std::vector<HyperDecodeCache> dec_caches(want_grad ? kk : 0);
  std::vector<std::vector<double>> g_thetas(want_grad ? kk : 0);
  for (std::size_t k = 0; k < kk; ++k) {
    const ThetaVector theta = hyper_decode(hp, us[k], want_grad ? &dec_caches[k] : nullptr);
    if (want_grad) g_thetas[k].assign(theta.size(), 0.0);
    double sum_elbo = 0.0;
    for (std::size_t b = 0; b < minibatch.size(); ++b) {
      sum_elbo += vae_elbo_with_eps(theta, minibatch[b].span(), noise.eps_z[k][b],
                                    want_grad ? std::span<double>(g_thetas[k]) : std::span<double>{})
                      .elbo;
    }
    out.log_weights[k] = sum_elbo + standard_normal_log_density(us[k]) - mixture_log_density(q, us[k]);
  }
  out.objective = log_mean_exp(out.log_weights);
  out.normalized_weights = softmax_weights(out.log_weights);
  if (!want_grad) return out;

  std::vector<std::vector<double>> g_mean(kk, std::vector<double>(du, 0.0)), g_lv(kk, std::vector<double>(du, 0.0));
  std::vector<double> g_u(du), comp_log(kk);
  for (std::size_t k = 0; k < kk; ++k) {
    const double w = out.normalized_weights[k];
    std::vector<double> gth(g_thetas[k]);
    for (double& v : gth) v *= w;
    hyper_decode_backward(hp, us[k], dec_caches[k], gth, grad, g_u);
    // + w * d log p(u_k) / du
    for (std::size_t i = 0; i < du; ++i) g_u[i] -= w * us[k][i];
    // - w * d log q(u_k): responsibilities over components.
    for (std::size_t j = 0; j < kk; ++j) {
      comp_log[j] = gaussian_log_density(us[k], q.components[j].mean.span(), q.components[j].log_var.span());
    }
    const auto resp = softmax_weights(comp_log);
    for (std::size_t j = 0; j < kk; ++j) {
      const auto& cj = q.components[j];
      for (std::size_t i = 0; i < du; ++i) {
        const double prec = std::exp(-cj.log_var[i]);
        const double d = us[k][i] - cj.mean[i];
        // d log N / du = -d * prec; d/dmean = d * prec; d/dlv = 0.5 (d^2 prec - 1)
        g_u[i] += w * resp[j] * d * prec;
        g_mean[j][i] -= w * resp[j] * d * prec;
        g_lv[j][i] -= w * resp[j] * 0.5 * (d * d * prec - 1.0);
      }
    }
    for (std::size_t i = 0; i < du; ++i) {
      g_mean[k][i] += g_u[i];
      g_lv[k][i] += g_u[i] * 0.5 * sds[k][i] * noise.eps_u[k][i];
    }
  }
  for (std::size_t k = 0; k < kk; ++k) {
    gaussian_encoder_backward(hp.gamma(), hp.encoder(), minibatch.at(noise.members[k]).span(), enc_caches[k],
                              g_mean[k], g_lv[k], grad);
  }
  return out;
}

inline ImportanceWeightedObjective importance_weighted_objective(const HyperParams& hp,
                                                                 const std::vector<Tensor>& minibatch,
                                                                 std::size_t k, Rng& rng) {
  const auto noise = draw_objective_noise(rng, minibatch.size(), k, hp.arch().u_dim, hp.arch().target.latent);
  return importance_weighted_objective(hp, minibatch, noise);
}

}  // namespace hypervae
