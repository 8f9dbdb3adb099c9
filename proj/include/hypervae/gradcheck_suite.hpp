#pragma once

#include <string>
#include <vector>

#include "hypervae/gradcheck.hpp"
#include "hypervae/hypernet.hpp"
#include "hypervae/layers.hpp"
#include "hypervae/vae.hpp"

namespace hypervae {

struct GradcheckSuiteConfig {
  VaeArch vae{16, 8, 3};
  std::size_t enc_hidden = 6;
  std::size_t u_dim = 3;
  std::size_t dec_hidden = 4;
  std::size_t batch = 4;
  double step = 1e-5;
  std::size_t max_coords = 0;  // 0: every coordinate
  std::uint64_t seed = 1;
};

struct ComponentCheck {
  std::string component;
  GradCheckResult result;
};

namespace detail {

inline Tensor random_tensor(std::vector<std::size_t> shape, double scale, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.span()) v = scale * rng.normal();
  return t;
}

inline Tensor random_binary(std::size_t n, Rng& rng) {
  Tensor t({n});
  for (double& v : t.span()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  return t;
}

/// Checks a Graph's parameter gradients for the loss c . graph(input).
inline GradCheckResult check_graph(Graph& graph, const Tensor& input, const Tensor& c, double step,
                                   std::optional<std::size_t> max_coords, std::uint64_t seed) {
  const auto names = graph.parameter_names();
  std::vector<double> flat;
  for (const auto& n : names) {
    const auto s = graph.parameter(n).span();
    flat.insert(flat.end(), s.begin(), s.end());
  }
  auto loss = [&](std::span<const double> p, std::span<double> grad) {
    std::size_t at = 0;
    for (const auto& n : names) {
      Tensor& t = graph.parameter(n);
      std::copy(p.begin() + static_cast<long>(at), p.begin() + static_cast<long>(at + t.size()), t.span().begin());
      at += t.size();
    }
    const Tensor y = graph.forward(input);
    double l = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) l += c[i] * y[i];
    if (!grad.empty()) {
      const LayerGrads g = graph.backward(c.reshaped(y.shape()));
      at = 0;
      for (const auto& n : names) {
        const Tensor& gt = g.params.at(n);
        std::copy(gt.span().begin(), gt.span().end(), grad.begin() + static_cast<long>(at));
        at += gt.size();
      }
    }
    return l;
  };
  return grad_check(loss, flat, step, max_coords, seed);
}

}  // namespace detail

/// Central-difference checks of the dense layer, the matrix hyper-layer, the
/// VAE ELBO and the K = 1 HyperVAE objective, all with frozen noise.
inline std::vector<ComponentCheck> run_gradcheck_suite(const GradcheckSuiteConfig& cfg) {
  Rng rng(cfg.seed);
  std::optional<std::size_t> cap;
  if (cfg.max_coords > 0) cap = cfg.max_coords;
  std::vector<ComponentCheck> out;

  {
    Graph g;
    g.add_dense("dense", detail::random_tensor({5, 7}, 0.5, rng), detail::random_tensor({5}, 0.5, rng),
                Activation::sigmoid);
    g.add_square();
    const Tensor x = detail::random_tensor({7}, 1.0, rng);
    const Tensor c = detail::random_tensor({5}, 1.0, rng);
    out.push_back({"dense_layer", detail::check_graph(g, x, c, cfg.step, cap, cfg.seed)});
  }
  {
    Graph g;
    g.add_matrix("matrix", detail::random_tensor({6, 3}, 0.5, rng), detail::random_tensor({4, 5}, 0.5, rng),
                 detail::random_tensor({6, 5}, 0.5, rng), Activation::sigmoid);
    const Tensor h = detail::random_tensor({3, 4}, 1.0, rng);
    const Tensor c = detail::random_tensor({30}, 1.0, rng);
    out.push_back({"matrix_layer", detail::check_graph(g, h, c, cfg.step, cap, cfg.seed)});
  }

  std::vector<Tensor> batch;
  for (std::size_t b = 0; b < cfg.batch; ++b) batch.push_back(detail::random_binary(cfg.vae.data_dim, rng));
  {
    ThetaVector theta = init_vae_theta(cfg.vae, rng);
    for (double& v : theta.values()) v += 0.05 * rng.normal();
    std::vector<std::vector<double>> eps(batch.size(), std::vector<double>(cfg.vae.latent));
    for (auto& e : eps) rng.fill_normal(e);
    auto loss = [&](std::span<const double> p, std::span<double> grad) {
      std::copy(p.begin(), p.end(), theta.values().begin());
      double l = 0.0;
      for (std::size_t b = 0; b < batch.size(); ++b) l += vae_elbo_with_eps(theta, batch[b].span(), eps[b], grad).elbo;
      return l;
    };
    const std::vector<double> start(theta.values().begin(), theta.values().end());
    out.push_back({"vae_elbo", grad_check(loss, start, cfg.step, cap, cfg.seed)});
  }
  {
    const HyperArch arch{cfg.vae, cfg.enc_hidden, cfg.u_dim, cfg.dec_hidden};
    HyperParams hp = init_hyper_params(arch, rng);
    for (double& v : hp.gamma().values()) v += 0.05 * rng.normal();
    const ObjectiveNoise noise = draw_objective_noise(rng, batch.size(), 1, cfg.u_dim, cfg.vae.latent);
    auto loss = [&](std::span<const double> p, std::span<double> grad) {
      std::copy(p.begin(), p.end(), hp.gamma().values().begin());
      return joint_objective_k1(hp, batch, noise, grad).objective;
    };
    const std::vector<double> start(hp.gamma().values().begin(), hp.gamma().values().end());
    out.push_back({"hypervae_k1", grad_check(loss, start, cfg.step, cap, cfg.seed)});
  }
  return out;
}

}  // namespace hypervae
