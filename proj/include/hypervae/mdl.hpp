#pragma once

#include <cmath>
#include <cstdio>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hypervae/error.hpp"
#include "hypervae/gaussian.hpp"
#include "hypervae/hypernet.hpp"
#include "hypervae/vae.hpp"

// Description lengths. Nats internally; bits = nats / ln 2.

namespace hypervae {

inline double nats_to_bits(double nats) { return nats / std::numbers::ln2; }

/// -ln P for a probability mass in (0, 1].
inline double code_length(double prob_mass) {
  if (!(prob_mass > 0.0) || prob_mass > 1.0) {
    throw NumericError("code_length: probability must lie in (0, 1]");
  }
  return -std::log(prob_mass);
}

/// Code length of a point under a density discretized into cells of side eps.
inline double discretized_code_length(double density, double eps, std::size_t dims) {
  if (!(density > 0.0)) throw NumericError("discretized_code_length: density must be positive");
  if (!(eps > 0.0)) throw NumericError("discretized_code_length: eps must be positive");
  return -std::log(density) - static_cast<double>(dims) * std::log(eps);
}

/// Same as discretized_code_length but from a log-density.
inline double discretized_code_length_log(double log_density, double eps, std::size_t dims) {
  if (!(eps > 0.0)) throw NumericError("discretized_code_length: eps must be positive");
  return -log_density - static_cast<double>(dims) * std::log(eps);
}

/// L(u) contribution of one sample: L_P(u) - L_Q(u) under a shared cell
/// size. The eps terms cancel, leaving log q(u) - log p(u).
inline double bits_back_latent_length(double log_q, double log_p, double /*eps*/) { return log_q - log_p; }

inline double two_part_length(double data_nats, double model_nats) {
  if (!std::isfinite(data_nats) || !std::isfinite(model_nats)) {
    throw NumericError("two_part_length: terms must be finite");
  }
  return data_nats + model_nats;
}

/// L(theta) under a standard-normal prior discretized at eps per coordinate.
inline double parameter_code_length(std::span<const double> theta, double eps) {
  double total = 0.0;
  for (double v : theta) total += discretized_code_length_log(-0.5 * v * v - kHalfLog2Pi, eps, 1);
  return total;
}

struct CodeLengthReport {
  double data_given_model = 0.0;
  std::optional<double> model_two_part;
  double kl_term = 0.0;
  double bitsback_total = 0.0;
  double precision_eps = 0.01;

  double total_bits() const { return nats_to_bits(bitsback_total); }
};

/// Two-part code of a dataset under a fixed VAE: -sum elbo plus L(theta).
inline CodeLengthReport vae_two_part_length(const ThetaVector& theta, const std::vector<Tensor>& data,
                                            Rng& rng, double eps = 0.01) {
  CodeLengthReport report;
  for (const auto& x : data) report.data_given_model -= vae_elbo(theta, x, rng).elbo;
  report.model_two_part = parameter_code_length(theta.values(), eps);
  report.kl_term = 0.0;
  report.bitsback_total = two_part_length(report.data_given_model, *report.model_two_part);
  report.precision_eps = eps;
  return report;
}

/// Expected bits-back code length of a minibatch under a K = 1 HyperVAE:
/// E_q[-sum_x elbo(theta(u), x)] + KL(q(u|D) || p(u)), averaged over
/// `u_samples` draws. Assembled from the public encode/decode/elbo
/// functions; consumes the generator exactly as joint_objective_k1 does
/// when u_samples == 1.
inline CodeLengthReport bits_back_length(const HyperParams& hp, const std::vector<Tensor>& minibatch, Rng& rng,
                                         std::size_t u_samples = 1, double eps = 0.01) {
  if (u_samples == 0) throw ShapeError("bits_back_length: need at least one u sample");
  CodeLengthReport report;
  report.precision_eps = eps;
  double kl_sum = 0.0;
  for (std::size_t s = 0; s < u_samples; ++s) {
    const auto noise = draw_objective_noise(rng, minibatch.size(), 1, hp.arch().u_dim, hp.arch().target.latent);
    const GaussianDiag q = hyper_encode(hp, minibatch.at(noise.members[0]));
    const Tensor u = reparameterize(q, Tensor::vector(noise.eps_u[0]));
    const ThetaVector theta = hyper_decode(hp, u);
    double data = 0.0;
    for (std::size_t b = 0; b < minibatch.size(); ++b) {
      data += -vae_elbo_with_eps(theta, minibatch[b].span(), noise.eps_z[0][b]).elbo;
    }
    report.data_given_model += data;
    kl_sum += kl_to_standard_normal(q);
  }
  report.data_given_model /= static_cast<double>(u_samples);
  report.kl_term = kl_sum / static_cast<double>(u_samples);
  report.bitsback_total = report.data_given_model + report.kl_term;
  return report;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* code_length_csv_header() { return "run_id,data_nats,kl_nats,total_nats,total_bits,eps"; }

inline std::string code_length_csv_row(const std::string& run_id, const CodeLengthReport& r) {
  return run_id + "," + format_double(r.data_given_model) + "," + format_double(r.kl_term) + "," +
         format_double(r.bitsback_total) + "," + format_double(r.total_bits()) + "," +
         format_double(r.precision_eps);
}

}  // namespace hypervae
