#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypervae/dataset.hpp"
#include "hypervae/discovery.hpp"
#include "hypervae/error.hpp"
#include "hypervae/hypernet.hpp"
#include "hypervae/training.hpp"
#include "hypervae/vae.hpp"

namespace hypervae {

using json = nlohmann::ordered_json;

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "idx"
  SyntheticTaskSpec synthetic;
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t downsample = 2;   // idx only: 28x28 -> 14x14
  double test_fraction = 0.25;  // synthetic only
  std::vector<int> classes;     // empty: every class present

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct EvalConfig {
  std::size_t is_samples = 1024;
  std::size_t score_samples = 8;
  double contamination = 0.05;
  double threshold_level = 0.95;
  std::string hyper_scoring = "point_posterior";  // or "task_exemplar"
  std::size_t max_eval_items = 0;                 // 0: all test items

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct DiscoveryConfig {
  BoConfig bo;
  std::size_t steps = 5;
  int holdout_class = 0;
  bool sample_u = false;

  friend bool operator==(const DiscoveryConfig&, const DiscoveryConfig&) = default;
};

struct GradcheckConfig {
  VaeArch vae{16, 8, 3};
  std::size_t enc_hidden = 6;
  std::size_t u_dim = 3;
  std::size_t dec_hidden = 4;
  std::size_t batch = 4;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_coords = 0;  // 0: every coordinate

  friend bool operator==(const GradcheckConfig&, const GradcheckConfig&) = default;
};

/// Everything a command needs; parsed strictly from JSON.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  DataConfig data;
  VaeArch vae{196, 64, 8};
  std::size_t hyper_enc_hidden = 64;
  std::size_t u_dim = 8;
  std::size_t hyper_dec_hidden = 100;
  TrainConfig train;
  EvalConfig eval;
  DiscoveryConfig discovery;
  double mdl_eps = 0.01;
  GradcheckConfig gradcheck;
  std::string vae_checkpoint;    // optional inputs for evaluation commands
  std::string hyper_checkpoint;

  HyperArch hyper_arch() const { return HyperArch{vae, hyper_enc_hidden, u_dim, hyper_dec_hidden}; }

  void validate() const {
    if (vae.data_dim == 0 || vae.hidden == 0 || vae.latent == 0 || hyper_enc_hidden == 0 || u_dim == 0 ||
        hyper_dec_hidden == 0) {
      throw ConfigError("config: all dimensions must be >= 1");
    }
    hyper_arch().validate();
    train.validate();
    if (data.source == "synthetic") {
      data.synthetic.validate();
    } else if (data.source != "idx") {
      throw ConfigError("config: data.source must be 'synthetic' or 'idx'");
    }
    if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) throw ConfigError("config: test_fraction in (0, 1)");
    if (eval.hyper_scoring != "point_posterior" && eval.hyper_scoring != "task_exemplar") {
      throw ConfigError("config: eval.hyper_scoring must be 'point_posterior' or 'task_exemplar'");
    }
    if (eval.is_samples == 0 || eval.score_samples == 0) throw ConfigError("config: sample counts must be >= 1");
    if (discovery.steps == 0) throw ConfigError("config: discovery.steps must be >= 1");
    if (!(mdl_eps > 0.0)) throw ConfigError("config: mdl_eps must be positive");
  }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

/// Reads keys from a JSON object, rejecting any key that is never read.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }
  ~StrictObject() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("config: unknown key '" + path_ + (path_.empty() ? "" : ".") + key + "'");
    }
  }
  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: bad value for '" + child(key) + "': " + e.what());
    }
  }
  const json* object(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::string family_name(SyntheticFamily f) {
  switch (f) {
    case SyntheticFamily::bars: return "bars";
    case SyntheticFamily::blobs: return "blobs";
    case SyntheticFamily::strokes: return "strokes";
  }
  return "bars";
}

inline SyntheticFamily parse_family(const std::string& s) {
  if (s == "bars") return SyntheticFamily::bars;
  if (s == "blobs") return SyntheticFamily::blobs;
  if (s == "strokes") return SyntheticFamily::strokes;
  throw ConfigError("config: unknown synthetic family '" + s + "'");
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  const auto& s = c.data.synthetic;
  const auto& t = c.train;
  const auto& bo = c.discovery.bo;
  const auto& g = c.gradcheck;
  return json{
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"data",
       {{"source", c.data.source},
        {"synthetic",
         {{"family", detail::family_name(s.family)},
          {"side", s.side},
          {"classes", s.classes},
          {"samples_per_class", s.samples_per_class},
          {"flip_prob", s.flip_prob}}},
        {"train_images", c.data.train_images},
        {"train_labels", c.data.train_labels},
        {"test_images", c.data.test_images},
        {"test_labels", c.data.test_labels},
        {"downsample", c.data.downsample},
        {"test_fraction", c.data.test_fraction},
        {"classes", c.data.classes}}},
      {"vae", {{"data_dim", c.vae.data_dim}, {"hidden", c.vae.hidden}, {"latent", c.vae.latent}}},
      {"hyper", {{"enc_hidden", c.hyper_enc_hidden}, {"u_dim", c.u_dim}, {"dec_hidden", c.hyper_dec_hidden}}},
      {"train",
       {{"beta1", t.beta1},
        {"beta2", t.beta2},
        {"learning_rate", t.learning_rate},
        {"adam_eps", t.adam_eps},
        {"batch_size", t.batch_size},
        {"max_iters", t.max_iters},
        {"k", t.k},
        {"log_every", t.log_every},
        {"early_stop", t.early_stop},
        {"early_stop_window", t.early_stop_window},
        {"early_stop_tol", t.early_stop_tol},
        {"record_wallclock", t.record_wallclock}}},
      {"eval",
       {{"is_samples", c.eval.is_samples},
        {"score_samples", c.eval.score_samples},
        {"contamination", c.eval.contamination},
        {"threshold_level", c.eval.threshold_level},
        {"hyper_scoring", c.eval.hyper_scoring},
        {"max_eval_items", c.eval.max_eval_items}}},
      {"discovery",
       {{"steps", c.discovery.steps},
        {"holdout_class", c.discovery.holdout_class},
        {"sample_u", c.discovery.sample_u},
        {"bo",
         {{"lower", bo.lower},
          {"upper", bo.upper},
          {"max_iters", bo.max_iters},
          {"init_points", bo.init_points},
          {"refit_every", bo.refit_every},
          {"candidates", bo.candidates},
          {"refine_starts", bo.refine_starts},
          {"noise_var", bo.noise_var}}}}},
      {"mdl", {{"eps", c.mdl_eps}}},
      {"gradcheck",
       {{"data_dim", g.vae.data_dim},
        {"hidden", g.vae.hidden},
        {"latent", g.vae.latent},
        {"enc_hidden", g.enc_hidden},
        {"u_dim", g.u_dim},
        {"dec_hidden", g.dec_hidden},
        {"batch", g.batch},
        {"step", g.step},
        {"tolerance", g.tolerance},
        {"max_coords", g.max_coords}}},
      {"vae_checkpoint", c.vae_checkpoint},
      {"hyper_checkpoint", c.hyper_checkpoint},
  };
}

/// Parses a config; missing keys keep their defaults, unknown keys are fatal.
inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  {
    detail::StrictObject root(j, "");
    root.get("seed", c.seed);
    root.get("output_dir", c.output_dir);
    root.get("vae_checkpoint", c.vae_checkpoint);
    root.get("hyper_checkpoint", c.hyper_checkpoint);
    if (const json* d = root.object("data")) {
      detail::StrictObject o(*d, "data");
      o.get("source", c.data.source);
      o.get("train_images", c.data.train_images);
      o.get("train_labels", c.data.train_labels);
      o.get("test_images", c.data.test_images);
      o.get("test_labels", c.data.test_labels);
      o.get("downsample", c.data.downsample);
      o.get("test_fraction", c.data.test_fraction);
      o.get("classes", c.data.classes);
      if (const json* s = o.object("synthetic")) {
        detail::StrictObject so(*s, "data.synthetic");
        std::string family = detail::family_name(c.data.synthetic.family);
        so.get("family", family);
        c.data.synthetic.family = detail::parse_family(family);
        so.get("side", c.data.synthetic.side);
        so.get("classes", c.data.synthetic.classes);
        so.get("samples_per_class", c.data.synthetic.samples_per_class);
        so.get("flip_prob", c.data.synthetic.flip_prob);
      }
    }
    if (const json* v = root.object("vae")) {
      detail::StrictObject o(*v, "vae");
      o.get("data_dim", c.vae.data_dim);
      o.get("hidden", c.vae.hidden);
      o.get("latent", c.vae.latent);
    }
    if (const json* h = root.object("hyper")) {
      detail::StrictObject o(*h, "hyper");
      o.get("enc_hidden", c.hyper_enc_hidden);
      o.get("u_dim", c.u_dim);
      o.get("dec_hidden", c.hyper_dec_hidden);
    }
    if (const json* t = root.object("train")) {
      detail::StrictObject o(*t, "train");
      o.get("beta1", c.train.beta1);
      o.get("beta2", c.train.beta2);
      o.get("learning_rate", c.train.learning_rate);
      o.get("adam_eps", c.train.adam_eps);
      o.get("batch_size", c.train.batch_size);
      o.get("max_iters", c.train.max_iters);
      o.get("k", c.train.k);
      o.get("log_every", c.train.log_every);
      o.get("early_stop", c.train.early_stop);
      o.get("early_stop_window", c.train.early_stop_window);
      o.get("early_stop_tol", c.train.early_stop_tol);
      o.get("record_wallclock", c.train.record_wallclock);
    }
    if (const json* e = root.object("eval")) {
      detail::StrictObject o(*e, "eval");
      o.get("is_samples", c.eval.is_samples);
      o.get("score_samples", c.eval.score_samples);
      o.get("contamination", c.eval.contamination);
      o.get("threshold_level", c.eval.threshold_level);
      o.get("hyper_scoring", c.eval.hyper_scoring);
      o.get("max_eval_items", c.eval.max_eval_items);
    }
    if (const json* d = root.object("discovery")) {
      detail::StrictObject o(*d, "discovery");
      o.get("steps", c.discovery.steps);
      o.get("holdout_class", c.discovery.holdout_class);
      o.get("sample_u", c.discovery.sample_u);
      if (const json* b = o.object("bo")) {
        detail::StrictObject bo(*b, "discovery.bo");
        bo.get("lower", c.discovery.bo.lower);
        bo.get("upper", c.discovery.bo.upper);
        bo.get("max_iters", c.discovery.bo.max_iters);
        bo.get("init_points", c.discovery.bo.init_points);
        bo.get("refit_every", c.discovery.bo.refit_every);
        bo.get("candidates", c.discovery.bo.candidates);
        bo.get("refine_starts", c.discovery.bo.refine_starts);
        bo.get("noise_var", c.discovery.bo.noise_var);
      }
    }
    if (const json* m = root.object("mdl")) {
      detail::StrictObject o(*m, "mdl");
      o.get("eps", c.mdl_eps);
    }
    if (const json* g = root.object("gradcheck")) {
      detail::StrictObject o(*g, "gradcheck");
      o.get("data_dim", c.gradcheck.vae.data_dim);
      o.get("hidden", c.gradcheck.vae.hidden);
      o.get("latent", c.gradcheck.vae.latent);
      o.get("enc_hidden", c.gradcheck.enc_hidden);
      o.get("u_dim", c.gradcheck.u_dim);
      o.get("dec_hidden", c.gradcheck.dec_hidden);
      o.get("batch", c.gradcheck.batch);
      o.get("step", c.gradcheck.step);
      o.get("tolerance", c.gradcheck.tolerance);
      o.get("max_coords", c.gradcheck.max_coords);
    }
  }
  c.train.seed = c.seed;
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

inline std::string serialize_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace hypervae
