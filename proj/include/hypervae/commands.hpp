#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "hypervae/checkpoint.hpp"
#include "hypervae/config.hpp"
#include "hypervae/dataset.hpp"
#include "hypervae/discovery.hpp"
#include "hypervae/evaluation.hpp"
#include "hypervae/gradcheck_suite.hpp"
#include "hypervae/io.hpp"
#include "hypervae/mdl.hpp"
#include "hypervae/training.hpp"

namespace hypervae {

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"train-vae", "train-hypervae", "eval-density", "outlier",
                                              "discover",  "mdl-report",     "gradcheck"};
  return names;
}

inline bool is_command(const std::string& name) {
  const auto& n = command_names();
  return std::find(n.begin(), n.end(), name) != n.end();
}

/// Train/test splits with one TaskDataset per class, ordered by class id.
struct TaskData {
  std::vector<TaskDataset> train;
  std::vector<TaskDataset> test;
  std::size_t side = 0;

  TaskDataset train_pool() const { return merge_tasks(train); }
  TaskDataset test_pool() const { return merge_tasks(test); }
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) { return Rng(seed).fork(tag).seed(); }

namespace detail {

inline std::vector<TaskDataset> split_by_class(const TaskDataset& pool, const std::vector<int>& classes) {
  std::vector<TaskDataset> out;
  for (int c : classes) out.push_back(pool.filter(c));
  return out;
}

inline std::vector<int> classes_present(const TaskDataset& pool) {
  std::vector<int> c(pool.labels);
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

}  // namespace detail

inline TaskData load_task_data(const ExperimentConfig& cfg) {
  TaskData data;
  if (cfg.data.source == "synthetic") {
    Rng rng(derive_seed(cfg.seed, 1));
    auto tasks = generate_synthetic_tasks(cfg.data.synthetic, rng);
    for (auto& t : tasks) {
      if (!cfg.data.classes.empty() &&
          std::find(cfg.data.classes.begin(), cfg.data.classes.end(), t.task_id) == cfg.data.classes.end()) {
        continue;
      }
      const auto n = t.size();
      const auto n_test = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::llround(static_cast<double>(n) * cfg.data.test_fraction)), 1, n - 1);
      TaskDataset tr, te;
      tr.task_id = te.task_id = t.task_id;
      tr.rows = te.rows = t.rows;
      tr.cols = te.cols = t.cols;
      for (std::size_t i = 0; i < n; ++i) (i < n - n_test ? tr : te).push(t.items[i], t.labels[i]);
      data.train.push_back(std::move(tr));
      data.test.push_back(std::move(te));
    }
    data.side = cfg.data.synthetic.side;
  } else {
    TaskDataset train = load_idx(cfg.data.train_images, cfg.data.train_labels);
    TaskDataset test = load_idx(cfg.data.test_images, cfg.data.test_labels);
    if (cfg.data.downsample > 1) {
      train = downsample(train, cfg.data.downsample);
      test = downsample(test, cfg.data.downsample);
    }
    const auto classes = cfg.data.classes.empty() ? detail::classes_present(train) : cfg.data.classes;
    data.train = detail::split_by_class(train, classes);
    data.test = detail::split_by_class(test, classes);
    data.side = train.rows;
  }
  if (data.train.empty()) throw ConfigError("data: no classes selected");
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    if (data.train[i].size() == 0 || data.test[i].size() == 0) {
      throw ConfigError("data: class " + std::to_string(data.train[i].task_id) + " has an empty split");
    }
  }
  if (data.train.front().data_dim() != cfg.vae.data_dim) {
    throw ConfigError("config: vae.data_dim " + std::to_string(cfg.vae.data_dim) + " does not match data (" +
                      std::to_string(data.train.front().data_dim()) + ")");
  }
  return data;
}

/// Theta decoded at the mean of the mixture posterior q(u | D) built from up
/// to `k` items of the task.
inline ThetaVector task_theta(const HyperParams& hp, const std::vector<Tensor>& items, std::size_t k) {
  if (items.empty()) throw ShapeError("task_theta: empty task");
  const std::size_t n = std::min(k, items.size());
  const auto q = build_mixture(hp, std::vector<Tensor>(items.begin(), items.begin() + static_cast<long>(n)));
  Tensor mean({hp.arch().u_dim});
  for (const auto& c : q.components) {
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += c.mean[i] / static_cast<double>(q.size());
  }
  return hyper_decode(hp, mean);
}

class CommandRunner {
 public:
  CommandRunner(std::string command, ExperimentConfig cfg, std::ostream& log)
      : command_(std::move(command)), cfg_(std::move(cfg)), log_(log), out_(cfg_.output_dir) {}

  /// Runs the command and writes manifest.json. Returns the exit status;
  /// module errors propagate after the manifest is marked failed.
  int run() {
    int status = 0;
    try {
      if (command_ == "train-vae") train_vae_cmd();
      else if (command_ == "train-hypervae") train_hypervae_cmd();
      else if (command_ == "eval-density") eval_density_cmd();
      else if (command_ == "outlier") outlier_cmd();
      else if (command_ == "discover") discover_cmd();
      else if (command_ == "mdl-report") mdl_report_cmd();
      else if (command_ == "gradcheck") status = gradcheck_cmd();
      else throw ConfigError("unknown command '" + command_ + "'");
    } catch (const std::exception& e) {
      write_manifest("failed", e.what(), 1);
      throw;
    }
    write_manifest("complete", "", status);
    return status;
  }

 private:
  TrainConfig train_config(std::uint64_t tag) const {
    TrainConfig t = cfg_.train;
    t.seed = derive_seed(cfg_.seed, tag);
    return t;
  }

  std::vector<std::string> trace_rows(const TrainTrace& trace, const std::string& model) const {
    std::vector<std::string> rows;
    for (const auto& r : trace.rows) rows.push_back(model + "," + trace_csv_row(r));
    return rows;
  }

  std::string trace_header() const { return std::string("model,") + trace_csv_header(); }

  std::vector<Tensor> eval_items(const TaskDataset& t) const {
    const std::size_t n = cfg_.eval.max_eval_items ? std::min(cfg_.eval.max_eval_items, t.size()) : t.size();
    return {t.items.begin(), t.items.begin() + static_cast<long>(n)};
  }

  ThetaVector fit_vae(const TaskDataset& task, std::uint64_t tag, const std::string& name,
                      std::vector<std::string>& trace) {
    if (!cfg_.vae_checkpoint.empty()) {
      Model m = load_checkpoint(cfg_.vae_checkpoint);
      if (!std::holds_alternative<ThetaVector>(m)) throw FormatError("vae_checkpoint is not a VAE checkpoint");
      return std::get<ThetaVector>(std::move(m));
    }
    log_ << "[" << command_ << "] training " << name << " on " << task.size() << " items\n";
    auto r = train_vae(task, cfg_.vae, train_config(tag));
    auto rows = trace_rows(r.trace, name);
    trace.insert(trace.end(), rows.begin(), rows.end());
    save_checkpoint(r.theta, out_.path(name + ".ckpt"));
    out_.adopt(name + ".ckpt");
    return std::move(r.theta);
  }

  HyperParams fit_hyper(const std::vector<TaskDataset>& tasks, std::uint64_t tag, const std::string& name,
                        std::vector<std::string>& trace) {
    if (!cfg_.hyper_checkpoint.empty()) {
      Model m = load_checkpoint(cfg_.hyper_checkpoint);
      if (!std::holds_alternative<HyperParams>(m)) throw FormatError("hyper_checkpoint is not a HyperVAE checkpoint");
      return std::get<HyperParams>(std::move(m));
    }
    log_ << "[" << command_ << "] training " << name << " on " << tasks.size() << " task(s)\n";
    auto r = train_hypervae(tasks, cfg_.hyper_arch(), train_config(tag));
    auto rows = trace_rows(r.trace, name);
    trace.insert(trace.end(), rows.begin(), rows.end());
    save_checkpoint(r.params, out_.path(name + ".ckpt"));
    out_.adopt(name + ".ckpt");
    return std::move(r.params);
  }

  std::vector<Tensor> prior_samples(const ThetaVector& theta, std::size_t n, Rng& rng) const {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(vae_decode(theta, sample_standard_normal(rng, vae_arch_of(theta).latent)));
    return out;
  }

  void train_vae_cmd() {
    const TaskData data = load_task_data(cfg_);
    std::vector<std::string> trace;
    const ThetaVector theta = fit_vae(data.train_pool(), 10, "vae", trace);
    out_.write_csv("trace.csv", trace_header(), trace);
    Rng rng(derive_seed(cfg_.seed, 11));
    out_.write("samples.pgm", pgm_grid(prior_samples(theta, 16, rng), data.side, 8));
  }

  void train_hypervae_cmd() {
    const TaskData data = load_task_data(cfg_);
    std::vector<std::string> trace;
    const HyperParams hp = fit_hyper(data.train, 20, "hypervae", trace);
    out_.write_csv("trace.csv", trace_header(), trace);
    Rng rng(derive_seed(cfg_.seed, 21));
    std::vector<Tensor> grid;
    for (const auto& t : data.train) {
      const auto s = prior_samples(task_theta(hp, t.items, cfg_.train.batch_size), 8, rng);
      grid.insert(grid.end(), s.begin(), s.end());
    }
    out_.write("samples.pgm", pgm_grid(grid, data.side, 8));
  }

  struct DensityRow {
    double nll_mean = 0.0, kl_mean = 0.0;
  };

  DensityRow density(const ThetaVector& theta, const std::vector<Tensor>& items, Rng& rng) const {
    DensityRow r;
    for (const auto& x : items) r.nll_mean += is_nll(theta, x, cfg_.eval.is_samples, rng);
    r.nll_mean /= static_cast<double>(items.size());
    r.kl_mean = posterior_kl_metric(theta, items);
    return r;
  }

  void eval_density_cmd() {
    const TaskData data = load_task_data(cfg_);
    std::vector<std::string> trace, rows;
    const HyperParams hp = fit_hyper(data.train, 30, "hypervae", trace);
    const double pixels = static_cast<double>(cfg_.vae.data_dim);
    for (std::size_t i = 0; i < data.train.size(); ++i) {
      const int id = data.train[i].task_id;
      const ThetaVector vae = fit_vae(data.train[i], 100 + static_cast<std::uint64_t>(i), "vae_task" + std::to_string(id), trace);
      const auto items = eval_items(data.test[i]);
      Rng rng(derive_seed(cfg_.seed, 200 + static_cast<std::uint64_t>(i)));
      const std::vector<std::pair<std::string, ThetaVector>> models{
          {"vae", vae}, {"hypervae", task_theta(hp, data.train[i].items, cfg_.train.batch_size)}};
      for (const auto& [name, theta] : models) {
        const DensityRow d = density(theta, items, rng);
        rows.push_back(std::to_string(id) + "," + name + "," + format_double(d.nll_mean) + "," +
                       format_double(d.nll_mean / pixels) + "," + format_double(d.kl_mean) + "," +
                       std::to_string(items.size()) + "," + std::to_string(cfg_.seed));
      }
    }
    out_.write_csv("trace.csv", trace_header(), trace);
    out_.write_csv("density.csv", "task_id,model,nll_mean,nll_per_pixel,kl_mean,items,seed", rows);
  }

  void outlier_cmd() {
    const TaskData data = load_task_data(cfg_);
    const TaskDataset train_pool = data.train_pool(), test_pool = data.test_pool();
    std::vector<std::string> trace, rows, score_rows;
    const HyperScoring mode =
        cfg_.eval.hyper_scoring == "task_exemplar" ? HyperScoring::task_exemplar : HyperScoring::point_posterior;
    for (std::size_t i = 0; i < data.train.size(); ++i) {
      const int c = data.train[i].task_id;
      Rng rng(derive_seed(cfg_.seed, 300 + static_cast<std::uint64_t>(i)));
      const OutlierTask task = build_outlier_task(train_pool, test_pool, c, cfg_.eval.contamination, rng);
      const ThetaVector vae = fit_vae(task.train, 400 + static_cast<std::uint64_t>(i), "vae_normal" + std::to_string(c), trace);
      const HyperParams hp =
          fit_hyper({task.train}, 500 + static_cast<std::uint64_t>(i), "hypervae_normal" + std::to_string(c), trace);
      const ThetaVector hyper_theta = task_theta(hp, task.train.items, cfg_.train.batch_size);
      const std::vector<std::tuple<std::string, OutlierModel, const ThetaVector*>> models{
          {"vae", VaeScorer{vae}, &vae},
          {"hypervae", HyperScorer{hp, mode, task.train.items.front()}, &hyper_theta}};
      TaskDataset normals = task.test.filter(c);
      const auto items = eval_items(normals);
      for (const auto& [name, model, theta] : models) {
        const OutlierReport rep = evaluate_outliers(model, task, rng, cfg_.eval.score_samples, cfg_.eval.threshold_level);
        const DensityRow d = density(*theta, items, rng);
        rows.push_back(std::to_string(c) + "," + name + "," + format_double(rep.auc) + "," +
                       format_double(rep.at_threshold.fpr) + "," + format_double(rep.at_threshold.fnr) + "," +
                       optional_field(rep.at_threshold.precision) + "," + format_double(d.nll_mean) + "," +
                       format_double(d.kl_mean) + "," + std::to_string(cfg_.seed));
        for (std::size_t j = 0; j < rep.test_scores.size(); ++j) {
          score_rows.push_back(std::to_string(c) + "," + name + "," + std::to_string(j) + "," +
                               (task.is_outlier[j] ? "1" : "0") + "," + format_double(rep.test_scores[j]));
        }
        log_ << "[outlier] class " << c << " " << name << " auc " << rep.auc << "\n";
      }
    }
    out_.write_csv("trace.csv", trace_header(), trace);
    out_.write_csv("metrics.csv", metrics_csv_header(), rows);
    out_.write_csv("scores.csv", "task_id,model,index,is_outlier,score", score_rows);
  }

  static std::string vector_field(const Tensor& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + format_double(v[i]);
    return s;
  }

  void discover_cmd() {
    const TaskData data = load_task_data(cfg_);
    const int h = cfg_.discovery.holdout_class;
    std::vector<TaskDataset> seen;
    const TaskDataset* held = nullptr;
    for (std::size_t i = 0; i < data.train.size(); ++i) {
      if (data.train[i].task_id == h) held = &data.test[i];
      else seen.push_back(data.train[i]);
    }
    if (!held) throw ConfigError("discovery: holdout class " + std::to_string(h) + " is not in the data");
    if (seen.empty()) throw ConfigError("discovery: need at least one non-holdout class");
    const Tensor target = held->items.front();

    std::vector<std::string> trace;
    const ThetaVector vae = fit_vae(merge_tasks(seen), 600, "vae", trace);
    const HyperParams hp = fit_hyper(seen, 601, "hypervae", trace);

    const BoConfig& bo = cfg_.discovery.bo;
    HyperSearchOptions opts;
    opts.sample_u = cfg_.discovery.sample_u;
    // The one-step run is the first step of the iterative run.
    Rng rng_base(derive_seed(cfg_.seed, 610)), rng_one(derive_seed(cfg_.seed, 611)), rng_iter(derive_seed(cfg_.seed, 611));
    log_ << "[discover] VAE+BO baseline\n";
    DiscoveryTrace baseline;
    baseline.steps.push_back(search_latent(vae, target, bo, rng_base));
    log_ << "[discover] one-step HyperVAE\n";
    const DiscoveryTrace one = hyper_search(hp, target, 1, bo, rng_one, opts);
    log_ << "[discover] iterative HyperVAE, T = " << cfg_.discovery.steps << "\n";
    const DiscoveryTrace iter = hyper_search(hp, target, cfg_.discovery.steps, bo, rng_iter, opts);

    const std::vector<std::pair<std::string, const DiscoveryTrace*>> runs{
        {"vae_bo", &baseline}, {"hyper_one_step", &one}, {"hyper_iterative", &iter}};
    std::vector<std::string> summary, designs;
    std::vector<Tensor> grid{target};
    for (const auto& [name, tr] : runs) {
      out_.write_csv("discovery_" + name + ".csv", discovery_csv_header(), discovery_csv_rows(*tr));
      summary.push_back(name + "," + std::to_string(h) + "," + std::to_string(tr->steps.size()) + "," +
                        format_double(tr->best_distance()) + "," + std::to_string(cfg_.seed));
      for (std::size_t t = 0; t < tr->steps.size(); ++t) {
        designs.push_back(name + "," + std::to_string(t + 1) + "," + vector_field(tr->steps[t].best_design));
        grid.push_back(tr->steps[t].best_design);
      }
    }
    out_.write_csv("trace.csv", trace_header(), trace);
    out_.write_csv("discovery_summary.csv", "method,holdout_class,steps,best_distance,seed", summary);
    out_.write_csv("designs.csv", "method,step,pixels", designs);
    out_.write("designs.pgm", pgm_grid(grid, data.side, grid.size()));
  }

  void mdl_report_cmd() {
    const TaskData data = load_task_data(cfg_);
    std::vector<std::string> trace, rows;
    const HyperParams hp = fit_hyper(data.train, 700, "hypervae", trace);
    for (std::size_t i = 0; i < data.train.size(); ++i) {
      const auto& task = data.train[i];
      const std::string id = std::to_string(task.task_id);
      const ThetaVector vae = fit_vae(task, 710 + static_cast<std::uint64_t>(i), "vae_task" + id, trace);
      Rng rng(derive_seed(cfg_.seed, 800 + static_cast<std::uint64_t>(i)));
      rows.push_back(code_length_csv_row("vae_two_part_task" + id,
                                         vae_two_part_length(vae, task.items, rng, cfg_.mdl_eps)));
      rows.push_back(code_length_csv_row("hypervae_bits_back_task" + id,
                                         bits_back_length(hp, task.items, rng, 1, cfg_.mdl_eps)));
    }
    out_.write_csv("trace.csv", trace_header(), trace);
    out_.write_csv("code_lengths.csv", code_length_csv_header(), rows);
  }

  int gradcheck_cmd() {
    const auto& g = cfg_.gradcheck;
    GradcheckSuiteConfig s;
    s.vae = g.vae;
    s.enc_hidden = g.enc_hidden;
    s.u_dim = g.u_dim;
    s.dec_hidden = g.dec_hidden;
    s.batch = g.batch;
    s.step = g.step;
    s.max_coords = g.max_coords;
    s.seed = cfg_.seed;
    int status = 0;
    std::vector<std::string> rows;
    for (const auto& c : run_gradcheck_suite(s)) {
      const bool pass = c.result.max_relative_error < g.tolerance;
      if (!pass) status = 1;
      std::cout << c.component << " max_rel_err=" << format_double(c.result.max_relative_error)
                << " checked=" << c.result.checked << (pass ? " PASS" : " FAIL") << "\n";
      rows.push_back(c.component + "," + format_double(c.result.max_relative_error) + "," +
                     std::to_string(c.result.checked) + "," + (pass ? "1" : "0"));
    }
    out_.write_csv("gradcheck.csv", "component,max_relative_error,checked,pass", rows);
    return status;
  }

  void write_manifest(const std::string& status, const std::string& error, int exit_status) {
    nlohmann::ordered_json m{{"tool", "hypervae"},
                             {"manifest_version", 1},
                             {"command", command_},
                             {"seed", cfg_.seed},
                             {"status", status},
                             {"exit_status", exit_status},
                             {"config", to_json(cfg_)},
                             {"artifacts", out_.artifacts()}};
    if (!error.empty()) m["error"] = error;
    std::ofstream f(out_.path("manifest.json"), std::ios::trunc);
    f << m.dump(2) << "\n";
  }

  std::string command_;
  ExperimentConfig cfg_;
  std::ostream& log_;
  ArtifactWriter out_;
};

/// Runs `command` with `cfg`, writing artifacts and a manifest into
/// cfg.output_dir. Throws on module errors (after marking the manifest).
inline int run_command(const std::string& command, const ExperimentConfig& cfg, std::ostream& log = std::clog) {
  if (!is_command(command)) throw ConfigError("unknown command '" + command + "'");
  cfg.validate();
  return CommandRunner(command, cfg, log).run();
}

struct ManifestInfo {
  std::string command;
  ExperimentConfig config;
  nlohmann::ordered_json artifacts;
};

inline ManifestInfo read_manifest(const std::string& path) {
  nlohmann::ordered_json m;
  try {
    m = nlohmann::ordered_json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("manifest: " + std::string(e.what()));
  }
  if (!m.contains("command") || !m.contains("config")) throw ConfigError("manifest: missing command or config");
  ManifestInfo info{m.at("command").get<std::string>(), config_from_json(m.at("config")),
                    m.value("artifacts", nlohmann::ordered_json::array())};
  return info;
}

/// Re-executes the command recorded in a manifest, optionally elsewhere.
inline int rerun_manifest(const std::string& path, const std::string& output_dir = "", std::ostream& log = std::clog) {
  ManifestInfo info = read_manifest(path);
  if (!output_dir.empty()) info.config.output_dir = output_dir;
  return run_command(info.command, info.config, log);
}

/// Names of recorded artifacts whose current content no longer matches the
/// manifest hash (missing files included).
inline std::vector<std::string> verify_manifest(const std::string& path) {
  const ManifestInfo info = read_manifest(path);
  const auto dir = std::filesystem::path(path).parent_path();
  std::vector<std::string> bad;
  for (const auto& a : info.artifacts) {
    const std::string name = a.at("path").get<std::string>();
    const auto file = dir / name;
    if (!std::filesystem::exists(file) || sha256_hex(read_text_file(file.string())) != a.at("sha256").get<std::string>()) {
      bad.push_back(name);
    }
  }
  return bad;
}

}  // namespace hypervae
