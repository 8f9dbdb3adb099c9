// Command-line entry point for training, evaluation and discovery runs.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "hypervae/hypervae.hpp"

namespace {

hypervae::ExperimentConfig resolve_config(const std::string& command, const std::string& path) {
  if (path.empty()) return hypervae::ExperimentConfig{};
  const auto j = hypervae::json::parse(hypervae::read_text_file(path));
  if (j.is_object() && j.contains("manifest_version")) {
    const auto info = hypervae::read_manifest(path);
    if (info.command != command) {
      throw hypervae::ConfigError("manifest records command '" + info.command + "', not '" + command + "'");
    }
    return info.config;
  }
  return hypervae::config_from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HyperVAE: hyper-level VAE training, MDL accounting, evaluation and discovery"};
  app.require_subcommand(1);

  std::string config_path, out_dir, manifest_path;
  std::optional<std::uint64_t> seed;

  for (const auto& name : hypervae::command_names()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " pipeline");
    sub->add_option("-c,--config", config_path, "JSON config or manifest.json");
    sub->add_option("-o,--out", out_dir, "output directory (overrides the config)");
    sub->add_option("-s,--seed", seed, "master seed (overrides the config)");
  }
  auto* rerun = app.add_subcommand("rerun", "re-execute the command recorded in a manifest");
  rerun->add_option("manifest", manifest_path, "manifest.json")->required()->check(CLI::ExistingFile);
  rerun->add_option("-o,--out", out_dir, "output directory (default: the recorded one)");
  auto* verify = app.add_subcommand("verify", "check artifact hashes against a manifest");
  verify->add_option("manifest", manifest_path, "manifest.json")->required()->check(CLI::ExistingFile);
  auto* defaults = app.add_subcommand("print-config", "print the default configuration");

  CLI11_PARSE(app, argc, argv);

  try {
    if (defaults->parsed()) {
      std::cout << hypervae::serialize_config(hypervae::ExperimentConfig{});
      return 0;
    }
    if (rerun->parsed()) return hypervae::rerun_manifest(manifest_path, out_dir);
    if (verify->parsed()) {
      const auto bad = hypervae::verify_manifest(manifest_path);
      for (const auto& b : bad) std::cout << "MISMATCH " << b << "\n";
      if (bad.empty()) std::cout << "all artifacts match\n";
      return bad.empty() ? 0 : 1;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    hypervae::ExperimentConfig cfg = resolve_config(command, config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (seed) {
      cfg.seed = *seed;
      cfg.train.seed = *seed;
    }
    return hypervae::run_command(command, cfg);
  } catch (const std::exception& e) {
    std::cerr << "hypervae: error: " << e.what() << "\n";
    return 2;
  }
}
