#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "hypervae/hypervae.hpp"

using namespace hypervae;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hypervae_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<unsigned char> be32(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
          static_cast<unsigned char>(v)};
}

std::vector<unsigned char> cat(std::initializer_list<std::vector<unsigned char>> parts) {
  std::vector<unsigned char> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

// Two 2x2 images: pixels 0, 255, 128, 127 and 255, 0, 0, 200; labels 3 and 7.
std::vector<unsigned char> fixture_images() {
  return cat({be32(0x803), be32(2), be32(2), be32(2), {0, 255, 128, 127, 255, 0, 0, 200}});
}
std::vector<unsigned char> fixture_labels() { return cat({be32(0x801), be32(2), {3, 7}}); }

void write_pair(const fs::path& dir, const std::vector<unsigned char>& img, const std::vector<unsigned char>& lab) {
  detail::write_file((dir / "img").string(), img);
  detail::write_file((dir / "lab").string(), lab);
}

TaskDataset load_pair(const fs::path& dir) { return load_idx((dir / "img").string(), (dir / "lab").string()); }

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.seed = 5;
  c.output_dir = out.string();
  c.data.synthetic.side = 8;
  c.data.synthetic.classes = 3;
  c.data.synthetic.samples_per_class = 40;
  c.vae = {64, 8, 2};
  c.hyper_enc_hidden = 8;
  c.u_dim = 2;
  c.hyper_dec_hidden = 4;
  c.train.max_iters = 20;
  c.train.batch_size = 8;
  c.train.log_every = 5;
  c.eval.is_samples = 8;
  c.eval.score_samples = 2;
  c.eval.contamination = 0.1;
  c.eval.max_eval_items = 4;
  c.discovery.steps = 2;
  c.discovery.bo.max_iters = 12;
  c.discovery.bo.candidates = 16;
  c.discovery.bo.refine_starts = 2;
  c.train.seed = c.seed;
  return c;
}

std::vector<std::string> csv_names(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".csv") names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

int shell(const std::string& cmd) {
  const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

const std::string kCli = HYPERVAE_CLI_PATH;

}  // namespace

TEST(Idx, HandFixtureDecodesExactly) {
  const fs::path d = scratch("idx_fixture");
  write_pair(d, fixture_images(), fixture_labels());
  const TaskDataset ds = load_pair(d);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.rows, 2u);
  EXPECT_EQ(ds.cols, 2u);
  EXPECT_EQ(ds.items[0].values(), (std::vector<double>{0, 1, 1, 0}));
  EXPECT_EQ(ds.items[1].values(), (std::vector<double>{1, 0, 0, 1}));
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 7}));
}

TEST(Idx, RoundTripIsIdentity) {
  const fs::path d = scratch("idx_roundtrip");
  write_pair(d, fixture_images(), fixture_labels());
  const TaskDataset ds = load_pair(d);
  const fs::path d2 = scratch("idx_roundtrip2");
  write_idx(ds, (d2 / "img").string(), (d2 / "lab").string());
  const TaskDataset again = load_pair(d2);
  EXPECT_EQ(again.labels, ds.labels);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_TRUE(again.items[i] == ds.items[i]);
  EXPECT_EQ(detail::read_file((d2 / "lab").string()), fixture_labels());
}

TEST(Idx, CorruptCorpusIsRejected) {
  const auto img = fixture_images(), lab = fixture_labels();
  auto with = [](std::vector<unsigned char> b, std::size_t at, std::vector<unsigned char> v) {
    std::copy(v.begin(), v.end(), b.begin() + static_cast<long>(at));
    return b;
  };
  const std::vector<std::pair<std::string, std::pair<std::vector<unsigned char>, std::vector<unsigned char>>>> corpus{
      {"image magic", {with(img, 0, be32(0x801)), lab}},
      {"label magic", {img, with(lab, 0, be32(0x803))}},
      {"count mismatch", {img, cat({be32(0x801), be32(3), {3, 7, 1}})}},
      {"truncated payload", {std::vector<unsigned char>(img.begin(), img.end() - 1), lab}},
      {"truncated header", {std::vector<unsigned char>(img.begin(), img.begin() + 10), lab}},
      {"trailing bytes", {cat({img, {9}}), lab}},
      {"short labels", {img, std::vector<unsigned char>(lab.begin(), lab.end() - 1)}},
      {"zero rows", {with(img, 8, be32(0)), lab}},
      {"dim overflow", {with(with(img, 8, be32(0x00100000)), 12, be32(0x00100000)), lab}},
      {"count overflow", {with(img, 4, be32(0xffffffffu)), with(lab, 4, be32(0xffffffffu))}},
      {"empty", {{}, {}}},
  };
  for (const auto& [name, files] : corpus) {
    const fs::path d = scratch("idx_corrupt");
    write_pair(d, files.first, files.second);
    EXPECT_THROW(load_pair(d), FormatError) << name;
  }
  EXPECT_THROW(load_idx("/nonexistent/img", "/nonexistent/lab"), FormatError);
}

TEST(Downsample, Cases) {
  EXPECT_EQ(downsample(Tensor({16}), 4, 2).values(), std::vector<double>(4, 0.0));
  Tensor one({36});
  one[2 * 6 + 5] = 1.0;
  const Tensor pooled = downsample(one, 6, 3);
  EXPECT_EQ(pooled.values(), (std::vector<double>{0, 1, 0, 0}));
  Tensor checker({16});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) checker[r * 4 + c] = (r + c) % 2 ? 1.0 : 0.0;
  EXPECT_EQ(downsample(checker, 4, 2).values(), std::vector<double>(4, 1.0));
  EXPECT_THROW(downsample(checker, 4, 3), ShapeError);
  EXPECT_THROW(downsample(checker, 5, 5), ShapeError);
  TaskDataset ds;
  ds.rows = ds.cols = 4;
  ds.push(checker, 2);
  const TaskDataset small = downsample(ds, 2);
  EXPECT_EQ(small.rows, 2u);
  EXPECT_EQ(small.labels, (std::vector<int>{2}));
}

TEST(Synthetic, BarsWithoutNoiseStayOnTemplate) {
  SyntheticTaskSpec spec;
  spec.flip_prob = 0.0;
  spec.samples_per_class = 50;
  Rng rng(1);
  const auto tasks = generate_synthetic_tasks(spec, rng);
  ASSERT_EQ(tasks.size(), 6u);
  for (std::size_t c = 0; c < tasks.size(); ++c) {
    const Tensor tmpl = bars_template(spec.side, c);
    for (const auto& x : tasks[c].items) {
      double on = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] == 1.0) EXPECT_EQ(tmpl[i], 1.0);
        on += x[i];
      }
      EXPECT_GT(on, 0.0);
    }
    for (int label : tasks[c].labels) EXPECT_EQ(label, static_cast<int>(c));
  }
}

TEST(Synthetic, DeterministicAndValidated) {
  for (auto family : {SyntheticFamily::bars, SyntheticFamily::blobs, SyntheticFamily::strokes}) {
    SyntheticTaskSpec spec;
    spec.family = family;
    spec.samples_per_class = 10;
    Rng a(9), b(9);
    const auto ta = generate_synthetic_tasks(spec, a), tb = generate_synthetic_tasks(spec, b);
    for (std::size_t c = 0; c < ta.size(); ++c)
      for (std::size_t i = 0; i < ta[c].size(); ++i) EXPECT_TRUE(ta[c].items[i] == tb[c].items[i]);
  }
  SyntheticTaskSpec bad;
  bad.side = 3;
  Rng rng(1);
  EXPECT_THROW(generate_synthetic_tasks(bad, rng), ConfigError);
  bad = SyntheticTaskSpec{};
  bad.flip_prob = 0.5;
  EXPECT_THROW(generate_synthetic_tasks(bad, rng), ConfigError);
}

TEST(Synthetic, ClassesAreSeparatedInHamming) {
  for (auto family : {SyntheticFamily::bars, SyntheticFamily::blobs, SyntheticFamily::strokes}) {
    for (double flip : {0.0, 0.05, 0.1}) {
      SyntheticTaskSpec spec;
      spec.family = family;
      spec.flip_prob = flip;
      spec.samples_per_class = 30;
      Rng rng(4);
      const auto tasks = generate_synthetic_tasks(spec, rng);
      double intra = 0, inter = 0, n_intra = 0, n_inter = 0;
      for (std::size_t a = 0; a < tasks.size(); ++a)
        for (std::size_t b = a; b < tasks.size(); ++b)
          for (std::size_t i = 0; i < 30; ++i)
            for (std::size_t j = 0; j < 30; ++j) {
              if (a == b && j <= i) continue;
              const double h = static_cast<double>(hamming_distance(tasks[a].items[i], tasks[b].items[j]));
              (a == b ? intra : inter) += h;
              (a == b ? n_intra : n_inter) += 1;
            }
      EXPECT_GT(inter / n_inter, intra / n_intra) << static_cast<int>(family) << " flip " << flip;
    }
  }
}

TEST(Config, RoundTrip) {
  const ExperimentConfig d;
  EXPECT_EQ(parse_config(serialize_config(d)), d);
  ExperimentConfig c = tiny_config("/tmp/x");
  c.data.synthetic.family = SyntheticFamily::strokes;
  c.data.classes = {0, 2};
  c.eval.hyper_scoring = "task_exemplar";
  c.discovery.sample_u = true;
  c.mdl_eps = 0.125;
  c.train.learning_rate = 1.0 / 3.0;
  EXPECT_EQ(parse_config(serialize_config(c)), c);
  EXPECT_EQ(serialize_config(parse_config(serialize_config(c))), serialize_config(c));
}

TEST(Config, StrictValidation) {
  EXPECT_THROW(parse_config(R"({"sed": 1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"train": {"learning_rte": 0.1}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"discovery": {"bo": {"iters": 3}}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"vae": {"latent": 0}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"hyper": {"u_dim": 0}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"train": {"max_iters": "many"}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"train": 3})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"data": {"synthetic": {"family": "waves"}}})"), ConfigError);
  EXPECT_THROW(parse_config("{ not json"), ConfigError);
  const ExperimentConfig c = parse_config(R"({"seed": 42, "train": {"max_iters": 7}})");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.train.seed, 42u);
  EXPECT_EQ(c.train.max_iters, 7u);
  EXPECT_EQ(c.vae, (VaeArch{196, 64, 8}));
}

TEST(Io, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Io, PgmGridLayout) {
  const std::vector<Tensor> imgs{Tensor({4}, 1.0), Tensor({4}), Tensor({4}, 0.5)};
  const std::string pgm = pgm_grid(imgs, 2, 2);
  const std::string header = "P5\n7 7\n255\n";
  ASSERT_EQ(pgm.substr(0, header.size()), header);
  const std::string px = pgm.substr(header.size());
  ASSERT_EQ(px.size(), 49u);
  auto at = [&](std::size_t r, std::size_t c) { return static_cast<unsigned char>(px[r * 7 + c]); };
  EXPECT_EQ(at(0, 0), 128);
  EXPECT_EQ(at(1, 1), 255);
  EXPECT_EQ(at(2, 2), 255);
  EXPECT_EQ(at(1, 4), 0);
  EXPECT_EQ(at(4, 1), 128);  // 127.5 rounds away from zero
  EXPECT_EQ(at(4, 4), 128);  // empty cell keeps the gutter gray
  EXPECT_THROW(pgm_grid({Tensor({3})}, 2, 1), ShapeError);
}

TEST(Commands, GradcheckDefaultPasses) {
  ExperimentConfig c;
  c.output_dir = scratch("gradcheck").string();
  std::ostringstream log;
  EXPECT_EQ(run_command("gradcheck", c, log), 0);
  const std::string csv = read_text_file((fs::path(c.output_dir) / "gradcheck.csv").string());
  for (const char* comp : {"dense_layer,", "matrix_layer,", "vae_elbo,", "hypervae_k1,"}) {
    const auto at = csv.find(comp);
    ASSERT_NE(at, std::string::npos) << comp;
    const std::string line = csv.substr(at, csv.find('\n', at) - at);
    EXPECT_EQ(line.back(), '1') << line;
    EXPECT_LT(std::stod(line.substr(line.find(',') + 1)), 1e-4) << line;
  }
  EXPECT_TRUE(verify_manifest((fs::path(c.output_dir) / "manifest.json").string()).empty());
}

TEST(Commands, UnknownCommandIsAnError) {
  ExperimentConfig c;
  c.output_dir = scratch("unknown").string();
  EXPECT_THROW(run_command("train-everything", c), ConfigError);
  EXPECT_EQ(command_names().size(), 7u);
  EXPECT_FALSE(is_command("rerun"));
}

TEST(Commands, ManifestRerunReproducesCsvs) {
  for (const std::string cmd : {"train-hypervae", "outlier", "discover", "mdl-report", "eval-density", "train-vae"}) {
    const fs::path a = scratch("rerun_a"), b = scratch("rerun_b");
    std::ostringstream log;
    ASSERT_EQ(run_command(cmd, tiny_config(a), log), 0) << cmd;
    const fs::path manifest = a / "manifest.json";
    EXPECT_TRUE(verify_manifest(manifest.string()).empty()) << cmd;
    const ManifestInfo info = read_manifest(manifest.string());
    EXPECT_EQ(info.command, cmd);
    EXPECT_EQ(info.config, tiny_config(a));
    ASSERT_EQ(rerun_manifest(manifest.string(), b.string(), log), 0);
    const auto names = csv_names(a);
    ASSERT_FALSE(names.empty()) << cmd;
    EXPECT_EQ(names, csv_names(b));
    for (const auto& n : names) {
      EXPECT_EQ(read_text_file((a / n).string()), read_text_file((b / n).string())) << cmd << " " << n;
    }
  }
}

TEST(Commands, OutputSchemas) {
  const fs::path a = scratch("schemas");
  std::ostringstream log;
  run_command("outlier", tiny_config(a), log);
  const std::string metrics = read_text_file((a / "metrics.csv").string());
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')), "task_id,model,auc,fpr,fnr,precision,nll_mean,kl_mean,seed");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 1 + 3 * 2);
  run_command("mdl-report", tiny_config(a), log);
  const std::string cl = read_text_file((a / "code_lengths.csv").string());
  EXPECT_EQ(cl.substr(0, cl.find('\n')), "run_id,data_nats,kl_nats,total_nats,total_bits,eps");
  run_command("discover", tiny_config(a), log);
  const std::string trace = read_text_file((a / "discovery_hyper_iterative.csv").string());
  EXPECT_EQ(trace.substr(0, trace.find('\n')), "step,bo_iter,distance,best_distance,u_norm");
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 1 + 2 * 12);
}

TEST(Commands, FailedRunIsMarkedInManifest) {
  const fs::path a = scratch("failed");
  ExperimentConfig c = tiny_config(a);
  c.vae.data_dim = 65;
  std::ostringstream log;
  EXPECT_THROW(run_command("train-vae", c, log), ConfigError);
  const auto m = json::parse(read_text_file((a / "manifest.json").string()));
  EXPECT_EQ(m.at("status"), "failed");
  EXPECT_NE(m.at("error").get<std::string>().find("data_dim"), std::string::npos);
}

TEST(Cli, ExitCodesAndManifestRerun) {
  EXPECT_NE(shell(kCli + " frobnicate"), 0);
  EXPECT_NE(shell(kCli), 0);
  EXPECT_EQ(shell(kCli + " --help"), 0);
  EXPECT_EQ(shell(kCli + " print-config"), 0);

  const fs::path d = scratch("cli");
  detail::write_file((d / "cfg.json").string(), [] {
    const std::string s = serialize_config(tiny_config("unused"));
    return std::vector<unsigned char>(s.begin(), s.end());
  }());
  EXPECT_EQ(shell(kCli + " gradcheck -o " + (d / "g").string()), 0);
  EXPECT_EQ(shell(kCli + " mdl-report -c " + (d / "cfg.json").string() + " -o " + (d / "m1").string()), 0);
  EXPECT_EQ(shell(kCli + " rerun " + (d / "m1" / "manifest.json").string() + " -o " + (d / "m2").string()), 0);
  EXPECT_EQ(read_text_file((d / "m1" / "code_lengths.csv").string()), read_text_file((d / "m2" / "code_lengths.csv").string()));
  EXPECT_EQ(shell(kCli + " verify " + (d / "m1" / "manifest.json").string()), 0);
  // A manifest passed as a config must match the subcommand.
  EXPECT_EQ(shell(kCli + " outlier -c " + (d / "m1" / "manifest.json").string()), 2);
  EXPECT_EQ(shell(kCli + " mdl-report -c " + (d / "m1" / "manifest.json").string() + " -o " + (d / "m3").string()), 0);
  EXPECT_EQ(read_text_file((d / "m1" / "code_lengths.csv").string()), read_text_file((d / "m3" / "code_lengths.csv").string()));

  detail::write_file((d / "bad.json").string(), {'{', '"', 'x', '"', ':', '1', '}'});
  EXPECT_EQ(shell(kCli + " train-vae -c " + (d / "bad.json").string()), 2);

  {
    std::ofstream f(d / "m1" / "code_lengths.csv", std::ios::app);
    f << "tampered\n";
  }
  EXPECT_EQ(shell(kCli + " verify " + (d / "m1" / "manifest.json").string()), 1);
}
