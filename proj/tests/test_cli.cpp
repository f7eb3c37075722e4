#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "test_support.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
};

// Runs the CLI through the shell; stderr goes to `err_file` when given.
CliRun cli(const std::string& args, const fs::path& err_file = {}) {
  std::string cmd = std::string(RELFB_CLI) + " " + args;
  cmd += err_file.empty() ? " 2>/dev/null" : " 2>" + err_file.string();
  CliRun r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// A tiny corpus and model that train in seconds.
struct TinyRun {
  fs::path dir, data, config;
  TinyRun() : dir(relfb::test::temp_dir("cli")), data(dir / "data"), config(dir / "config.json") {
    const relfb::ModelConfig cfg = relfb::test::small_config();
    relfb::CorpusSpec spec = relfb::test::small_corpus(cfg, 10, 4);
    write(dir / "spec.json", relfb::corpus_spec_to_json(spec).dump());
    nlohmann::json j = relfb::config_to_json(cfg);
    j["epochs"] = 1;
    j["batch_size"] = 8;
    write(config, j.dump());
  }
};

}  // namespace

TEST(Cli, HelpDocumentsEveryFlag) {
  const std::map<std::string, std::vector<std::string>> flags = {
      {"synth-data", {"--spec", "--out"}},
      {"train", {"--config", "--data", "--out", "--epochs"}},
      {"featurize", {"--ckpt", "--wav", "--out"}},
      {"gradcheck", {"--config", "--full", "--per-tensor"}},
      {"ablate", {"--config", "--data", "--out", "--epochs"}},
      {"analyze", {"--ckpt", "--data", "--out", "--split"}},
      {"bootstrap", {"--table", "--resamples"}},
  };
  const CliRun top = cli("--help");
  EXPECT_EQ(top.code, 0);
  for (const auto& f : {"--seed", "--threads", "--version"}) EXPECT_NE(top.out.find(f), std::string::npos) << f;
  for (const auto& [cmd, list] : flags) {
    const CliRun r = cli(cmd + " --help");
    EXPECT_EQ(r.code, 0) << cmd;
    EXPECT_NE(r.out.find(cmd), std::string::npos);
    for (const auto& f : list) EXPECT_NE(r.out.find(f), std::string::npos) << cmd << ' ' << f;
  }
}

TEST(Cli, Version) {
  const CliRun r = cli("--version");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find(relfb::kVersion), std::string::npos);
}

TEST(Cli, BadFlagsExitTwo) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("train --data x").code, 2);
  EXPECT_EQ(cli("bootstrap --table /nonexistent/file.csv").code, 2);
  EXPECT_EQ(cli("train --data x --out y --bogus").code, 2);
  EXPECT_EQ(cli("--threads 0 bootstrap --table x").code, 2);
}

TEST(Cli, RuntimeErrorsExitOneWithStructuredMessage) {
  const auto dir = relfb::test::temp_dir("cli_err");
  const CliRun r = cli("train --data " + (dir / "missing").string() + " --out " + (dir / "run").string(), dir / "err");
  EXPECT_EQ(r.code, 1);
  const auto err = nlohmann::json::parse(slurp(dir / "err"));
  EXPECT_EQ(err.at("error"), "IoError");
  EXPECT_FALSE(err.at("message").get<std::string>().empty());

  write(dir / "bad.csv", "id,a,b\n");
  const CliRun b = cli("bootstrap --table " + (dir / "bad.csv").string(), dir / "err2");
  EXPECT_EQ(b.code, 1);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "err2")).at("error"), "FormatError");

  write(dir / "cfg.json", R"({"learning_rate": 0.1})");
  const CliRun c = cli("gradcheck --config " + (dir / "cfg.json").string(), dir / "err3");
  EXPECT_EQ(c.code, 1);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "err3")).at("error"), "ConfigError");
}

TEST(Cli, BootstrapIdenticalSystems) {
  const auto dir = relfb::test::temp_dir("cli_boot");
  std::string table = "item_id,errors_ref,errors_test,item_size\n";
  for (int i = 0; i < 20; ++i) table += "u" + std::to_string(i) + "," + std::to_string(i % 5) + "," + std::to_string(i % 5) + ",10\n";
  write(dir / "t.csv", table);
  const CliRun r = cli("bootstrap --table " + (dir / "t.csv").string() + " --seed 7 --resamples 500");
  ASSERT_EQ(r.code, 0);
  const auto line = r.out.substr(r.out.find('\n') + 1);
  EXPECT_EQ(std::stod(line.substr(line.rfind(',') + 1)), 50.0);
  EXPECT_EQ(cli("--seed 7 bootstrap --table " + (dir / "t.csv").string() + " --resamples 500").out, r.out);
}

TEST(Cli, TrainIsDeterministicAndFeedsAnalysis) {
  TinyRun t;
  ASSERT_EQ(cli("synth-data --spec " + (t.dir / "spec.json").string() + " --out " + t.data.string()).code, 0);
  ASSERT_TRUE(fs::exists(t.data / "manifest.csv"));
  const std::string base = "train --config " + t.config.string() + " --data " + t.data.string();
  ASSERT_EQ(cli(base + " --out " + (t.dir / "a").string()).code, 0);
  ASSERT_EQ(cli(base + " --out " + (t.dir / "b").string()).code, 0);
  EXPECT_EQ(slurp(t.dir / "a" / "metrics.csv"), slurp(t.dir / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(t.dir / "a" / "last.ckpt"), slurp(t.dir / "b" / "last.ckpt"));
  const auto summary = nlohmann::json::parse(slurp(t.dir / "a" / "summary.json"));
  EXPECT_TRUE(summary.contains("test_acc"));

  const CliRun seeded = cli("--seed 99 " + base + " --out " + (t.dir / "c").string());
  ASSERT_EQ(seeded.code, 0);
  EXPECT_NE(slurp(t.dir / "a" / "last.ckpt"), slurp(t.dir / "c" / "last.ckpt"));

  const fs::path ckpt = t.dir / "a" / "best.ckpt";
  ASSERT_EQ(cli("analyze --ckpt " + ckpt.string() + " --data " + t.data.string() + " --out " +
                (t.dir / "an").string() + " --split dev")
                .code,
            0);
  for (const char* f : {"center_frequencies.csv", "acoustic_profiles.csv", "modulation_filters.csv",
                        "modulation_profiles.csv", "report.json"})
    EXPECT_TRUE(fs::exists(t.dir / "an" / f)) << f;

  const fs::path wav = t.data / relfb::read_manifest(t.data).front().path;
  ASSERT_EQ(cli("featurize --ckpt " + ckpt.string() + " --wav " + wav.string() + " --out " +
                (t.dir / "feat" / "x.bin").string())
                .code,
            0);
  EXPECT_TRUE(fs::exists(t.dir / "feat" / "x.bin.centers.csv"));
}

TEST(Cli, InputsAreNotModified) {
  TinyRun t;
  ASSERT_EQ(cli("synth-data --spec " + (t.dir / "spec.json").string() + " --out " + t.data.string()).code, 0);
  const std::string manifest = slurp(t.data / "manifest.csv");
  const std::string config = slurp(t.config);
  ASSERT_EQ(cli("train --config " + t.config.string() + " --data " + t.data.string() + " --out " +
                (t.dir / "r").string())
                .code,
            0);
  EXPECT_EQ(slurp(t.data / "manifest.csv"), manifest);
  EXPECT_EQ(slurp(t.config), config);
}
