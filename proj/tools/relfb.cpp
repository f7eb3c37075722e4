// relfb command-line front end.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "relfb/relfb.hpp"

namespace fs = std::filesystem;
using namespace relfb;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  bool seed_set = false;
  int threads = 1;
  bool threads_set = false;
};

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

ModelConfig load_config(const std::string& path, const Globals& g) {
  ModelConfig cfg = path.empty() ? ModelConfig{} : config_from_json(read_json(path));
  if (g.seed_set) cfg.seed = g.seed;
  if (g.threads_set) cfg.threads = g.threads;
  cfg.validate();
  return cfg;
}

std::vector<std::string> class_names(const std::vector<Clip>& clips, std::size_t n) {
  std::vector<std::string> names(n);
  for (const auto& c : clips)
    if (c.class_index >= 0 && static_cast<std::size_t>(c.class_index) < n)
      names[static_cast<std::size_t>(c.class_index)] = c.class_name;
  for (std::size_t i = 0; i < n; ++i)
    if (names[i].empty()) names[i] = std::to_string(i);
  return names;
}

std::size_t count_classes(const std::vector<Clip>& clips) {
  int hi = -1;
  for (const auto& c : clips) hi = std::max(hi, c.class_index);
  return static_cast<std::size_t>(hi + 1);
}

void log_epoch(const EpochMetrics& m) {
  std::cerr << "epoch " << m.epoch << " train_loss " << m.train_loss << " dev_loss " << m.dev_loss
            << " dev_acc " << m.dev_acc << '\n';
}

std::string dir_name(std::string s) {
  for (char& c : s)
    if (c == ',') c = '_';
  return s;
}

// --- subcommands -----------------------------------------------------------

int cmd_synth(const std::string& spec_path, const fs::path& out, const Globals& g) {
  CorpusSpec spec = spec_path.empty() ? default_corpus_spec(g.seed)
                                      : corpus_spec_from_json(read_json(spec_path));
  if (g.seed_set) spec.seed = g.seed;
  const auto clips = synth_corpus(spec);
  write_corpus(out, clips);
  std::ofstream(out / "spec.json") << corpus_spec_to_json(spec).dump(2) << '\n';
  std::cout << "wrote " << clips.size() << " clips to " << out.string() << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const fs::path& data, const fs::path& out,
              std::size_t epochs, const Globals& g) {
  ModelConfig cfg = load_config(config_path, g);
  const auto clips = load_corpus(data);
  cfg.num_classes = count_classes(clips);
  cfg.validate();
  const Dataset tr = make_dataset(clips, Split::Train, cfg);
  const Dataset dv = make_dataset(clips, Split::Dev, cfg);
  TrainState st = build_model(cfg);
  fs::create_directories(out);
  std::ofstream(out / "config.json") << config_to_json(cfg).dump(2) << '\n';
  TrainOptions opt;
  opt.out_dir = out;
  opt.on_epoch = log_epoch;
  opt.epochs_override = epochs;
  const TrainResult r = train(st, tr, dv, opt);

  nlohmann::json summary = {{"best_dev_loss", r.best_dev_loss}, {"epochs", st.epoch}};
  const Dataset te = make_dataset(clips, Split::Test, cfg);
  if (te.size() > 0) {
    TrainState best = r.best;
    summary["test_acc"] = evaluate(best, te, cfg.batch_size).accuracy;
  }
  std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_featurize(const fs::path& ckpt, const fs::path& wav, const fs::path& out, const Globals& g) {
  TrainState st = load_checkpoint(ckpt);
  if (g.threads_set) st.config.threads = g.threads;
  const FeatureRecords rec = featurize(st, read_wav(wav));
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_feature_records(out, rec, st);
  std::cout << "wrote " << rec.z.size() << " patch records to " << out.string() << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& config_path, bool full, std::size_t per_tensor, const Globals& g) {
  ModelConfig cfg = config_path.empty() ? gradcheck_config() : load_config(config_path, g);
  if (g.seed_set) cfg.seed = g.seed;
  const GradcheckReport r = model_gradcheck(cfg, full, cfg.seed, per_tensor);
  std::cout << r;
  std::size_t zero_directions = 0;
  double nonzero_max = 0.0;
  for (const auto& s : r.scalars) {
    if (s.rel_error >= 1e-4 && std::abs(s.analytic) < 1e-14) ++zero_directions;
    if (std::abs(s.analytic) >= 1e-14) nonzero_max = std::max(nonzero_max, s.rel_error);
  }
  if (zero_directions)
    std::cout << "failing_scalars_with_zero_analytic_gradient," << zero_directions << '\n';
  std::cout << "max_rel_error_nonzero_analytic," << nonzero_max << '\n';
  const bool ok = r.passed(1e-4);
  std::cout << "max_rel_error," << r.max_rel_error() << '\n' << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? 0 : 1;
}

int cmd_ablate(const std::string& config_path, const fs::path& data, const fs::path& out,
               std::size_t epochs, const Globals& g) {
  const ModelConfig base = load_config(config_path, g);
  const auto clips = load_corpus(data);
  fs::create_directories(out);
  std::ofstream summary(out / "summary.csv");
  if (!summary) throw IoError("cannot write " + (out / "summary.csv").string());
  summary << "config,test_acc\n";
  std::map<AcousticKind, std::array<Dataset, 3>> cache;
  for (const auto& name : ablation_names()) {
    ModelConfig cfg = config_for_ablation(name, base);
    cfg.num_classes = count_classes(clips);
    if (!cache.contains(cfg.acoustic))
      cache[cfg.acoustic] = {make_dataset(clips, Split::Train, cfg), make_dataset(clips, Split::Dev, cfg),
                             make_dataset(clips, Split::Test, cfg)};
    const auto& ds = cache[cfg.acoustic];
    std::cerr << "== " << name << '\n';
    TrainState st = build_model(cfg);
    TrainOptions opt;
    opt.out_dir = out / dir_name(name);
    opt.on_epoch = log_epoch;
    opt.epochs_override = epochs;
    TrainResult r = train(st, ds[0], ds[1], opt);
    const double acc = evaluate(r.best, ds[2], cfg.batch_size).accuracy;
    summary << '"' << name << "\"," << acc << '\n';
    summary.flush();
    std::cout << name << ' ' << acc << '\n';
  }
  return 0;
}

int cmd_analyze(const fs::path& ckpt, const fs::path& data, const fs::path& out,
                const std::string& split_name_arg, const Globals& g) {
  TrainState st = load_checkpoint(ckpt);
  if (g.threads_set) st.config.threads = g.threads;
  const auto clips = load_corpus(data);
  const Dataset ds = make_dataset(clips, parse_split(split_name_arg), st.config);
  const EvalResult ev = evaluate(st, ds, st.config.batch_size);
  fs::create_directories(out);

  nlohmann::json report = {{"split", split_name_arg}, {"accuracy", ev.accuracy},
                           {"patches", ev.total}, {"confusion", ev.confusion}};
  if (st.config.acoustic == AcousticKind::Parametric) {
    const auto cf = export_center_frequencies(st, out / "center_frequencies.csv");
    report["center_frequency_max_abs_deviation_hz"] = cf.max_abs_deviation_hz;
    report["center_frequency_mean_abs_deviation_hz"] = cf.mean_abs_deviation_hz;
  }
  const auto profiles =
      class_relevance_profiles(st, ev, class_names(clips, st.config.num_classes), &std::cerr);
  if (!ev.mean_w_a.empty()) {
    std::ofstream os(out / "acoustic_profiles.csv");
    write_acoustic_profiles(os, profiles);
  }
  if (st.config.modulation == ModulationKind::Parametric) {
    std::ofstream os(out / "modulation_filters.csv");
    write_modulation_summary(os, st, ev);
    if (!ev.mean_w_m.empty()) {
      std::ofstream pm(out / "modulation_profiles.csv");
      write_modulation_profiles(pm, profiles);
    }
  }
  std::ofstream(out / "report.json") << report.dump(2) << '\n';
  std::cout << report.dump() << '\n';
  return 0;
}

int cmd_bootstrap(const fs::path& table, std::size_t resamples, const Globals& g) {
  const ErrorTable t = read_error_table(table, &std::cerr);
  write_bootstrap(std::cout, bootstrap_ci_poi(t, resamples, g.seed));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relevance-weighted learnable acoustic and modulation filterbanks"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string("relfb ") + kVersion);

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice of the command")
      ->each([&](const std::string&) { g.seed_set = true; });
  app.add_option("--threads", g.threads, "Worker threads for filtering (1 = strictly serial)")
      ->check(CLI::PositiveNumber)
      ->each([&](const std::string&) { g.threads_set = true; });

  std::string spec_path, config_path, split = "test";
  fs::path out, data, ckpt, wav, table;
  std::size_t epochs = 0, per_tensor = 8, resamples = 10000;
  bool full = false;

  auto* synth = app.add_subcommand("synth-data", "Synthesize the labelled toy corpus");
  synth->add_option("--spec", spec_path, "Corpus spec JSON (default: built-in 4-class corpus)")
      ->check(CLI::ExistingFile);
  synth->add_option("--out", out, "Output directory for WAVs and manifest.csv")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model on a corpus directory");
  train_cmd->add_option("--config", config_path, "Model config JSON (default: [A-R,M-R])")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--data", data, "Corpus directory with manifest.csv")->required();
  train_cmd->add_option("--out", out, "Run directory for metrics and checkpoints")->required();
  train_cmd->add_option("--epochs", epochs, "Override the config's epoch count");

  auto* feat = app.add_subcommand("featurize", "Write acoustic-stage records for a WAV file");
  feat->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  feat->add_option("--wav", wav, "Input WAV (16-bit PCM mono)")->required()->check(CLI::ExistingFile);
  feat->add_option("--out", out, "Record file; a .centers.csv sidecar is written next to it")
      ->required();

  auto* gc = app.add_subcommand("gradcheck", "Compare model gradients with finite differences");
  gc->add_option("--config", config_path, "Model config JSON (default: reduced [A-R,M-R])")
      ->check(CLI::ExistingFile);
  gc->add_flag("--full", full, "Check every scalar parameter instead of a sample");
  gc->add_option("--per-tensor", per_tensor, "Scalars sampled per tensor without --full")
      ->check(CLI::PositiveNumber);

  auto* abl = app.add_subcommand("ablate", "Train every ablation-grid config and report test accuracy");
  abl->add_option("--config", config_path, "Base model config JSON")->check(CLI::ExistingFile);
  abl->add_option("--data", data, "Corpus directory with manifest.csv")->required();
  abl->add_option("--out", out, "Output directory (summary.csv and one run per config)")->required();
  abl->add_option("--epochs", epochs, "Override the config's epoch count");

  auto* ana = app.add_subcommand("analyze", "Export center-frequency and relevance-profile CSVs");
  ana->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ana->add_option("--data", data, "Corpus directory with manifest.csv")->required();
  ana->add_option("--out", out, "Output directory")->required();
  ana->add_option("--split", split, "Split to analyze")->check(CLI::IsMember({"train", "dev", "test"}));

  auto* boot = app.add_subcommand("bootstrap", "Bootstrap CI and probability of improvement");
  boot->add_option("--table", table, "CSV item_id,errors_ref,errors_test,item_size")
      ->required()
      ->check(CLI::ExistingFile);
  boot->add_option("--resamples", resamples, "Number of bootstrap resamples")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(spec_path, out, g);
    if (*train_cmd) return cmd_train(config_path, data, out, epochs, g);
    if (*feat) return cmd_featurize(ckpt, wav, out, g);
    if (*gc) return cmd_gradcheck(config_path, full, per_tensor, g);
    if (*abl) return cmd_ablate(config_path, data, out, epochs, g);
    if (*ana) return cmd_analyze(ckpt, data, out, split, g);
    if (*boot) return cmd_bootstrap(table, resamples, g);
  } catch (const relfb::Error& e) {
    std::cerr << nlohmann::json{{"error", error_kind(e)}, {"message", e.what()}}.dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "Error"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
  return 2;
}
