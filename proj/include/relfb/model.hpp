#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relfb/acoustic.hpp"
#include "relfb/adam.hpp"
#include "relfb/autodiff.hpp"
#include "relfb/checkpoint.hpp"
#include "relfb/corpus.hpp"
#include "relfb/modulation.hpp"
#include "relfb/ops.hpp"
#include "relfb/rng.hpp"

namespace relfb {

enum class AcousticKind { Parametric, Mel };
enum class ModulationKind { Parametric, Nonparametric };

struct ModelConfig {
  AcousticKind acoustic = AcousticKind::Parametric;
  bool acoustic_relevance = true;
  ModulationKind modulation = ModulationKind::Parametric;
  bool modulation_relevance = true;
  AcousticInit acoustic_init = AcousticInit::Mel;

  int sample_rate = 16000;
  std::size_t t = 101;         // context frames per patch
  std::size_t s = 400;         // samples per frame
  std::size_t hop = 160;
  std::size_t f = 80;          // acoustic filters
  std::size_t k = 129;         // acoustic kernel length
  std::size_t K = 40;          // modulation filters
  std::size_t t_pruned = 21;
  std::size_t mod_taps = 5;
  std::size_t relevance_hidden = 64;
  double relevance_c = 1e-4;
  double bn_eps = 1e-4;
  double bn_momentum = 0.1;
  std::vector<std::size_t> head = {256, 256};
  std::size_t num_classes = 4;

  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  int threads = 1;
  double patch_stride_seconds = 0.5;

  FramingConfig framing() const { return {s, hop, t}; }
  std::size_t mod_rows() const { return (f - mod_taps + 1) / 2; }   // f'
  std::size_t mod_cols() const { return (t_pruned - mod_taps + 1) / 2; }  // t'

  void validate() const {
    if (t % 2 == 0) throw ConfigError("t must be odd so a centre frame exists");
    if (t_pruned > t || (t - t_pruned) % 2 != 0)
      throw ConfigError("t_pruned must be <= t with the same parity");
    if (k % 2 == 0 || k > s) throw ConfigError("k must be odd and no longer than s");
    if (f < mod_taps || t_pruned < mod_taps) throw ConfigError("input smaller than modulation kernel");
    if (mod_rows() == 0 || mod_cols() == 0) throw ConfigError("pooled modulation maps are empty");
    if (K < 2 || K % 2 != 0) throw ConfigError("K must be even and >= 2");
    if (num_classes < 2) throw ConfigError("need at least two classes");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (sample_rate <= 0 || hop == 0) throw ConfigError("sample_rate and hop must be positive");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
  }
};

// ---------------------------------------------------------------------------
// Config file (JSON). Every key is optional; unknown keys are errors.

namespace detail {

template <typename E>
E parse_enum(const nlohmann::json& j, const char* key,
             std::initializer_list<std::pair<const char*, E>> table) {
  const auto s = j.at(key).get<std::string>();
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw ConfigError(std::string("config: bad value '") + s + "' for " + key);
}

}  // namespace detail

inline ModelConfig config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "acoustic", "acoustic_relevance", "modulation", "modulation_relevance", "acoustic_init",
      "sample_rate", "t", "s", "hop", "f", "k", "K", "t_pruned", "mod_taps", "relevance_hidden",
      "relevance_c", "bn_eps", "bn_momentum", "head", "num_classes", "lr", "batch_size", "epochs",
      "seed", "threads", "patch_stride_seconds"};
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("config: unknown key '" + key + "'");

  ModelConfig c;
  try {
    if (j.contains("acoustic"))
      c.acoustic = detail::parse_enum<AcousticKind>(
          j, "acoustic", {{"parametric", AcousticKind::Parametric}, {"mel", AcousticKind::Mel}});
    if (j.contains("modulation"))
      c.modulation = detail::parse_enum<ModulationKind>(
          j, "modulation",
          {{"parametric", ModulationKind::Parametric}, {"nonparametric", ModulationKind::Nonparametric}});
    if (j.contains("acoustic_init")) {
      if (c.acoustic == AcousticKind::Mel)
        throw ConfigError("config: acoustic_init is set but the acoustic stage is the fixed mel "
                          "filterbank (mel and parametric together)");
      c.acoustic_init = detail::parse_enum<AcousticInit>(
          j, "acoustic_init",
          {{"mel", AcousticInit::Mel}, {"uniform", AcousticInit::UniformRandom},
           {"sigmoid", AcousticInit::SigmoidRandom}});
    }
    c.acoustic_relevance = j.value("acoustic_relevance", c.acoustic_relevance);
    c.modulation_relevance = j.value("modulation_relevance", c.modulation_relevance);
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    c.t = j.value("t", c.t);
    c.s = j.value("s", c.s);
    c.hop = j.value("hop", c.hop);
    c.f = j.value("f", c.f);
    c.k = j.value("k", c.k);
    c.K = j.value("K", c.K);
    c.t_pruned = j.value("t_pruned", c.t_pruned);
    c.mod_taps = j.value("mod_taps", c.mod_taps);
    c.relevance_hidden = j.value("relevance_hidden", c.relevance_hidden);
    c.relevance_c = j.value("relevance_c", c.relevance_c);
    c.bn_eps = j.value("bn_eps", c.bn_eps);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    c.head = j.value("head", c.head);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    c.patch_stride_seconds = j.value("patch_stride_seconds", c.patch_stride_seconds);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j = {
      {"acoustic", c.acoustic == AcousticKind::Mel ? "mel" : "parametric"},
      {"acoustic_relevance", c.acoustic_relevance},
      {"modulation", c.modulation == ModulationKind::Parametric ? "parametric" : "nonparametric"},
      {"modulation_relevance", c.modulation_relevance},
      {"sample_rate", c.sample_rate}, {"t", c.t}, {"s", c.s}, {"hop", c.hop}, {"f", c.f},
      {"k", c.k}, {"K", c.K}, {"t_pruned", c.t_pruned}, {"mod_taps", c.mod_taps},
      {"relevance_hidden", c.relevance_hidden}, {"relevance_c", c.relevance_c},
      {"bn_eps", c.bn_eps}, {"bn_momentum", c.bn_momentum}, {"head", c.head},
      {"num_classes", c.num_classes}, {"lr", c.lr}, {"batch_size", c.batch_size},
      {"epochs", c.epochs}, {"seed", c.seed}, {"threads", c.threads},
      {"patch_stride_seconds", c.patch_stride_seconds}};
  if (c.acoustic == AcousticKind::Parametric)
    j["acoustic_init"] = c.acoustic_init == AcousticInit::Mel
                             ? "mel"
                             : (c.acoustic_init == AcousticInit::UniformRandom ? "uniform" : "sigmoid");
  return j;
}

/// Ablation-grid rows: MFB = fixed mel, A = learned acoustic bank, M =
/// modulation stage, -R = relevance weighting on that stage.
inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"MFB,M", "A,M", "A-R,M", "A,M-R", "A-R,M-R", "MFB-R,M"};
  return names;
}

inline ModelConfig config_for_ablation(const std::string& name, ModelConfig base = {}) {
  const auto comma = name.find(',');
  if (comma == std::string::npos) throw ConfigError("ablation name must be '<acoustic>,<modulation>'");
  const std::string a = name.substr(0, comma), m = name.substr(comma + 1);
  if (a == "MFB" || a == "MFB-R") base.acoustic = AcousticKind::Mel;
  else if (a == "A" || a == "A-R") base.acoustic = AcousticKind::Parametric;
  else throw ConfigError("unknown acoustic stage '" + a + "'");
  base.acoustic_relevance = a.ends_with("-R");
  if (m != "M" && m != "M-R") throw ConfigError("unknown modulation stage '" + m + "'");
  base.modulation_relevance = m == "M-R";
  base.validate();
  return base;
}

// ---------------------------------------------------------------------------
// Trainable state

namespace names {
inline const std::string kNu = "acoustic/nu";
inline const std::string kAcousticRelevance = "acoustic_relevance";
inline const std::string kNuRate = "modulation/nu_r";
inline const std::string kNuScale = "modulation/nu_s";
inline const std::string kModKernels = "modulation/kernels";
inline const std::string kModRelevance = "modulation_relevance";
inline const std::string kBnGamma = "bn/gamma";
inline const std::string kBnBeta = "bn/beta";
inline std::string head_w(std::size_t i) { return "head/w" + std::to_string(i); }
inline std::string head_b(std::size_t i) { return "head/b" + std::to_string(i); }
}  // namespace names

struct TrainState {
  ModelConfig config;
  ParamStore params;
  AdamState adam;
  ops::BatchNormStats bn;
  std::vector<double> mod_signs;
  std::uint64_t epoch = 0;

  ModulationGeometry geometry() const {
    ModulationGeometry g;
    g.taps = config.mod_taps;
    return g;
  }

  /// Acoustic center frequencies in Hz, in filter-index order.
  std::vector<double> center_frequencies_hz() const {
    if (config.acoustic != AcousticKind::Parametric)
      throw NotApplicable("model uses the fixed mel filterbank; it has no learned centers");
    const Tensor& nu = params.get(names::kNu).value;
    std::vector<double> out(nu.size());
    for (std::size_t i = 0; i < nu.size(); ++i) out[i] = center_hz_from_nu(nu[i], config.sample_rate);
    return out;
  }
};

/// Each tensor draws from its own stream derived from (seed, name), so adding
/// or removing a stage does not shift the others' initial values.
inline Rng param_rng(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : name) h = (h ^ ch) * 1099511628211ULL;
  return Rng(derive_seed({seed, h}));
}

inline TrainState build_model(const ModelConfig& cfg) {
  cfg.validate();
  TrainState st;
  st.config = cfg;
  const double sr = cfg.sample_rate;

  if (cfg.acoustic == AcousticKind::Parametric) {
    Rng rng = param_rng(cfg.seed, names::kNu);
    st.params.add(names::kNu, init_acoustic_nu(cfg.f, sr, cfg.acoustic_init, rng));
  }
  if (cfg.acoustic_relevance) {
    Rng rng = param_rng(cfg.seed, names::kAcousticRelevance);
    add_relevance_subnet(st.params, names::kAcousticRelevance, cfg.t, cfg.relevance_hidden, rng);
  }

  const ModulationGeometry geo = st.geometry();
  {
    Rng rng = param_rng(cfg.seed, "modulation");
    ModulationInit init = init_modulation(cfg.K, geo, rng);
    st.mod_signs = init.signs;
    if (cfg.modulation == ModulationKind::Parametric) {
      st.params.add(names::kNuRate, std::move(init.nu_r));
      st.params.add(names::kNuScale, std::move(init.nu_s));
    } else {
      // Free kernels start from the same rate-scale grid.
      const std::size_t n = cfg.mod_taps;
      Tensor kernels({cfg.K, n, n});
      for (std::size_t i = 0; i < cfg.K; ++i)
        modulation_kernel_values(geo.max_rate_hz * ops::sigmoid(init.nu_r[i]),
                                 geo.max_scale_cpo * ops::sigmoid(init.nu_s[i]), init.signs[i], geo,
                                 kernels.data() + i * n * n);
      st.params.add(names::kModKernels, std::move(kernels));
    }
  }

  const std::size_t pooled = cfg.mod_rows() * cfg.mod_cols();
  if (cfg.modulation_relevance) {
    Rng rng = param_rng(cfg.seed, names::kModRelevance);
    add_relevance_subnet(st.params, names::kModRelevance, pooled, cfg.relevance_hidden, rng);
  }

  st.params.add(names::kBnGamma, Tensor({cfg.K}, 1.0));
  st.params.add(names::kBnBeta, Tensor({cfg.K}));
  st.bn.running_mean = Tensor({cfg.K});
  st.bn.running_var = Tensor({cfg.K}, 1.0);
  st.bn.momentum = cfg.bn_momentum;

  std::size_t width = cfg.K * pooled;
  std::vector<std::size_t> layers = cfg.head;
  layers.push_back(cfg.num_classes);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Rng rng = param_rng(cfg.seed, names::head_w(i));
    // Zero output layer: the untrained model predicts the uniform distribution.
    const bool output = i + 1 == layers.size();
    st.params.add(names::head_w(i), output ? Tensor({layers[i], width})
                                           : xavier_uniform(layers[i], width, rng));
    st.params.add(names::head_b(i), Tensor({layers[i]}));
    width = layers[i];
  }

  st.adam = AdamState::for_params(st.params, cfg.lr);
  return st;
}

// ---------------------------------------------------------------------------
// Forward graph

/// Model input for a minibatch: raw frames for the learned acoustic stage or
/// precomputed log-mel energies for the baseline.
struct Batch {
  Tensor input;  // [B, t, s] frames, or [B, f, t] log-mel
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

struct ForwardResult {
  Var x;        // [B, f, t] log energies
  Var w_a;      // [B, f] (invalid when acoustic relevance is off)
  Var z;        // [B, f, t_pruned]
  Var p;        // [B, K, f', t']
  Var w_m;      // [B, K] (invalid when modulation relevance is off)
  Var q;        // [B, K, f'*t'] after batch norm
  Var logits;   // [B, classes]
  Var loss;     // scalar (invalid when labels are empty)
};

inline ForwardResult forward(Tape& tape, TrainState& st, const Batch& batch, bool training) {
  const ModelConfig& cfg = st.config;
  const std::size_t B = batch.input.dim(0);
  ForwardResult r;

  if (cfg.acoustic == AcousticKind::Parametric) {
    require_shape(batch.input, {B, cfg.t, cfg.s}, "forward: frames");
    Var mu = ops::sigmoid_scale(tape, tape.parameter(st.params.get(names::kNu)), cfg.sample_rate / 2.0);
    Var kernels = gauss_kernels(tape, mu, cfg.k, cfg.sample_rate);
    r.x = frame_log_energy(tape, tape.constant(batch.input, "frames"), kernels, cfg.threads);
  } else {
    require_shape(batch.input, {B, cfg.f, cfg.t}, "forward: log-mel input");
    r.x = tape.constant(batch.input, "log_mel");
  }

  Var y = r.x;
  if (cfg.acoustic_relevance) {
    auto rel = apply_relevance(tape, st.params, names::kAcousticRelevance, r.x);
    r.w_a = rel.weights;
    y = rel.weighted;
  }
  r.z = instance_smooth(tape, y, cfg.relevance_c, cfg.t_pruned);

  const ModulationGeometry geo = st.geometry();
  Var mod_kernels;
  if (cfg.modulation == ModulationKind::Parametric) {
    Var mu_r = ops::sigmoid_scale(tape, tape.parameter(st.params.get(names::kNuRate)), geo.max_rate_hz);
    Var mu_s = ops::sigmoid_scale(tape, tape.parameter(st.params.get(names::kNuScale)), geo.max_scale_cpo);
    mod_kernels = modulation_kernels(tape, mu_r, mu_s, st.mod_signs, geo);
  } else {
    mod_kernels = tape.parameter(st.params.get(names::kModKernels));
  }
  r.p = ops::max_pool2x2(tape, ops::conv2d_valid(tape, r.z, mod_kernels));

  Var q = r.p;
  if (cfg.modulation_relevance) {
    auto rel = apply_relevance(tape, st.params, names::kModRelevance, r.p);
    r.w_m = rel.weights;
    q = rel.weighted;
  }
  const std::size_t pooled = cfg.mod_rows() * cfg.mod_cols();
  q = ops::reshape(tape, q, {B, cfg.K, pooled});
  r.q = ops::batch_norm(tape, q, tape.parameter(st.params.get(names::kBnGamma)),
                        tape.parameter(st.params.get(names::kBnBeta)), cfg.bn_eps, training, &st.bn);

  Var h = ops::reshape(tape, r.q, {B, cfg.K * pooled});
  const std::size_t layers = cfg.head.size() + 1;
  for (std::size_t i = 0; i < layers; ++i) {
    h = ops::linear(tape, h, tape.parameter(st.params.get(names::head_w(i))),
                    tape.parameter(st.params.get(names::head_b(i))));
    if (i + 1 < layers) h = ops::relu(tape, h);
  }
  r.logits = h;
  if (!batch.labels.empty()) r.loss = ops::softmax_cross_entropy(tape, r.logits, batch.labels);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline Container state_to_container(const TrainState& st) {
  Container c;
  for (const auto& p : st.params) c.put("param/" + p.name, p.value);
  std::size_t i = 0;
  for (const auto& p : st.params) {
    c.put("adam_m/" + p.name, st.adam.first_moment[i]);
    c.put("adam_v/" + p.name, st.adam.second_moment[i]);
    ++i;
  }
  c.put("bn/running_mean", st.bn.running_mean);
  c.put("bn/running_var", st.bn.running_var);
  c.put("modulation/signs", Tensor::vector(st.mod_signs));
  c.put_meta("config", config_to_json(st.config).dump());
  c.put_meta("adam_step", std::to_string(st.adam.step));
  c.put_meta("epoch", std::to_string(st.epoch));
  return c;
}

inline TrainState state_from_container(const Container& c) {
  TrainState st = build_model(config_from_json(nlohmann::json::parse(c.meta_value("config"))));
  std::size_t i = 0;
  for (auto& p : st.params) {
    const Tensor& v = c.tensor("param/" + p.name);
    require_shape(v, p.value.shape(), ("checkpoint: " + p.name).c_str());
    p.value = v;
    st.adam.first_moment[i] = c.tensor("adam_m/" + p.name);
    st.adam.second_moment[i] = c.tensor("adam_v/" + p.name);
    ++i;
  }
  st.bn.running_mean = c.tensor("bn/running_mean");
  st.bn.running_var = c.tensor("bn/running_var");
  st.mod_signs = c.tensor("modulation/signs").values();
  st.adam.step = std::stoull(c.meta_value("adam_step"));
  st.epoch = std::stoull(c.meta_value("epoch"));
  return st;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& st) {
  save_container(path, state_to_container(st));
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  return state_from_container(load_container(path));
}

}  // namespace relfb
