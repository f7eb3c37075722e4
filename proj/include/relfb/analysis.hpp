#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "relfb/acoustic.hpp"
#include "relfb/checkpoint.hpp"
#include "relfb/corpus.hpp"
#include "relfb/errors.hpp"
#include "relfb/model.hpp"
#include "relfb/rng.hpp"
#include "relfb/train.hpp"

namespace relfb {

// ---------------------------------------------------------------------------
// Center frequencies

/// Full width at half maximum (Hz) of the magnitude response of the acoustic
/// kernel centred at mu_hz. The envelope exp(-n^2 mu^2 / 2) has a Gaussian
/// spectrum with standard deviation mu / (2 pi).
inline double filter_bandwidth_hz(double mu_hz) {
  return 2.0 * std::sqrt(2.0 * std::log(2.0)) * mu_hz / (2.0 * std::numbers::pi);
}

struct CenterFrequencyReport {
  std::vector<double> sorted_hz;
  std::vector<double> mel_hz;
  double max_abs_deviation_hz = 0.0;
  double mean_abs_deviation_hz = 0.0;
};

inline CenterFrequencyReport center_frequency_report(const TrainState& st) {
  CenterFrequencyReport r;
  r.sorted_hz = st.center_frequencies_hz();
  std::sort(r.sorted_hz.begin(), r.sorted_hz.end());
  r.mel_hz = mel_center_frequencies(r.sorted_hz.size(), st.config.sample_rate);
  for (std::size_t i = 0; i < r.sorted_hz.size(); ++i) {
    const double d = std::abs(r.sorted_hz[i] - r.mel_hz[i]);
    r.max_abs_deviation_hz = std::max(r.max_abs_deviation_hz, d);
    r.mean_abs_deviation_hz += d;
  }
  if (!r.sorted_hz.empty()) r.mean_abs_deviation_hz /= static_cast<double>(r.sorted_hz.size());
  return r;
}

/// Writes center_frequencies.csv (sorted_index,center_freq_hz,mel_reference_hz)
/// and returns the deviation report.
inline CenterFrequencyReport export_center_frequencies(const TrainState& st,
                                                       const std::filesystem::path& csv) {
  const CenterFrequencyReport r = center_frequency_report(st);
  std::ofstream out(csv);
  if (!out) throw IoError("cannot write " + csv.string());
  out << "sorted_index,center_freq_hz,mel_reference_hz\n" << std::setprecision(17);
  for (std::size_t i = 0; i < r.sorted_hz.size(); ++i)
    out << i << ',' << r.sorted_hz[i] << ',' << r.mel_hz[i] << '\n';
  return r;
}

/// Center frequency of every acoustic filter in index order; the fixed mel
/// bank reports its band centers.
inline std::vector<double> acoustic_centers_hz(const TrainState& st) {
  if (st.config.acoustic == AcousticKind::Mel)
    return mel_center_frequencies(st.config.f, st.config.sample_rate);
  return st.center_frequencies_hz();
}

struct ModulationCenter {
  double mu_r_hz = 0.0;
  double mu_s_cpo = 0.0;
  double sign = 1.0;
};

inline std::vector<ModulationCenter> modulation_centers(const TrainState& st) {
  if (st.config.modulation != ModulationKind::Parametric)
    throw NotApplicable("free modulation kernels have no rate/scale parameters");
  const ModulationGeometry geo = st.geometry();
  const Tensor& nr = st.params.get(names::kNuRate).value;
  const Tensor& ns = st.params.get(names::kNuScale).value;
  std::vector<ModulationCenter> out(nr.size());
  for (std::size_t i = 0; i < nr.size(); ++i)
    out[i] = {geo.max_rate_hz * ops::sigmoid(nr[i]), geo.max_scale_cpo * ops::sigmoid(ns[i]),
              st.mod_signs[i]};
  return out;
}

// ---------------------------------------------------------------------------
// Relevance profiles

struct AcousticProfileEntry {
  std::size_t filter_index = 0;
  double center_hz = 0.0;
  double mean_weight = 0.0;
};

struct ModulationProfileEntry {
  std::size_t mod_index = 0;
  ModulationCenter center;
  double mean_weight = 0.0;
};

struct RelevanceProfile {
  std::size_t class_index = 0;
  std::string class_name;
  std::vector<AcousticProfileEntry> acoustic;      // ascending center frequency
  std::vector<ModulationProfileEntry> modulation;  // filter-index order
};

/// Per-class mean relevance weights from an evaluation pass. Classes absent
/// from the split are skipped with a warning.
inline std::vector<RelevanceProfile> class_relevance_profiles(
    const TrainState& st, const EvalResult& ev, const std::vector<std::string>& class_names,
    std::ostream* warn = nullptr) {
  std::vector<double> centers;
  if (!ev.mean_w_a.empty()) centers = acoustic_centers_hz(st);
  std::vector<ModulationCenter> mod;
  if (!ev.mean_w_m.empty() && st.config.modulation == ModulationKind::Parametric)
    mod = modulation_centers(st);

  std::vector<RelevanceProfile> out;
  for (std::size_t c = 0; c < ev.class_counts.size(); ++c) {
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    if (ev.class_counts[c] == 0) {
      if (warn) *warn << "warning: class " << name << " has no patches in this split; skipped\n";
      continue;
    }
    RelevanceProfile p{c, name, {}, {}};
    if (!ev.mean_w_a.empty()) {
      for (std::size_t i = 0; i < centers.size(); ++i)
        p.acoustic.push_back({i, centers[i], ev.mean_w_a[c][i]});
      std::stable_sort(p.acoustic.begin(), p.acoustic.end(),
                       [](const auto& a, const auto& b) { return a.center_hz < b.center_hz; });
    }
    if (!ev.mean_w_m.empty()) {
      for (std::size_t i = 0; i < ev.mean_w_m[c].size(); ++i)
        p.modulation.push_back({i, i < mod.size() ? mod[i] : ModulationCenter{NAN, NAN, NAN},
                                ev.mean_w_m[c][i]});
    }
    out.push_back(std::move(p));
  }
  return out;
}

/// Mean of the profiles' weights per entry (the all-class reference).
template <typename Entry>
std::vector<double> all_class_mean(const std::vector<RelevanceProfile>& profiles,
                                   std::vector<Entry> RelevanceProfile::*member) {
  std::vector<double> mean;
  for (const auto& p : profiles) {
    const auto& entries = p.*member;
    if (mean.empty()) mean.assign(entries.size(), 0.0);
    for (std::size_t i = 0; i < entries.size(); ++i) mean[i] += entries[i].mean_weight;
  }
  for (double& v : mean) v /= static_cast<double>(profiles.size());
  return mean;
}

inline void write_acoustic_profiles(std::ostream& os, const std::vector<RelevanceProfile>& profiles) {
  os << "class,filter_index,center_freq_hz,mean_weight,mean_weight_minus_class_average\n"
     << std::setprecision(17);
  if (profiles.empty()) return;
  const auto ref = all_class_mean(profiles, &RelevanceProfile::acoustic);
  for (const auto& p : profiles)
    for (std::size_t i = 0; i < p.acoustic.size(); ++i) {
      const auto& e = p.acoustic[i];
      os << p.class_name << ',' << e.filter_index << ',' << e.center_hz << ',' << e.mean_weight << ','
         << e.mean_weight - ref[i] << '\n';
    }
}

inline void write_modulation_profiles(std::ostream& os, const std::vector<RelevanceProfile>& profiles) {
  os << "class,mod_index,mu_r_hz,mu_s,sign,mean_weight,mean_weight_minus_class_average\n"
     << std::setprecision(17);
  if (profiles.empty()) return;
  const auto ref = all_class_mean(profiles, &RelevanceProfile::modulation);
  for (const auto& p : profiles)
    for (std::size_t i = 0; i < p.modulation.size(); ++i) {
      const auto& e = p.modulation[i];
      os << p.class_name << ',' << e.mod_index << ',' << e.center.mu_r_hz << ',' << e.center.mu_s_cpo
         << ',' << e.center.sign << ',' << e.mean_weight << ',' << e.mean_weight - ref[i] << '\n';
    }
}

/// Rate-scale table over the whole split: relevance_weight_mean is the mean
/// of w_m over every patch.
inline void write_modulation_summary(std::ostream& os, const TrainState& st, const EvalResult& ev) {
  os << "mod_filter_index,mu_r_hz,mu_s_cyc_per_oct,sign,relevance_weight_mean\n"
     << std::setprecision(17);
  const auto centers = modulation_centers(st);
  for (std::size_t i = 0; i < centers.size(); ++i) {
    double w = NAN;
    if (!ev.mean_w_m.empty()) {
      w = 0.0;
      for (std::size_t c = 0; c < ev.class_counts.size(); ++c)
        if (ev.class_counts[c]) w += ev.mean_w_m[c][i] * static_cast<double>(ev.class_counts[c]);
      w /= static_cast<double>(ev.total);
    }
    os << i << ',' << centers[i].mu_r_hz << ',' << centers[i].mu_s_cpo << ',' << centers[i].sign << ','
       << w << '\n';
  }
}

/// Relevance mass a profile puts on modulation filters faster than rate_hz.
inline double modulation_mass_above(const RelevanceProfile& p, double rate_hz) {
  double m = 0.0;
  for (const auto& e : p.modulation)
    if (e.center.mu_r_hz > rate_hz) m += e.mean_weight;
  return m;
}

// ---------------------------------------------------------------------------
// Bootstrap significance

struct ErrorRow {
  std::string item_id;
  double errors_ref = 0.0;
  double errors_test = 0.0;
  double item_size = 0.0;
};

using ErrorTable = std::vector<ErrorRow>;

/// Parses `item_id,errors_ref,errors_test,item_size` (header required).
inline ErrorTable parse_error_table(std::istream& in, std::ostream* warn = nullptr) {
  std::string line;
  if (!std::getline(in, line)) throw EmptyInput("error table is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "item_id,errors_ref,errors_test,item_size")
    throw FormatError("error table: expected header item_id,errors_ref,errors_test,item_size");
  ErrorTable t;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 4) throw FormatError("error table line " + std::to_string(lineno) + ": expected 4 fields");
    ErrorRow r{f[0], 0, 0, 0};
    try {
      std::size_t used = 0;
      auto num = [&](const std::string& s) {
        const double v = std::stod(s, &used);
        if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
        return v;
      };
      r.errors_ref = num(f[1]);
      r.errors_test = num(f[2]);
      r.item_size = num(f[3]);
    } catch (const std::logic_error&) {
      throw FormatError("error table line " + std::to_string(lineno) + ": bad number");
    }
    if (r.errors_ref < 0 || r.errors_test < 0)
      throw FormatError("error table line " + std::to_string(lineno) + ": negative error count");
    if (r.item_size <= 0)
      throw FormatError("error table line " + std::to_string(lineno) + ": item_size must be positive");
    if (warn && (r.errors_ref > r.item_size || r.errors_test > r.item_size))
      *warn << "warning: item " << r.item_id << " has more errors than its size\n";
    t.push_back(std::move(r));
  }
  return t;
}

inline ErrorTable read_error_table(const std::filesystem::path& path, std::ostream* warn = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_error_table(in, warn);
}

struct BootstrapResult {
  double ci_ref_lo = 0.0, ci_ref_hi = 0.0;
  double ci_test_lo = 0.0, ci_test_hi = 0.0;
  double poi = 0.0;  // percent
  double rate_ref = 0.0, rate_test = 0.0;  // point estimates on the full table
};

/// Linear-interpolated empirical quantile of sorted data, q in [0, 1].
inline double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Item-level bootstrap of aggregate error rates (sum errors / sum sizes).
/// Resample r draws from its own stream derived from (seed, r).
inline BootstrapResult bootstrap_ci_poi(const ErrorTable& tbl, std::size_t resamples = 10000,
                                        std::uint64_t seed = 0) {
  if (tbl.empty()) throw EmptyInput("bootstrap: empty error table");
  if (tbl.size() < 2) throw EmptyInput("bootstrap: need at least two items");
  if (resamples == 0) throw ConfigError("bootstrap: resamples must be positive");
  const std::size_t n = tbl.size();
  std::vector<double> ref(resamples), test(resamples);
  double wins = 0.0;
  for (std::size_t r = 0; r < resamples; ++r) {
    Rng rng(derive_seed({seed, r}));
    double er = 0, et = 0, sz = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const ErrorRow& row = tbl[rng.below(n)];
      er += row.errors_ref;
      et += row.errors_test;
      sz += row.item_size;
    }
    ref[r] = er / sz;
    test[r] = et / sz;
    if (et < er) wins += 1.0;
    else if (et == er) wins += 0.5;
  }
  BootstrapResult out;
  double er = 0, et = 0, sz = 0;
  for (const auto& row : tbl) {
    er += row.errors_ref;
    et += row.errors_test;
    sz += row.item_size;
  }
  out.rate_ref = er / sz;
  out.rate_test = et / sz;
  out.poi = 100.0 * wins / static_cast<double>(resamples);
  std::sort(ref.begin(), ref.end());
  std::sort(test.begin(), test.end());
  out.ci_ref_lo = quantile_sorted(ref, 0.025);
  out.ci_ref_hi = quantile_sorted(ref, 0.975);
  out.ci_test_lo = quantile_sorted(test, 0.025);
  out.ci_test_hi = quantile_sorted(test, 0.975);
  return out;
}

inline void write_bootstrap(std::ostream& os, const BootstrapResult& r) {
  os << "ci_ref_lo,ci_ref_hi,ci_test_lo,ci_test_hi,poi\n" << std::setprecision(17) << r.ci_ref_lo << ','
     << r.ci_ref_hi << ',' << r.ci_test_lo << ',' << r.ci_test_hi << ',' << std::setprecision(6)
     << std::fixed << r.poi << '\n';
  os.unsetf(std::ios::floatfield);
}

// ---------------------------------------------------------------------------
// Feature records

struct FeatureRecords {
  std::vector<Tensor> z;    // [f, t_pruned] per patch
  std::vector<Tensor> w_a;  // [f] per patch; empty when acoustic relevance is off
};

/// Acoustic-stage outputs for every patch of a waveform (patch stride from
/// the config), in inference mode.
inline FeatureRecords featurize(TrainState& st, const Waveform& w) {
  const ModelConfig& cfg = st.config;
  if (w.sample_rate != cfg.sample_rate)
    throw UnsupportedFormat("featurize: sample rate " + std::to_string(w.sample_rate) +
                            " differs from the model's " + std::to_string(cfg.sample_rate));
  const FramingConfig fr = cfg.framing();
  const auto stride = static_cast<std::size_t>(std::llround(cfg.patch_stride_seconds * cfg.sample_rate));
  if (w.samples.size() < fr.samples_needed())
    throw InsufficientSamples("featurize: need " + std::to_string(fr.samples_needed()) + " samples, got " +
                              std::to_string(w.samples.size()));
  std::optional<MelFilterbank> mel;
  if (cfg.acoustic == AcousticKind::Mel) mel.emplace(cfg.f, cfg.sample_rate);
  FeatureRecords out;
  for (std::size_t off = 0; off + fr.samples_needed() <= w.samples.size(); off += stride) {
    FramePatch patch = frame_signal(w.samples, fr.frame_len, fr.hop, fr.num_frames, off);
    Tensor input = mel ? mel->log_energies(patch) : std::move(patch.frames);
    Shape shape = input.shape();
    shape.insert(shape.begin(), 1);
    Batch batch{input.reshaped(shape), {}};
    Tape tape;
    const ForwardResult r = forward(tape, st, batch, /*training=*/false);
    out.z.push_back(tape.value(r.z).reshaped({cfg.f, cfg.t_pruned}));
    if (r.w_a.valid()) out.w_a.push_back(tape.value(r.w_a).reshaped({cfg.f}));
  }
  return out;
}

/// Records go into one container (patch<i>/z, patch<i>/w_a); the sidecar CSV
/// lists filter centers in ascending order.
inline void write_feature_records(const std::filesystem::path& out, const FeatureRecords& rec,
                                  const TrainState& st) {
  Container c;
  for (std::size_t i = 0; i < rec.z.size(); ++i) {
    c.put("patch" + std::to_string(i) + "/z", rec.z[i]);
    if (i < rec.w_a.size()) c.put("patch" + std::to_string(i) + "/w_a", rec.w_a[i]);
  }
  c.put_meta("num_patches", std::to_string(rec.z.size()));
  c.put_meta("has_w_a", rec.w_a.empty() ? "0" : "1");
  save_container(out, c);

  std::vector<std::pair<double, std::size_t>> centers;
  const auto hz = acoustic_centers_hz(st);
  for (std::size_t i = 0; i < hz.size(); ++i) centers.emplace_back(hz[i], i);
  std::sort(centers.begin(), centers.end());
  std::filesystem::path side = out;
  side += ".centers.csv";
  std::ofstream csv(side);
  if (!csv) throw IoError("cannot write " + side.string());
  csv << "filter_index,center_freq_hz\n" << std::setprecision(17);
  for (const auto& [f, i] : centers) csv << i << ',' << f << '\n';
}

}  // namespace relfb
