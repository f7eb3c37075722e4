#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relfb/errors.hpp"
#include "relfb/fft.hpp"
#include "relfb/rng.hpp"
#include "relfb/tensor.hpp"
#include "relfb/wav.hpp"

namespace relfb {

/// t x s block of consecutive raw-sample frames, no analysis window.
struct FramePatch {
  Tensor frames;  // [t, s]
  std::size_t hop = 160;
  int center_label = -1;

  std::size_t num_frames() const { return frames.dim(0); }
  std::size_t frame_len() const { return frames.dim(1); }
};

struct FramingConfig {
  std::size_t frame_len = 400;
  std::size_t hop = 160;
  std::size_t num_frames = 101;

  std::size_t samples_needed() const { return frame_len + (num_frames - 1) * hop; }
};

/// Frame j holds samples [offset + j*hop, offset + j*hop + frame_len).
inline FramePatch frame_signal(std::span<const double> samples, std::size_t frame_len,
                               std::size_t hop, std::size_t num_frames,
                               std::size_t offset = 0) {
  if (frame_len == 0 || num_frames == 0 || hop == 0)
    throw ShapeError("frame_signal: frame_len, hop and num_frames must be positive");
  const std::size_t needed = frame_len + (num_frames - 1) * hop;
  if (offset > samples.size() || samples.size() - offset < needed)
    throw InsufficientSamples("frame_signal: need " + std::to_string(needed) +
                              " samples, have " +
                              std::to_string(samples.size() > offset ? samples.size() - offset : 0));
  FramePatch p;
  p.hop = hop;
  p.frames = Tensor({num_frames, frame_len});
  for (std::size_t j = 0; j < num_frames; ++j)
    std::copy_n(samples.begin() + static_cast<std::ptrdiff_t>(offset + j * hop), frame_len,
                p.frames.data() + j * frame_len);
  return p;
}

inline FramePatch frame_signal(const Waveform& w, std::size_t frame_len, std::size_t hop,
                               std::size_t num_frames) {
  return frame_signal(std::span<const double>(w.samples), frame_len, hop, num_frames);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct ClassSpec {
  double band_low_hz = 0.0;
  double band_high_hz = 0.0;
  double am_rate_hz = 0.0;
  std::string name;  // generated from the band and rate when empty
};

struct CorpusSpec {
  std::vector<ClassSpec> classes;
  std::size_t clips_per_class = 200;
  double clip_seconds = 1.2;
  std::uint64_t seed = 1;
  int sample_rate = 16000;
  double edge_hz = 50.0;  // raised-cosine transition width at each band edge

  void validate() const {
    if (sample_rate <= 0) throw ConfigError("corpus: sample_rate must be positive");
    if (classes.empty()) throw ConfigError("corpus: no classes");
    if (clips_per_class == 0) throw ConfigError("corpus: clips_per_class must be positive");
    if (!(clip_seconds > 0.0)) throw ConfigError("corpus: clip_seconds must be positive");
    const double nyquist = sample_rate / 2.0;
    for (const auto& c : classes) {
      if (!(c.band_low_hz >= 0.0 && c.band_low_hz < c.band_high_hz &&
            c.band_high_hz <= nyquist))
        throw ConfigError("corpus: need 0 <= band_low < band_high <= sample_rate/2");
      if (!(c.am_rate_hz >= 0.0)) throw ConfigError("corpus: am_rate must be >= 0");
    }
  }

  std::string class_name(std::size_t i) const {
    const auto& c = classes.at(i);
    if (!c.name.empty()) return c.name;
    std::ostringstream os;
    os << "band" << c.band_low_hz << '-' << c.band_high_hz << "_am" << c.am_rate_hz;
    return os.str();
  }

  std::size_t clip_samples() const {
    return static_cast<std::size_t>(std::llround(clip_seconds * sample_rate));
  }
};

/// Four bands crossed with alternating 4/16 Hz amplitude modulation.
inline CorpusSpec default_corpus_spec(std::uint64_t seed = 1) {
  CorpusSpec s;
  s.classes = {{100.0, 1000.0, 4.0, {}},
               {1000.0, 2500.0, 16.0, {}},
               {2500.0, 5000.0, 4.0, {}},
               {5000.0, 7800.0, 16.0, {}}};
  s.clips_per_class = 200;
  s.clip_seconds = 1.2;
  s.seed = seed;
  return s;
}

enum class Split { Train, Dev, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "dev") return Split::Dev;
  if (s == "test") return Split::Test;
  throw FormatError("unknown split '" + s + "'");
}

/// 80/10/10 by clip index within each class.
inline Split split_for_index(std::size_t index, std::size_t clips_per_class) {
  const std::size_t n_train = clips_per_class * 8 / 10;
  const std::size_t n_dev = clips_per_class / 10;
  if (index < n_train) return Split::Train;
  if (index < n_train + n_dev) return Split::Dev;
  return Split::Test;
}

struct Clip {
  Waveform wav;
  int class_index = 0;
  std::string class_name;
  std::size_t clip_index = 0;
  Split split = Split::Train;
};

/// Raised-cosine band mask evaluated at frequency f.
inline double band_mask(double f, double lo, double hi, double edge, double nyquist) {
  auto rise = [edge](double x) {  // 0 at x = -edge/2, 1 at x = +edge/2
    if (x <= -edge / 2) return 0.0;
    if (x >= edge / 2) return 1.0;
    return 0.5 * (1.0 - std::cos(std::numbers::pi * (x + edge / 2) / edge));
  };
  const double lower = lo <= 0.0 ? 1.0 : rise(f - lo);
  const double upper = hi >= nyquist ? 1.0 : rise(hi - f);
  return lower * upper;
}

/// One clip; a pure function of (spec, class, index).
inline Waveform synth_clip(const CorpusSpec& spec, std::size_t cls, std::size_t index) {
  const ClassSpec& c = spec.classes.at(cls);
  const std::size_t n = spec.clip_samples();
  const double sr = spec.sample_rate;
  Rng rng(derive_seed({spec.seed, cls, index}));

  std::vector<double> noise(n);
  for (double& v : noise) v = rng.normal();

  RealFft fft(n);
  auto spectrum = fft.forward(noise);
  for (std::size_t k = 0; k < spectrum.size(); ++k) {
    const double f = static_cast<double>(k) * sr / static_cast<double>(n);
    spectrum[k] *= band_mask(f, c.band_low_hz, c.band_high_hz, spec.edge_hz, sr / 2.0);
  }
  std::vector<double> x = fft.inverse(spectrum);

  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double tau = static_cast<double>(i) / sr;
    x[i] *= (1.0 + 0.8 * std::sin(2.0 * std::numbers::pi * c.am_rate_hz * tau)) / 1.8;
    peak = std::max(peak, std::abs(x[i]));
  }
  if (peak > 0.0)
    for (double& v : x) v *= 0.9 / peak;

  return Waveform{std::move(x), spec.sample_rate};
}

inline std::vector<Clip> synth_corpus(const CorpusSpec& spec) {
  spec.validate();
  std::vector<Clip> clips;
  clips.reserve(spec.classes.size() * spec.clips_per_class);
  for (std::size_t cls = 0; cls < spec.classes.size(); ++cls)
    for (std::size_t i = 0; i < spec.clips_per_class; ++i)
      clips.push_back(Clip{synth_clip(spec, cls, i), static_cast<int>(cls),
                           spec.class_name(cls), i,
                           split_for_index(i, spec.clips_per_class)});
  return clips;
}

// ---------------------------------------------------------------------------
// Spec and manifest files

inline CorpusSpec corpus_spec_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "classes", "clips_per_class", "clip_seconds", "seed", "sample_rate", "edge_hz"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("corpus spec: unknown key '" + key + "'");
  CorpusSpec s = default_corpus_spec();
  try {
    if (j.contains("classes")) {
      s.classes.clear();
      for (const auto& c : j.at("classes")) {
        ClassSpec cs;
        cs.band_low_hz = c.at("band_low_hz").get<double>();
        cs.band_high_hz = c.at("band_high_hz").get<double>();
        cs.am_rate_hz = c.value("am_rate_hz", 0.0);
        cs.name = c.value("name", std::string{});
        s.classes.push_back(cs);
      }
    }
    s.clips_per_class = j.value("clips_per_class", s.clips_per_class);
    s.clip_seconds = j.value("clip_seconds", s.clip_seconds);
    s.seed = j.value("seed", s.seed);
    s.sample_rate = j.value("sample_rate", s.sample_rate);
    s.edge_hz = j.value("edge_hz", s.edge_hz);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("corpus spec: ") + e.what());
  }
  s.validate();
  return s;
}

inline nlohmann::json corpus_spec_to_json(const CorpusSpec& s) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t i = 0; i < s.classes.size(); ++i)
    classes.push_back({{"band_low_hz", s.classes[i].band_low_hz},
                       {"band_high_hz", s.classes[i].band_high_hz},
                       {"am_rate_hz", s.classes[i].am_rate_hz},
                       {"name", s.class_name(i)}});
  return {{"classes", classes},         {"clips_per_class", s.clips_per_class},
          {"clip_seconds", s.clip_seconds}, {"seed", s.seed},
          {"sample_rate", s.sample_rate},   {"edge_hz", s.edge_hz}};
}

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  int class_index = 0;
  std::string class_name;
  Split split = Split::Train;
};

inline constexpr const char* kManifestName = "manifest.csv";

/// Writes every clip as a WAV plus manifest.csv (path,class_index,class_name,split).
inline std::vector<ManifestEntry> write_corpus(const std::filesystem::path& dir,
                                               const std::vector<Clip>& clips) {
  std::filesystem::create_directories(dir / "wav");
  std::vector<ManifestEntry> entries;
  std::ofstream csv(dir / kManifestName);
  if (!csv) throw IoError("cannot write manifest in " + dir.string());
  csv << "path,class_index,class_name,split\n";
  for (const auto& c : clips) {
    std::ostringstream name;
    name << "wav/" << c.class_name << '_' << c.clip_index << ".wav";
    write_wav(dir / name.str(), c.wav);
    entries.push_back({name.str(), c.class_index, c.class_name, c.split});
    csv << name.str() << ',' << c.class_index << ',' << c.class_name << ','
        << split_name(c.split) << '\n';
  }
  return entries;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw IoError("cannot open " + (dir / kManifestName).string());
  std::string line;
  if (!std::getline(in, line) || line != "path,class_index,class_name,split")
    throw FormatError("manifest: bad header");
  std::vector<ManifestEntry> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (cols.size() != 4) throw FormatError("manifest: expected 4 columns: " + line);
    try {
      out.push_back({cols[0], std::stoi(cols[1]), cols[2], parse_split(cols[3])});
    } catch (const std::invalid_argument&) {
      throw FormatError("manifest: bad class index: " + line);
    }
  }
  return out;
}

/// Loads all clips named by a corpus directory's manifest.
inline std::vector<Clip> load_corpus(const std::filesystem::path& dir) {
  std::vector<Clip> clips;
  std::size_t i = 0;
  for (const auto& e : read_manifest(dir))
    clips.push_back(Clip{read_wav(dir / e.path), e.class_index, e.class_name, i++, e.split});
  return clips;
}

/// A training example: one framed patch with its clip's label.
struct LabeledPatch {
  FramePatch patch;
  int label = 0;
  std::size_t clip = 0;  // position of the source clip in the corpus
};

/// Cuts patches every stride_seconds from each clip of the given split. The
/// clip's class labels all of its patches.
inline std::vector<LabeledPatch> extract_patches(const std::vector<Clip>& clips, Split split,
                                                 const FramingConfig& framing,
                                                 double stride_seconds = 0.5) {
  std::vector<LabeledPatch> out;
  for (std::size_t ci = 0; ci < clips.size(); ++ci) {
    const Clip& c = clips[ci];
    if (c.split != split) continue;
    const auto stride =
        static_cast<std::size_t>(std::llround(stride_seconds * c.wav.sample_rate));
    const std::size_t need = framing.samples_needed();
    for (std::size_t off = 0; off + need <= c.wav.samples.size(); off += stride) {
      FramePatch p = frame_signal(std::span<const double>(c.wav.samples), framing.frame_len,
                                  framing.hop, framing.num_frames, off);
      p.center_label = c.class_index;
      out.push_back({std::move(p), c.class_index, ci});
      if (stride == 0) break;
    }
  }
  return out;
}

}  // namespace relfb
