#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "relfb/corpus.hpp"
#include "relfb/gradcheck.hpp"
#include "relfb/model.hpp"
#include "relfb/rng.hpp"

namespace relfb {

/// Reduced [A-R,M-R] model used for whole-model gradient checks.
inline ModelConfig gradcheck_config() {
  ModelConfig cfg = config_for_ablation("A-R,M-R");
  cfg.f = 16;
  cfg.K = 8;
  cfg.t = 41;
  cfg.head = {16, 16};
  cfg.validate();
  return cfg;
}

/// Two labelled patches of broadband amplitude-modulated noise. Two items so
/// that batch normalisation does not cancel the per-item modulation weights.
inline Batch gradcheck_batch(const ModelConfig& cfg, std::uint64_t seed) {
  CorpusSpec spec;
  spec.seed = seed;
  spec.sample_rate = cfg.sample_rate;
  spec.clips_per_class = 1;
  const double nyquist = cfg.sample_rate / 2.0;
  spec.classes = {{0.0, nyquist, 4.0, "slow"}, {0.0, nyquist, 16.0, "fast"}};
  spec.clip_seconds = static_cast<double>(cfg.framing().samples_needed()) / cfg.sample_rate;
  spec.validate();

  const FramingConfig fr = cfg.framing();
  Batch b{Tensor({2, cfg.t, cfg.s}), {}};
  for (std::size_t c = 0; c < 2; ++c) {
    const Waveform w = synth_clip(spec, c, 0);
    const FramePatch p = frame_signal(w, fr.frame_len, fr.hop, fr.num_frames);
    std::copy_n(p.frames.data(), p.frames.size(), b.input.data() + c * p.frames.size());
    b.labels.push_back(static_cast<int>(c % cfg.num_classes));
  }
  return b;
}

/// Gradient check of the whole model on the fixture batch. Training-mode
/// batch statistics are used; running statistics are restored after every
/// evaluation so that all loss evaluations see the same state.
/// With `full` every scalar is checked, otherwise up to `per_tensor` seeded
/// indices per parameter tensor.
inline GradcheckReport model_gradcheck(const ModelConfig& cfg, bool full, std::uint64_t seed,
                                       std::size_t per_tensor = 8, double h = 1e-5) {
  TrainState st = build_model(cfg);
  // The zero-initialised output layer would make every upstream gradient
  // exactly zero; check at a point where all of them are live.
  const std::string out_w = names::head_w(cfg.head.size());
  Parameter& w = st.params.get(out_w);
  Rng wrng = param_rng(seed, out_w);
  w.value = xavier_uniform(w.value.dim(0), w.value.dim(1), wrng);
  const Batch batch = gradcheck_batch(cfg, seed);
  const ops::BatchNormStats bn = st.bn;
  LossBuilder build = [&](Tape& tape, ParamStore&) {
    st.bn = bn;
    return forward(tape, st, batch, /*training=*/true).loss;
  };
  IndexSelector select;
  if (!full) {
    select = [&](const Parameter& p) {
      std::vector<std::size_t> idx;
      if (p.value.size() <= per_tensor) return idx;
      std::uint64_t h_name = 1469598103934665603ULL;
      for (unsigned char ch : p.name) h_name = (h_name ^ ch) * 1099511628211ULL;
      Rng rng(derive_seed({seed, h_name}));
      while (idx.size() < per_tensor) {
        const std::size_t i = rng.below(p.value.size());
        if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
      }
      std::sort(idx.begin(), idx.end());
      return idx;
    };
  }
  return gradcheck(st.params, build, h, select);
}

}  // namespace relfb
