#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "relfb/acoustic.hpp"
#include "relfb/adam.hpp"
#include "relfb/corpus.hpp"
#include "relfb/model.hpp"
#include "relfb/rng.hpp"

namespace relfb {

/// Model-ready examples of one split: framed patches for the learned
/// acoustic stage, or their log-mel energies for the baseline.
struct Dataset {
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  std::vector<std::size_t> clips;
  std::size_t size() const { return labels.size(); }
};

inline Dataset make_dataset(const std::vector<Clip>& clips, Split split, const ModelConfig& cfg) {
  Dataset ds;
  std::optional<MelFilterbank> mel;
  if (cfg.acoustic == AcousticKind::Mel) mel.emplace(cfg.f, cfg.sample_rate);
  for (auto& lp : extract_patches(clips, split, cfg.framing(), cfg.patch_stride_seconds)) {
    if (mel) ds.inputs.push_back(mel->log_energies(lp.patch));
    else ds.inputs.push_back(std::move(lp.patch.frames));
    ds.labels.push_back(lp.label);
    ds.clips.push_back(lp.clip);
  }
  return ds;
}

inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw EmptySplit("empty batch");
  Shape shape = ds.inputs[indices[0]].shape();
  const std::size_t per = shape_size(shape);
  shape.insert(shape.begin(), indices.size());
  Batch b{Tensor(shape), {}};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& in = ds.inputs[indices[i]];
    std::copy_n(in.data(), per, b.input.data() + i * per);
    b.labels.push_back(ds.labels[indices[i]]);
  }
  return b;
}

/// Forward + backward + Adam on one minibatch; returns the pre-update loss.
inline double train_step(TrainState& st, const Batch& batch) {
  st.params.zero_grad();
  Tape tape;
  const ForwardResult r = forward(tape, st, batch, /*training=*/true);
  const double loss = tape.value(r.loss)[0];
  tape.backward(r.loss);
  adam_step(st.adam, st.params);
  return loss;
}

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t total = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::size_t> class_counts;
  std::vector<std::vector<double>> mean_w_a;  // per class, filter-index order; empty if off
  std::vector<std::vector<double>> mean_w_m;  // per class; empty if off
};

/// Inference-mode pass (running batch-norm statistics) over a dataset.
inline EvalResult evaluate(TrainState& st, const Dataset& ds, std::size_t batch_size = 32) {
  if (ds.size() == 0) throw EmptySplit("evaluate: split has no patches");
  const std::size_t C = st.config.num_classes;
  EvalResult r;
  r.total = ds.size();
  r.confusion.assign(C, std::vector<std::size_t>(C, 0));
  r.class_counts.assign(C, 0);
  std::vector<std::vector<double>> sum_wa(C), sum_wm(C);
  std::size_t correct = 0;
  double loss_sum = 0.0;

  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, ds.size() - start);
    const Batch batch = make_batch(ds, std::span<const std::size_t>(order).subspan(start, n));
    Tape tape;
    const ForwardResult fr = forward(tape, st, batch, /*training=*/false);
    loss_sum += tape.value(fr.loss)[0] * static_cast<double>(n);
    const Tensor& logits = tape.value(fr.logits);
    for (std::size_t i = 0; i < n; ++i) {
      const int label = batch.labels[i];
      const double* row = logits.data() + i * C;
      const auto pred = static_cast<std::size_t>(std::max_element(row, row + C) - row);
      r.confusion.at(static_cast<std::size_t>(label)).at(pred) += 1;
      r.class_counts[static_cast<std::size_t>(label)] += 1;
      correct += pred == static_cast<std::size_t>(label);
      auto accumulate = [&](Var w, std::vector<std::vector<double>>& sums) {
        if (!w.valid()) return;
        const Tensor& v = tape.value(w);
        const std::size_t R = v.dim(1);
        auto& s = sums[static_cast<std::size_t>(label)];
        if (s.empty()) s.assign(R, 0.0);
        for (std::size_t j = 0; j < R; ++j) s[j] += v[i * R + j];
      };
      accumulate(fr.w_a, sum_wa);
      accumulate(fr.w_m, sum_wm);
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  r.loss = loss_sum / static_cast<double>(ds.size());
  auto finish = [&](std::vector<std::vector<double>>& sums, std::vector<std::vector<double>>& out) {
    bool any = false;
    for (const auto& s : sums) any = any || !s.empty();
    if (!any) return;
    out.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
      out[c] = sums[c];
      for (double& v : out[c]) v /= static_cast<double>(r.class_counts[c]);
    }
  };
  finish(sum_wa, r.mean_w_a);
  finish(sum_wm, r.mean_w_m);
  return r;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
  double dev_acc = 0.0;
};

inline void write_metrics_header(std::ostream& os) { os << "epoch,train_loss,dev_loss,dev_acc\n"; }
inline void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
  os << m.epoch << ',' << std::setprecision(17) << m.train_loss << ',' << m.dev_loss << ','
     << m.dev_acc << '\n';
}

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics.csv, last.ckpt, best.ckpt
  std::function<void(const EpochMetrics&)> on_epoch;
  std::size_t epochs_override = 0;  // 0 = use config
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  TrainState best;  // lowest dev loss
  double best_dev_loss = std::numeric_limits<double>::infinity();
};

/// Shuffled minibatch Adam on cross-entropy. The shuffle of epoch e depends
/// only on (seed, e).
inline TrainResult train(TrainState& st, const Dataset& train_set, const Dataset& dev_set,
                         const TrainOptions& opt = {}) {
  const ModelConfig& cfg = st.config;
  if (train_set.size() == 0) throw EmptySplit("train: empty training split");
  std::vector<bool> seen(cfg.num_classes, false);
  for (int l : train_set.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= cfg.num_classes)
      throw ConfigError("train: label " + std::to_string(l) + " outside num_classes");
    seen[static_cast<std::size_t>(l)] = true;
  }
  if (std::count(seen.begin(), seen.end(), true) < 2)
    throw ConfigError("train: need at least two classes in the training split");

  std::ofstream metrics;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    metrics.open(*opt.out_dir / "metrics.csv");
    if (!metrics) throw IoError("cannot write metrics in " + opt.out_dir->string());
    write_metrics_header(metrics);
  }

  const double guard = 10.0 * std::log(static_cast<double>(cfg.num_classes));
  const std::size_t epochs = opt.epochs_override ? opt.epochs_override : cfg.epochs;
  TrainResult result;
  result.best = st;

  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed({cfg.seed, st.epoch, 0x5348554646ULL}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      const Batch batch = make_batch(train_set, std::span<const std::size_t>(order).subspan(start, n));
      TrainState last_good = st;
      double loss;
      try {
        loss = train_step(st, batch);
      } catch (const NumericalError& err) {
        st = std::move(last_good);
        if (opt.out_dir) save_checkpoint(*opt.out_dir / "last_good.ckpt", st);
        throw TrainingDiverged(std::string("non-finite value in ") + err.what());
      }
      if (!std::isfinite(loss) || loss > guard) {
        st = std::move(last_good);
        if (opt.out_dir) save_checkpoint(*opt.out_dir / "last_good.ckpt", st);
        std::ostringstream msg;
        msg << "loss " << loss << " exceeded " << guard << " at epoch " << st.epoch;
        throw TrainingDiverged(msg.str());
      }
      loss_sum += loss * static_cast<double>(n);
    }
    ++st.epoch;

    EpochMetrics m{st.epoch, loss_sum / static_cast<double>(train_set.size()), 0.0, 0.0};
    if (dev_set.size() > 0) {
      const EvalResult dev = evaluate(st, dev_set, cfg.batch_size);
      m.dev_loss = dev.loss;
      m.dev_acc = dev.accuracy;
    }
    result.history.push_back(m);
    if (metrics) {
      write_metrics_row(metrics, m);
      metrics.flush();
    }
    if (opt.on_epoch) opt.on_epoch(m);
    if (dev_set.size() == 0 || m.dev_loss < result.best_dev_loss) {
      result.best_dev_loss = m.dev_loss;
      result.best = st;
      if (opt.out_dir) save_checkpoint(*opt.out_dir / "best.ckpt", st);
    }
    if (opt.out_dir) save_checkpoint(*opt.out_dir / "last.ckpt", st);
  }
  return result;
}

}  // namespace relfb
