#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "relfb/autodiff.hpp"
#include "relfb/corpus.hpp"
#include "relfb/fft.hpp"
#include "relfb/ops.hpp"
#include "relfb/parallel.hpp"
#include "relfb/rng.hpp"
#include "relfb/tensor.hpp"

namespace relfb {

inline constexpr double kLogFloor = 1e-10;

// ---------------------------------------------------------------------------
// Mel scale (HTK)

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Center frequencies of `bands` triangular filters whose edges are equally
/// spaced in mel over [0, sample_rate/2].
inline std::vector<double> mel_center_frequencies(std::size_t bands, double sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> out(bands);
  for (std::size_t b = 0; b < bands; ++b)
    out[b] = mel_to_hz(top * static_cast<double>(b + 1) / static_cast<double>(bands + 1));
  return out;
}

// ---------------------------------------------------------------------------
// Filter center-frequency parameterization: mu_hz = sigmoid(nu) * sr / 2

enum class AcousticInit { Mel, UniformRandom, SigmoidRandom };

inline double center_hz_from_nu(double nu, double sample_rate) {
  return ops::sigmoid(nu) * (sample_rate / 2.0);
}

/// The nu whose center frequency is closest to target_hz, searched to the ulp
/// so that representable targets are reproduced exactly.
inline double nu_for_center_hz(double target_hz, double sample_rate) {
  const double p = target_hz / (sample_rate / 2.0);
  double nu = std::log(p / (1.0 - p));
  for (int i = 0; i < 64; ++i) {
    const double got = center_hz_from_nu(nu, sample_rate);
    if (got == target_hz) break;
    const double next = std::nextafter(nu, got < target_hz ? INFINITY : -INFINITY);
    if (std::abs(center_hz_from_nu(next, sample_rate) - target_hz) > std::abs(got - target_hz))
      break;
    nu = next;
  }
  return nu;
}

inline Tensor init_acoustic_nu(std::size_t num_filters, double sample_rate, AcousticInit mode,
                               Rng& rng) {
  Tensor nu({num_filters});
  switch (mode) {
    case AcousticInit::Mel: {
      const auto centers = mel_center_frequencies(num_filters, sample_rate);
      for (std::size_t i = 0; i < num_filters; ++i)
        nu[i] = nu_for_center_hz(centers[i], sample_rate);
      break;
    }
    case AcousticInit::UniformRandom:
      // Centers uniform in (0, sr/2).
      for (std::size_t i = 0; i < num_filters; ++i) {
        double u;
        do {
          u = rng.uniform();
        } while (u <= 0.0);
        nu[i] = std::log(u / (1.0 - u));
      }
      break;
    case AcousticInit::SigmoidRandom:
      // Uniform on the unconstrained axis, mapped through the sigmoid.
      for (std::size_t i = 0; i < num_filters; ++i) nu[i] = rng.uniform(-6.0, 6.0);
      break;
  }
  return nu;
}

// ---------------------------------------------------------------------------
// Cosine-modulated Gaussian kernels

/// Kernel taps n = -(k-1)/2 .. (k-1)/2 for a center frequency in cycles/sample:
/// g(n) = cos(2 pi mu n) exp(-n^2 mu^2 / 2).
inline std::vector<double> gauss_kernel_taps(double mu_norm, std::size_t k) {
  std::vector<double> g(k);
  const double half = static_cast<double>(k - 1) / 2.0;
  for (std::size_t m = 0; m < k; ++m) {
    const double n = static_cast<double>(m) - half;
    g[m] = std::cos(2.0 * std::numbers::pi * mu_norm * n) * std::exp(-n * n * mu_norm * mu_norm / 2.0);
  }
  return g;
}

/// mu_hz [f] -> kernels [f, k], using mu_norm = mu_hz / sample_rate.
inline Var gauss_kernels(Tape& tape, Var mu_hz, std::size_t k, double sample_rate) {
  if (k % 2 == 0) throw ShapeError("gauss_kernels: kernel length must be odd");
  const Tensor& mu = tape.value(mu_hz);
  const std::size_t f = mu.size();
  Tensor out({f, k});
  for (std::size_t i = 0; i < f; ++i) {
    const auto g = gauss_kernel_taps(mu[i] / sample_rate, k);
    std::copy(g.begin(), g.end(), out.data() + i * k);
  }
  return tape.record("gauss_kernels", std::move(out), {mu_hz},
                     [mu_hz, k, f, sample_rate](Tape& t, const Tensor& g) {
    const Tensor& mu = t.value(mu_hz);
    Tensor& gmu = t.grad(mu_hz);
    const double half = static_cast<double>(k - 1) / 2.0;
    for (std::size_t i = 0; i < f; ++i) {
      const double m = mu[i] / sample_rate;
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double n = static_cast<double>(j) - half;
        const double phase = 2.0 * std::numbers::pi * m * n;
        const double env = std::exp(-n * n * m * m / 2.0);
        const double d = -2.0 * std::numbers::pi * n * std::sin(phase) * env -
                         n * n * m * std::cos(phase) * env;
        acc += g[i * k + j] * d;
      }
      gmu[i] += acc / sample_rate;
    }
  });
}

// ---------------------------------------------------------------------------
// Framed filtering -> squared -> mean-pooled -> log

namespace detail {

using StridedFrame =
    Eigen::Map<const ops::RowMatrix, 0, Eigen::OuterStride<>>;

/// Rows are the overlapping length-k windows of one frame: row n = frame[n, n+k).
inline StridedFrame frame_windows(const double* frame, std::size_t frame_len, std::size_t k) {
  return StridedFrame(frame, static_cast<Eigen::Index>(frame_len - k + 1),
                      static_cast<Eigen::Index>(k), Eigen::OuterStride<>(1));
}

}  // namespace detail

/// frames [B, t, s] (constant), kernels [f, k] -> x [B, f, t]. Each frame is
/// correlated with each kernel in valid mode (s-k+1 outputs), the outputs are
/// squared and averaged, and the log is taken with a floor of 1e-10.
inline Var frame_log_energy(Tape& tape, Var frames_var, Var kernels, int threads = 1) {
  if (tape.requires_grad(frames_var))
    throw ShapeError("frame_log_energy: gradients w.r.t. the waveform are not supported");
  const Tensor& frames = tape.value(frames_var);
  const Tensor& Kt = tape.value(kernels);
  if (frames.rank() != 3 || Kt.rank() != 2)
    throw ShapeError("frame_log_energy: frames " + shape_string(frames.shape()) + ", kernels " +
                     shape_string(Kt.shape()));
  const std::size_t B = frames.dim(0), t = frames.dim(1), s = frames.dim(2);
  const std::size_t f = Kt.dim(0), k = Kt.dim(1);
  if (s < k)
    throw ShapeError("frame_log_energy: frame length " + std::to_string(s) +
                     " shorter than kernel length " + std::to_string(k));
  const std::size_t L = s - k + 1;

  Tensor energy({B, t, f});
  Tensor out({B, f, t});
  const auto K = ops::as_matrix(Kt, f, k);
  parallel_for(B, threads, [&](std::size_t b) {
    ops::RowMatrix Y(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(f));
    for (std::size_t j = 0; j < t; ++j) {
      const double* frame = frames.data() + (b * t + j) * s;
      Y.noalias() = detail::frame_windows(frame, s, k) * K.transpose();
      for (std::size_t i = 0; i < f; ++i) {
        const double e = Y.col(static_cast<Eigen::Index>(i)).squaredNorm() / static_cast<double>(L);
        energy[(b * t + j) * f + i] = e;
        out[(b * f + i) * t + j] = std::log(std::max(e, kLogFloor));
      }
    }
  });

  return tape.record("frame_log_energy", std::move(out), {frames_var, kernels},
                     [=, energy = std::move(energy)](Tape& tp, const Tensor& g) {
    const Tensor& frames = tp.value(frames_var);
    const Tensor& Kt = tp.value(kernels);
    const auto K = ops::as_matrix(Kt, f, k);
    std::vector<ops::RowMatrix> partial(B);
    parallel_for(B, threads, [&](std::size_t b) {
      ops::RowMatrix Y(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(f));
      ops::RowMatrix dK = ops::RowMatrix::Zero(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(k));
      for (std::size_t j = 0; j < t; ++j) {
        Eigen::RowVectorXd scale(static_cast<Eigen::Index>(f));
        bool any = false;
        for (std::size_t i = 0; i < f; ++i) {
          const double e = energy[(b * t + j) * f + i];
          // d log(max(e, floor)) / de, zero where the floor is active.
          const double d = e > kLogFloor ? g[(b * f + i) * t + j] / e : 0.0;
          scale[static_cast<Eigen::Index>(i)] = 2.0 * d / static_cast<double>(L);
          any = any || d != 0.0;
        }
        if (!any) continue;
        const double* frame = frames.data() + (b * t + j) * s;
        const auto windows = detail::frame_windows(frame, s, k);
        Y.noalias() = windows * K.transpose();
        Y.array().rowwise() *= scale.array();
        dK.noalias() += Y.transpose() * windows;
      }
      partial[b] = std::move(dK);
    });
    auto gk = ops::as_matrix(tp.grad(kernels), f, k);
    for (std::size_t b = 0; b < B; ++b) gk += partial[b];
  });
}

// ---------------------------------------------------------------------------
// Relevance sub-network: shared two-layer net, one scalar per feature map

struct SubnetNames {
  std::string w1, b1, w2, b2;
  explicit SubnetNames(const std::string& prefix)
      : w1(prefix + "/w1"), b1(prefix + "/b1"), w2(prefix + "/w2"), b2(prefix + "/b2") {}
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
inline Tensor xavier_uniform(std::size_t fan_out, std::size_t fan_in, Rng& rng) {
  Tensor w({fan_out, fan_in});
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-a, a);
  return w;
}

inline void add_relevance_subnet(ParamStore& store, const std::string& prefix,
                                 std::size_t input_dim, std::size_t hidden, Rng& rng) {
  const SubnetNames n(prefix);
  store.add(n.w1, xavier_uniform(hidden, input_dim, rng));
  store.add(n.b1, Tensor({hidden}));
  store.add(n.w2, xavier_uniform(1, hidden, rng));
  store.add(n.b2, Tensor({1}));
}

/// rows [N, in] -> logits [N, 1] through linear -> relu -> linear.
inline Var relevance_subnet(Tape& tape, ParamStore& store, const std::string& prefix, Var rows) {
  const SubnetNames n(prefix);
  Var h = ops::linear(tape, rows, tape.parameter(store.get(n.w1)), tape.parameter(store.get(n.b1)));
  h = ops::relu(tape, h);
  return ops::linear(tape, h, tape.parameter(store.get(n.w2)), tape.parameter(store.get(n.b2)));
}

struct RelevanceResult {
  Var weights;   // [B, R], each row on the simplex
  Var weighted;  // same shape as the input maps
};

/// Scores every map of x [B, R, M...] with the shared subnet (input = the
/// flattened map), softmaxes the scores over R and scales each map by its
/// weight.
inline RelevanceResult apply_relevance(Tape& tape, ParamStore& store, const std::string& prefix,
                                       Var x) {
  const Shape shape = tape.value(x).shape();
  if (shape.size() < 3) throw ShapeError("apply_relevance: expected [B, R, ...]");
  const std::size_t B = shape[0], R = shape[1], M = tape.value(x).size() / (B * R);
  const std::size_t expected = store.get(SubnetNames(prefix).w1).value.dim(1);
  if (M != expected)
    throw ShapeError("relevance subnet '" + prefix + "' expects input dim " +
                     std::to_string(expected) + ", got " + std::to_string(M));
  Var rows = ops::reshape(tape, x, {B * R, M});
  Var logits = ops::reshape(tape, relevance_subnet(tape, store, prefix, rows), {B, R});
  Var w = ops::softmax(tape, logits);
  return {w, ops::scale_rows(tape, x, w)};
}

/// Instance-norm smoothing with relevance factor c, then the centre
/// `keep` frames of the last axis.
inline Var instance_smooth(Tape& tape, Var y, double c, std::size_t keep) {
  const std::size_t t = tape.value(y).shape().back();
  if (t < keep) throw ShapeError("instance_smooth: need at least " + std::to_string(keep) + " frames");
  if ((t - keep) % 2 != 0) throw ShapeError("instance_smooth: t and kept frames differ in parity");
  Var z = ops::instance_norm_rows(tape, y, c);
  return keep == t ? z : ops::slice_last(tape, z, (t - keep) / 2, keep);
}

// ---------------------------------------------------------------------------
// Mel filterbank baseline

/// Triangular mel filters (HTK scale, triangles linear in mel) on the power
/// spectrum of a zero-padded frame. The one-sided power spectrum is scaled so
/// that it sums to the frame's energy.
class MelFilterbank {
 public:
  MelFilterbank(std::size_t bands, double sample_rate, std::size_t n_fft = 512)
      : bands_(bands), n_fft_(n_fft), fft_(n_fft), weights_(bands * (n_fft / 2 + 1), 0.0) {
    const double top = hz_to_mel(sample_rate / 2.0);
    const std::size_t nb = n_fft / 2 + 1;
    std::vector<double> edges(bands + 2);
    for (std::size_t e = 0; e < edges.size(); ++e)
      edges[e] = top * static_cast<double>(e) / static_cast<double>(bands + 1);
    for (std::size_t b = 0; b < bands; ++b) {
      const double lo = edges[b], mid = edges[b + 1], hi = edges[b + 2];
      for (std::size_t k = 0; k < nb; ++k) {
        const double m = hz_to_mel(static_cast<double>(k) * sample_rate / static_cast<double>(n_fft));
        double w = 0.0;
        if (m > lo && m <= mid) w = (m - lo) / (mid - lo);
        else if (m > mid && m < hi) w = (hi - m) / (hi - mid);
        weights_[b * nb + k] = w;
      }
    }
  }

  std::size_t bands() const { return bands_; }

  /// Linear-domain band energies of one frame.
  std::vector<double> band_energies(std::span<const double> frame) {
    const auto spec = fft_.forward(frame);
    const std::size_t nb = spec.size();
    std::vector<double> power(nb);
    for (std::size_t k = 0; k < nb; ++k) {
      const double scale = (k == 0 || k == nb - 1) ? 1.0 : 2.0;
      power[k] = scale * std::norm(spec[k]) / static_cast<double>(n_fft_);
    }
    std::vector<double> out(bands_, 0.0);
    for (std::size_t b = 0; b < bands_; ++b)
      for (std::size_t k = 0; k < nb; ++k) out[b] += weights_[b * nb + k] * power[k];
    return out;
  }

  /// bands x t log-mel matrix for a patch; drop-in for the learned x.
  Tensor log_energies(const FramePatch& patch) {
    const std::size_t t = patch.num_frames(), s = patch.frame_len();
    Tensor x({bands_, t});
    for (std::size_t j = 0; j < t; ++j) {
      const auto e = band_energies(std::span<const double>(patch.frames.data() + j * s, s));
      for (std::size_t b = 0; b < bands_; ++b) x.at(b, j) = std::log(std::max(e[b], kLogFloor));
    }
    return x;
  }

 private:
  std::size_t bands_, n_fft_;
  RealFft fft_;
  std::vector<double> weights_;
};

inline Tensor mel_baseline(const FramePatch& patch, double sample_rate, std::size_t num_bands = 80) {
  MelFilterbank fb(num_bands, sample_rate);
  return fb.log_energies(patch);
}

}  // namespace relfb
