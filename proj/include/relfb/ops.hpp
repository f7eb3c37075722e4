#pragma once

// Differentiable building blocks shared by both front-end stages and the head.
// Every op checks shapes, computes its value eagerly and records the exact
// vector-Jacobian product for the reverse pass.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "relfb/autodiff.hpp"
#include "relfb/tensor.hpp"

namespace relfb::ops {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline MatrixMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatrixMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstMatrixMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(t.data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

/// Mean of a contiguous run, anchored at its first element so that a
/// constant run yields exactly that constant.
inline double anchored_mean(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 1; i < n; ++i) acc += x[i] - x[0];
  return x[0] + acc / static_cast<double>(n);
}

inline double sigmoid(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

/// New tensor with the same data under a different shape.
inline Var reshape(Tape& tape, Var x, Shape shape) {
  Tensor out = tape.value(x).reshaped(std::move(shape));
  return tape.record("reshape", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// scale * sigmoid(nu), elementwise.
inline Var sigmoid_scale(Tape& tape, Var nu, double scale) {
  const Tensor& v = tape.value(nu);
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = scale * sigmoid(v[i]);
  return tape.record("sigmoid_scale", std::move(out), {nu}, [nu, scale](Tape& t, const Tensor& g) {
    const Tensor& v = t.value(nu);
    Tensor& gv = t.grad(nu);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double s = sigmoid(v[i]);
      gv[i] += g[i] * scale * s * (1.0 - s);
    }
  });
}

/// Affine map applied to each row: x [N, in], w [out, in], b [out] -> [N, out].
inline Var linear(Tape& tape, Var x, Var w, Var b) {
  const Tensor& X = tape.value(x);
  const Tensor& W = tape.value(w);
  const Tensor& B = tape.value(b);
  if (X.rank() != 2 || W.rank() != 2 || W.dim(1) != X.dim(1) || B.size() != W.dim(0))
    throw ShapeError("linear: x " + shape_string(X.shape()) + ", w " + shape_string(W.shape()) +
                     ", b " + shape_string(B.shape()));
  const std::size_t n = X.dim(0), in = X.dim(1), outd = W.dim(0);
  Tensor Y({n, outd});
  auto y = as_matrix(Y, n, outd);
  y.noalias() = as_matrix(X, n, in) * as_matrix(W, outd, in).transpose();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < outd; ++c) y(r, c) += B[c];

  return tape.record("linear", std::move(Y), {x, w, b},
                     [x, w, b, n, in, outd](Tape& t, const Tensor& g) {
    auto gy = as_matrix(g, n, outd);
    if (t.requires_grad(x))
      as_matrix(t.grad(x), n, in).noalias() += gy * as_matrix(t.value(w), outd, in);
    if (t.requires_grad(w))
      as_matrix(t.grad(w), outd, in).noalias() += gy.transpose() * as_matrix(t.value(x), n, in);
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < outd; ++c) gb[c] += gy(r, c);
    }
  });
}

inline Var relu(Tape& tape, Var x) {
  const Tensor& v = tape.value(x);
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
  return tape.record("relu", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& v = t.value(x);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < v.size(); ++i)
      if (v[i] > 0.0) gx[i] += g[i];
  });
}

/// Softmax over the last axis of a rank-2 tensor [N, C].
inline Tensor softmax_values(const Tensor& v) {
  if (v.rank() != 2) throw ShapeError("softmax: expected rank 2, got " + shape_string(v.shape()));
  const std::size_t n = v.dim(0), c = v.dim(1);
  Tensor out(v.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* in = v.data() + r * c;
    double* o = out.data() + r * c;
    const double mx = *std::max_element(in, in + c);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= sum;
  }
  return out;
}

inline Var softmax(Tape& tape, Var x) {
  Tensor out = softmax_values(tape.value(x));
  const std::size_t n = out.dim(0), c = out.dim(1);
  return tape.record("softmax", std::move(out), {x}, [x, n, c](Tape& t, const Tensor& g) {
    // The softmax output is needed here; recompute rather than capture a copy.
    const Tensor y = softmax_values(t.value(x));
    Tensor& gx = t.grad(x);
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gx[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
    }
  });
}

/// x [B, R, M...] scaled per (b, r) by w [B, R]. Rows keep their identity;
/// nothing is mixed across rows.
inline Var scale_rows(Tape& tape, Var x, Var w) {
  const Tensor& X = tape.value(x);
  const Tensor& W = tape.value(w);
  if (X.rank() < 2 || W.rank() != 2 || X.dim(0) != W.dim(0) || X.dim(1) != W.dim(1))
    throw ShapeError("scale_rows: x " + shape_string(X.shape()) + ", w " +
                     shape_string(W.shape()));
  const std::size_t rows = W.size(), m = X.size() / rows;
  Tensor out(X.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = W[r] * X[r * m + j];
  return tape.record("scale_rows", std::move(out), {x, w}, [x, w, rows, m](Tape& t, const Tensor& g) {
    const Tensor& X = t.value(x);
    const Tensor& W = t.value(w);
    if (t.requires_grad(x)) {
      Tensor& gx = t.grad(x);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += W[r] * g[r * m + j];
    }
    if (t.requires_grad(w)) {
      Tensor& gw = t.grad(w);
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += X[r * m + j] * g[r * m + j];
        gw[r] += acc;
      }
    }
  });
}

/// Per-row normalization over the last axis: (y - mean) / sqrt(var + c) with
/// the population variance.
inline Var instance_norm_rows(Tape& tape, Var y, double c) {
  const Tensor& Y = tape.value(y);
  if (Y.rank() < 1 || Y.empty()) throw ShapeError("instance_norm_rows: empty input");
  const std::size_t len = Y.shape().back(), rows = Y.size() / len;
  Tensor out(Y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = Y.data() + r * len;
    const double mean = anchored_mean(in, len);
    double var = 0.0;
    for (std::size_t j = 0; j < len; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(len);
    const double denom = std::sqrt(var + c);
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = (in[j] - mean) / denom;
  }
  return tape.record("instance_norm", out, {y}, [y, c, len, rows, out](Tape& t, const Tensor& g) {
    const Tensor& Y = t.value(y);
    Tensor& gy = t.grad(y);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* in = Y.data() + r * len;
      const double mean = anchored_mean(in, len);
      double var = 0.0;
      for (std::size_t j = 0; j < len; ++j) var += (in[j] - mean) * (in[j] - mean);
      var /= static_cast<double>(len);
      const double denom = std::sqrt(var + c);
      double mean_g = 0.0, mean_gz = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        mean_g += g[r * len + j];
        mean_gz += g[r * len + j] * out[r * len + j];
      }
      mean_g /= static_cast<double>(len);
      mean_gz /= static_cast<double>(len);
      for (std::size_t j = 0; j < len; ++j)
        gy[r * len + j] += (g[r * len + j] - mean_g - out[r * len + j] * mean_gz) / denom;
    }
  });
}

/// Keeps columns [start, start + len) of the last axis.
inline Var slice_last(Tape& tape, Var x, std::size_t start, std::size_t len) {
  const Tensor& X = tape.value(x);
  const std::size_t full = X.shape().back();
  if (start + len > full) throw ShapeError("slice_last: range out of bounds");
  const std::size_t rows = X.size() / full;
  Shape shape = X.shape();
  shape.back() = len;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(X.data() + r * full + start, len, out.data() + r * len);
  return tape.record("slice_last", std::move(out), {x},
                     [x, start, len, full, rows](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < len; ++j) gx[r * full + start + j] += g[r * len + j];
  });
}

/// Valid-mode 2-D cross-correlation of each input map with every kernel:
/// x [B, H, W], k [K, kh, kw] -> [B, K, H-kh+1, W-kw+1].
inline Var conv2d_valid(Tape& tape, Var x, Var k) {
  const Tensor& X = tape.value(x);
  const Tensor& Kt = tape.value(k);
  if (X.rank() != 3 || Kt.rank() != 3 || Kt.dim(1) > X.dim(1) || Kt.dim(2) > X.dim(2))
    throw ShapeError("conv2d_valid: x " + shape_string(X.shape()) + ", k " +
                     shape_string(Kt.shape()));
  const std::size_t B = X.dim(0), H = X.dim(1), W = X.dim(2);
  const std::size_t K = Kt.dim(0), kh = Kt.dim(1), kw = Kt.dim(2);
  const std::size_t oh = H - kh + 1, ow = W - kw + 1;
  Tensor out({B, K, oh, ow});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t q = 0; q < K; ++q)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v)
              acc += X[(b * H + i + u) * W + j + v] * Kt[(q * kh + u) * kw + v];
          out[((b * K + q) * oh + i) * ow + j] = acc;
        }
  return tape.record("conv2d_valid", std::move(out), {x, k},
                     [=](Tape& t, const Tensor& g) {
    const Tensor& X = t.value(x);
    const Tensor& Kt = t.value(k);
    const bool want_x = t.requires_grad(x), want_k = t.requires_grad(k);
    Tensor* gx = want_x ? &t.grad(x) : nullptr;
    Tensor* gk = want_k ? &t.grad(k) : nullptr;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t q = 0; q < K; ++q)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const double go = g[((b * K + q) * oh + i) * ow + j];
            if (go == 0.0) continue;
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const std::size_t xi = (b * H + i + u) * W + j + v;
                const std::size_t ki = (q * kh + u) * kw + v;
                if (gx) (*gx)[xi] += go * Kt[ki];
                if (gk) (*gk)[ki] += go * X[xi];
              }
          }
  });
}

/// 2x2 max-pool with stride 2 over the last two axes; trailing odd rows or
/// columns are dropped. Ties go to the first element in row-major order.
inline Var max_pool2x2(Tape& tape, Var x) {
  const Tensor& X = tape.value(x);
  if (X.rank() < 2) throw ShapeError("max_pool2x2: rank < 2");
  const std::size_t H = X.dim(X.rank() - 2), W = X.dim(X.rank() - 1);
  const std::size_t oh = H / 2, ow = W / 2, planes = X.size() / (H * W);
  if (oh == 0 || ow == 0) throw ShapeError("max_pool2x2: input smaller than 2x2");
  Shape shape = X.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  Tensor out(shape);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (p * H + 2 * i) * W + 2 * j;
        for (std::size_t u = 0; u < 2; ++u)
          for (std::size_t v = 0; v < 2; ++v) {
            const std::size_t idx = (p * H + 2 * i + u) * W + 2 * j + v;
            if (X[idx] > X[best]) best = idx;
          }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = X[best];
        argmax[o] = best;
      }
  return tape.record("max_pool2x2", std::move(out), {x},
                     [x, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
  });
}

/// Running statistics for batch normalization, updated in training mode.
struct BatchNormStats {
  Tensor running_mean;  // [K]
  Tensor running_var;   // [K]
  double momentum = 0.1;
};

/// Batch normalization of x [B, K, M...] with per-channel statistics over
/// (batch, M...). Training mode normalizes by the batch statistics (biased
/// variance) and folds them into `stats`; inference uses `stats`.
inline Var batch_norm(Tape& tape, Var x, Var gamma, Var beta, double eps, bool training,
                      BatchNormStats* stats) {
  const Tensor& X = tape.value(x);
  const std::size_t K = tape.value(gamma).size();
  if (X.rank() < 2 || X.dim(1) != K || tape.value(beta).size() != K)
    throw ShapeError("batch_norm: x " + shape_string(X.shape()) + " with " + std::to_string(K) +
                     " channels");
  const std::size_t B = X.dim(0), M = X.size() / (B * K), N = B * M;
  if (!training && !stats) throw ShapeError("batch_norm: inference needs running stats");

  std::vector<double> mean(K), inv_std(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (training) {
      const double anchor = X[k * M];
      double acc = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t m = 0; m < M; ++m) acc += X[(b * K + k) * M + m] - anchor;
      const double mu = anchor + acc / static_cast<double>(N);
      double var = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t m = 0; m < M; ++m) {
          const double d = X[(b * K + k) * M + m] - mu;
          var += d * d;
        }
      var /= static_cast<double>(N);
      mean[k] = mu;
      inv_std[k] = 1.0 / std::sqrt(var + eps);
      if (stats) {
        const double unbiased = N > 1 ? var * static_cast<double>(N) / static_cast<double>(N - 1) : var;
        stats->running_mean[k] = (1 - stats->momentum) * stats->running_mean[k] + stats->momentum * mu;
        stats->running_var[k] = (1 - stats->momentum) * stats->running_var[k] + stats->momentum * unbiased;
      }
    } else {
      mean[k] = stats->running_mean[k];
      inv_std[k] = 1.0 / std::sqrt(stats->running_var[k] + eps);
    }
  }

  const Tensor& G = tape.value(gamma);
  const Tensor& Bt = tape.value(beta);
  Tensor xhat(X.shape()), out(X.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t m = 0; m < M; ++m) {
        const std::size_t i = (b * K + k) * M + m;
        xhat[i] = (X[i] - mean[k]) * inv_std[k];
        out[i] = G[k] * xhat[i] + Bt[k];
      }

  return tape.record("batch_norm", std::move(out), {x, gamma, beta},
                     [=, xhat = std::move(xhat)](Tape& t, const Tensor& g) {
    const Tensor& G = t.value(gamma);
    if (t.requires_grad(gamma) || t.requires_grad(beta)) {
      std::vector<double> dg(K, 0.0), db(K, 0.0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t m = 0; m < M; ++m) {
            const std::size_t i = (b * K + k) * M + m;
            dg[k] += g[i] * xhat[i];
            db[k] += g[i];
          }
      if (t.requires_grad(gamma)) {
        Tensor& gg = t.grad(gamma);
        for (std::size_t k = 0; k < K; ++k) gg[k] += dg[k];
      }
      if (t.requires_grad(beta)) {
        Tensor& gb = t.grad(beta);
        for (std::size_t k = 0; k < K; ++k) gb[k] += db[k];
      }
    }
    if (!t.requires_grad(x)) return;
    Tensor& gx = t.grad(x);
    for (std::size_t k = 0; k < K; ++k) {
      if (!training) {
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t m = 0; m < M; ++m) {
            const std::size_t i = (b * K + k) * M + m;
            gx[i] += g[i] * G[k] * inv_std[k];
          }
        continue;
      }
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t m = 0; m < M; ++m) {
          const std::size_t i = (b * K + k) * M + m;
          mean_d += g[i] * G[k];
          mean_dx += g[i] * G[k] * xhat[i];
        }
      mean_d /= static_cast<double>(N);
      mean_dx /= static_cast<double>(N);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t m = 0; m < M; ++m) {
          const std::size_t i = (b * K + k) * M + m;
          gx[i] += inv_std[k] * (g[i] * G[k] - mean_d - xhat[i] * mean_dx);
        }
    }
  });
}

/// Mean over the batch of -log softmax(logits)[target]. logits [B, C].
inline Var softmax_cross_entropy(Tape& tape, Var logits, std::vector<int> targets) {
  const Tensor& L = tape.value(logits);
  if (L.rank() != 2 || L.dim(0) != targets.size())
    throw ShapeError("softmax_cross_entropy: logits " + shape_string(L.shape()) + " for " +
                     std::to_string(targets.size()) + " targets");
  const std::size_t B = L.dim(0), C = L.dim(1);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b] < 0 || static_cast<std::size_t>(targets[b]) >= C)
      throw ShapeError("softmax_cross_entropy: target out of range");
    const double* row = L.data() + b * C;
    const double mx = *std::max_element(row, row + C);
    double sum = 0.0;
    for (std::size_t j = 0; j < C; ++j) sum += std::exp(row[j] - mx);
    loss += mx + std::log(sum) - row[targets[b]];
  }
  loss /= static_cast<double>(B);
  return tape.record("softmax_cross_entropy", Tensor::scalar(loss), {logits},
                     [logits, targets = std::move(targets), B, C](Tape& t, const Tensor& g) {
    const Tensor p = softmax_values(t.value(logits));
    Tensor& gl = t.grad(logits);
    const double scale = g[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < C; ++j)
        gl[b * C + j] += scale * (p[b * C + j] - (static_cast<int>(j) == targets[b] ? 1.0 : 0.0));
  });
}

/// Sum of squared differences from a constant target.
inline Var squared_error(Tape& tape, Var x, Tensor target) {
  const Tensor& X = tape.value(x);
  if (X.size() != target.size()) throw ShapeError("squared_error: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) acc += (X[i] - target[i]) * (X[i] - target[i]);
  return tape.record("squared_error", Tensor::scalar(acc), {x},
                     [x, target = std::move(target)](Tape& t, const Tensor& g) {
    const Tensor& X = t.value(x);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < X.size(); ++i) gx[i] += g[0] * 2.0 * (X[i] - target[i]);
  });
}

/// Inner product with a constant tensor; turns any op into a scalar loss.
inline Var weighted_sum(Tape& tape, Var x, Tensor weights) {
  const Tensor& X = tape.value(x);
  if (X.size() != weights.size()) throw ShapeError("weighted_sum: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) acc += X[i] * weights[i];
  return tape.record("weighted_sum", Tensor::scalar(acc), {x},
                     [x, weights = std::move(weights)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * weights[i];
  });
}

}  // namespace relfb::ops
