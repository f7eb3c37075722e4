#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "test_support.hpp"

using namespace relfb;
using relfb::test::random_tensor;

namespace {

Tensor kernel(double mu_r, double mu_s, double sign, const ModulationGeometry& geo = {}) {
  Tape tape;
  const Tensor k = tape.value(modulation_kernels(tape, tape.constant(Tensor({1}, {mu_r})),
                                                 tape.constant(Tensor({1}, {mu_s})), {sign}, geo));
  return k;
}

// Peak of |DFT| of a 5x5 kernel zero-padded to n x n, by direct summation.
std::pair<std::size_t, std::size_t> spectral_peak(const Tensor& k, std::size_t n = 64) {
  double best = -1.0;
  std::pair<std::size_t, std::size_t> at{0, 0};
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v) {
      std::complex<double> acc = 0.0;
      for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 5; ++c) {
          const double ph = -2.0 * std::numbers::pi * (static_cast<double>(u * r) + static_cast<double>(v * c)) / n;
          acc += k[r * 5 + c] * std::complex<double>(std::cos(ph), std::sin(ph));
        }
      // Conjugate-symmetric pairs tie; keep the first in row-major order.
      if (std::abs(acc) > best + 1e-9) best = std::abs(acc), at = {u, v};
    }
  return at;
}

std::size_t circular_distance(std::size_t a, std::size_t b, std::size_t n) {
  const std::size_t d = a > b ? a - b : b - a;
  return std::min(d, n - d);
}

}  // namespace

TEST(ModulationKernel, CenterTapAndJointNegation) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const double sign = trial % 2 ? 1.0 : -1.0;
    const Tensor k = kernel(rng.uniform(0.0, 50.0), rng.uniform(0.0, 12.0), sign);
    EXPECT_EQ(k[12], 1.0);
    for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(k[i], k[24 - i]);
  }
}

TEST(ModulationKernel, HandEvaluatedTap) {
  // a = 0.01 s is column 3, b = 1/24 octave is row 3.
  const Tensor k = kernel(25.0, 6.0, 1.0);
  EXPECT_NEAR(k[3 * 5 + 3], -0.998166, 1e-6);
  EXPECT_NEAR(k[3 * 5 + 3], -std::exp(-1e-4 - 1.0 / 576.0), 1e-15);
}

TEST(ModulationKernel, SignFlipsOrientation) {
  const Tensor up = kernel(20.0, 4.0, 1.0), down = kernel(20.0, 4.0, -1.0);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(down[r * 5 + c], up[(4 - r) * 5 + c]);
}

TEST(ModulationKernel, SpectralPeakAtRateAndScale) {
  constexpr std::size_t n = 64;
  for (double sign : {1.0, -1.0}) {
    const auto [u, v] = spectral_peak(kernel(25.0, 6.0, sign), n);
    // Row axis carries scale, column axis carries rate.
    const std::size_t su = 16, sv = 16;
    const bool direct = u == (sign > 0 ? su : n - su) && v == sv;
    const bool mirror = u == (sign > 0 ? n - su : su) && v == n - sv;
    EXPECT_TRUE(direct || mirror) << "peak at (" << u << ", " << v << ")";
  }
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const double rate = rng.uniform(15.0, 35.0), scale = rng.uniform(3.0, 9.0);
    const double sign = trial % 2 ? 1.0 : -1.0;
    const auto [u, v] = spectral_peak(kernel(rate, scale, sign), n);
    const auto su = static_cast<std::size_t>(std::lround(scale / 24.0 * n));
    const auto sv = static_cast<std::size_t>(std::lround(rate / 100.0 * n));
    const std::size_t su_dir = sign > 0 ? su : n - su, su_mir = sign > 0 ? n - su : su;
    const bool direct = circular_distance(u, su_dir, n) <= 1 && circular_distance(v, sv, n) <= 1;
    const bool mirror = circular_distance(u, su_mir, n) <= 1 && circular_distance(v, n - sv, n) <= 1;
    EXPECT_TRUE(direct || mirror) << "rate " << rate << " scale " << scale << " sign " << sign
                                  << " peak (" << u << ", " << v << ")";
  }
}

TEST(ModulationKernel, CountMismatchRejected) {
  Tape tape;
  EXPECT_THROW(modulation_kernels(tape, tape.constant(Tensor({2})), tape.constant(Tensor({2})), {1.0}, {}),
               ShapeError);
}

TEST(ModulationInit, PairsUpAndDownFilters) {
  Rng rng(3);
  const ModulationGeometry geo;
  const ModulationInit init = init_modulation(40, geo, rng);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(init.signs[i], 1.0);
    EXPECT_EQ(init.signs[i + 20], -1.0);
    EXPECT_EQ(init.nu_r[i], init.nu_r[i + 20]);
    EXPECT_EQ(init.nu_s[i], init.nu_s[i + 20]);
    const double r = ops::sigmoid(init.nu_r[i]) * geo.max_rate_hz;
    const double s = ops::sigmoid(init.nu_s[i]) * geo.max_scale_cpo;
    EXPECT_GT(r, 0.0);
    EXPECT_LT(r, 50.0);
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 12.0);
  }
  EXPECT_THROW(init_modulation(7, geo, rng), ConfigError);
}

// --- filtering and pooling ---------------------------------------------------

TEST(ModulationFilter, ZeroInputGivesZeroMaps) {
  Rng rng(4);
  Tape tape;
  Var k = tape.constant(random_tensor({3, 5, 5}, rng));
  Var p = ops::max_pool2x2(tape, ops::conv2d_valid(tape, tape.constant(Tensor({1, 80, 21})), k));
  ASSERT_EQ(tape.value(p).shape(), (Shape{1, 3, 38, 8}));
  for (double v : tape.value(p).values()) EXPECT_EQ(v, 0.0);
}

TEST(ModulationFilter, ConstantInputGivesTapSum) {
  Rng rng(5);
  const Tensor kt = random_tensor({3, 5, 5}, rng);
  Tape tape;
  Var raw = ops::conv2d_valid(tape, tape.constant(Tensor({1, 80, 21}, 1.0)), tape.constant(kt));
  Var p = ops::max_pool2x2(tape, raw);
  ASSERT_EQ(tape.value(raw).shape(), (Shape{1, 3, 76, 17}));
  for (std::size_t i = 0; i < 3; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 25; ++j) sum += kt[i * 25 + j];
    for (std::size_t j = 0; j < 76 * 17; ++j) EXPECT_NEAR(tape.value(raw)[i * 76 * 17 + j], sum, 1e-13);
    for (std::size_t j = 0; j < 38 * 8; ++j) EXPECT_NEAR(tape.value(p)[i * 38 * 8 + j], sum, 1e-13);
  }
}

TEST(ModulationFilter, ImpulseStampsReversedKernel) {
  Rng rng(6);
  const Tensor kt = random_tensor({1, 5, 5}, rng);
  Tensor z({1, 20, 21});
  const std::size_t pr = 9, pc = 10;
  z[pr * 21 + pc] = 1.0;
  Tape tape;
  const Tensor raw = tape.value(ops::conv2d_valid(tape, tape.constant(z), tape.constant(kt)));
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 17; ++j) {
      // Brute-force oracle: out(i, j) = sum_uv z(i+u, j+v) k(u, v).
      double expect = 0.0;
      for (std::size_t u = 0; u < 5; ++u)
        for (std::size_t v = 0; v < 5; ++v) expect += z[(i + u) * 21 + j + v] * kt[u * 5 + v];
      EXPECT_EQ(raw[i * 17 + j], expect);
      const bool inside = i <= pr && pr - i < 5 && j <= pc && pc - j < 5;
      EXPECT_EQ(raw[i * 17 + j], inside ? kt[(pr - i) * 5 + (pc - j)] : 0.0);
    }
}

TEST(ModulationFilter, PoolTakesMaxOfEachBlock) {
  Tape tape;
  Tensor x({1, 1, 3, 5}, {1, 5, 2, 0, 9, 3, 4, 8, 1, 9, 7, 7, 7, 7, 7});
  const Tensor p = tape.value(ops::max_pool2x2(tape, tape.constant(x)));
  EXPECT_EQ(p.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(p[0], 5.0);
  EXPECT_EQ(p[1], 8.0);
}

TEST(ModulationFilter, KernelLargerThanInputRejected) {
  Tape tape;
  EXPECT_THROW(ops::conv2d_valid(tape, tape.constant(Tensor({1, 4, 21})), tape.constant(Tensor({1, 5, 5}))),
               ShapeError);
}

// --- relevance ----------------------------------------------------------------

TEST(ModulationRelevance, ZeroSubnetGivesUniformWeights) {
  Rng rng(7);
  ParamStore store;
  add_relevance_subnet(store, "mrel", 38 * 8, 64, rng);
  for (auto& p : store) p.value = Tensor(p.value.shape());
  Tape tape;
  const Tensor w = tape.value(apply_relevance(tape, store, "mrel", tape.constant(random_tensor({2, 40, 38, 8}, rng))).weights);
  for (double v : w.values()) EXPECT_DOUBLE_EQ(v, 0.025);
}

TEST(ModulationRelevance, TwoMapClosedForm) {
  Tape tape;
  const Tensor w = tape.value(ops::softmax(tape, tape.constant(Tensor({1, 2}, {0.0, std::log(3.0)}))));
  EXPECT_NEAR(w[0], 0.25, 1e-15);
  EXPECT_NEAR(w[1], 0.75, 1e-15);
}

TEST(ModulationRelevance, SumsToOneAndPermutes) {
  Rng rng(8);
  ParamStore store;
  add_relevance_subnet(store, "mrel", 12, 64, rng);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t K = 2 + rng.below(10);
    const Tensor p = random_tensor({1, K, 3, 4}, rng, -5.0, 5.0);
    std::vector<std::size_t> perm(K);
    for (std::size_t i = 0; i < K; ++i) perm[i] = (i + 1 + static_cast<std::size_t>(trial)) % K;
    Tensor pp(p.shape());
    for (std::size_t i = 0; i < K; ++i) std::copy_n(p.data() + perm[i] * 12, 12, pp.data() + i * 12);
    Tape tape;
    const auto a = apply_relevance(tape, store, "mrel", tape.constant(p));
    const auto b = apply_relevance(tape, store, "mrel", tape.constant(pp));
    double sum = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
      EXPECT_GT(tape.value(a.weights)[i], 0.0);
      sum += tape.value(a.weights)[i];
      EXPECT_NEAR(tape.value(b.weights)[i], tape.value(a.weights)[perm[i]], 1e-15);
      for (std::size_t j = 0; j < 12; ++j)
        EXPECT_NEAR(tape.value(b.weighted)[i * 12 + j], tape.value(a.weighted)[perm[i] * 12 + j], 1e-14);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

// --- batch norm -------------------------------------------------------------------

namespace {

Tensor bn(const Tensor& x, double gamma, double beta, bool training, ops::BatchNormStats* stats) {
  const std::size_t K = x.dim(1);
  Tape tape;
  return tape.value(ops::batch_norm(tape, tape.constant(x), tape.constant(Tensor({K}, gamma)),
                                    tape.constant(Tensor({K}, beta)), 1e-4, training, stats));
}

}  // namespace

TEST(ModulationBatchNorm, TwoPointExample) {
  const Tensor q = bn(Tensor({2, 1, 1}, {-1.0, 1.0}), 1.0, 0.0, true, nullptr);
  EXPECT_NEAR(q[0], -1.0 / std::sqrt(1.0001), 1e-12);
  EXPECT_NEAR(q[1], 1.0 / std::sqrt(1.0001), 1e-12);
  EXPECT_NEAR(q[1], 0.99995, 5e-6);
}

TEST(ModulationBatchNorm, ConstantMapGivesBeta) {
  const Tensor q = bn(Tensor({3, 2, 4}, 2.5), 1.7, 0.3, true, nullptr);
  for (double v : q.values()) EXPECT_EQ(v, 0.3);
}

TEST(ModulationBatchNorm, TrainingOutputIsCentered) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({4, 3, 6}, rng, -10.0, 10.0);
    const Tensor q = bn(x, rng.uniform(0.5, 2.0), 0.0, true, nullptr);
    for (std::size_t k = 0; k < 3; ++k) {
      double mean = 0.0;
      for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t m = 0; m < 6; ++m) mean += q[(b * 3 + k) * 6 + m];
      EXPECT_LT(std::abs(mean / 24.0), 1e-10);
    }
  }
}

TEST(ModulationBatchNorm, RunningStatisticsAndInference) {
  ops::BatchNormStats stats{Tensor({1}), Tensor({1}, 1.0), 0.1};
  bn(Tensor({2, 1, 1}, {1.0, 3.0}), 1.0, 0.0, true, &stats);
  // Batch mean 2, unbiased variance 2.
  EXPECT_NEAR(stats.running_mean[0], 0.2, 1e-15);
  EXPECT_NEAR(stats.running_var[0], 0.9 + 0.2, 1e-15);
  const Tensor q = bn(Tensor({1, 1, 1}, {0.2}), 2.0, 0.5, false, &stats);
  EXPECT_NEAR(q[0], 0.5, 1e-15);
  EXPECT_THROW(bn(Tensor({1, 1, 1}), 1.0, 0.0, false, nullptr), ShapeError);
}
