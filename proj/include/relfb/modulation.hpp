#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "relfb/autodiff.hpp"
#include "relfb/ops.hpp"
#include "relfb/rng.hpp"
#include "relfb/tensor.hpp"

namespace relfb {

/// Tap grid and frequency ranges of the 2-D rate-scale kernels.
struct ModulationGeometry {
  std::size_t taps = 5;
  double rate_sampling_hz = 100.0;      // frame rate of the time-frequency input
  double scale_sampling_cpo = 24.0;     // samples per octave along frequency
  double max_rate_hz = 50.0;
  double max_scale_cpo = 12.0;
};

/// Kernel layout is [K, taps (frequency, b), taps (time, a)], matching the
/// [filters, frames] orientation of the acoustic output.
/// g(a, b) = cos(2 pi (mu_r a + sign mu_s b)) exp(-a^2 - b^2).
inline void modulation_kernel_values(double mu_r, double mu_s, double sign,
                                     const ModulationGeometry& geo, double* out) {
  const double half = static_cast<double>(geo.taps - 1) / 2.0;
  for (std::size_t row = 0; row < geo.taps; ++row) {
    const double b = (static_cast<double>(row) - half) / geo.scale_sampling_cpo;
    for (std::size_t col = 0; col < geo.taps; ++col) {
      const double a = (static_cast<double>(col) - half) / geo.rate_sampling_hz;
      out[row * geo.taps + col] =
          std::cos(2.0 * std::numbers::pi * (mu_r * a + sign * mu_s * b)) * std::exp(-a * a - b * b);
    }
  }
}

/// mu_r [K] (Hz), mu_s [K] (cycles/octave) -> kernels [K, taps, taps].
inline Var modulation_kernels(Tape& tape, Var mu_r, Var mu_s, std::vector<double> signs,
                              const ModulationGeometry& geo) {
  const Tensor& R = tape.value(mu_r);
  const Tensor& S = tape.value(mu_s);
  const std::size_t K = R.size(), n = geo.taps;
  if (S.size() != K || signs.size() != K)
    throw ShapeError("modulation_kernels: rate, scale and sign counts differ");
  Tensor out({K, n, n});
  for (std::size_t i = 0; i < K; ++i)
    modulation_kernel_values(R[i], S[i], signs[i], geo, out.data() + i * n * n);

  return tape.record("modulation_kernels", std::move(out), {mu_r, mu_s},
                     [mu_r, mu_s, signs = std::move(signs), geo, K, n](Tape& t, const Tensor& g) {
    const Tensor& R = t.value(mu_r);
    const Tensor& S = t.value(mu_s);
    const double half = static_cast<double>(n - 1) / 2.0;
    std::vector<double> dr(K, 0.0), ds(K, 0.0);
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t row = 0; row < n; ++row) {
        const double b = (static_cast<double>(row) - half) / geo.scale_sampling_cpo;
        for (std::size_t col = 0; col < n; ++col) {
          const double a = (static_cast<double>(col) - half) / geo.rate_sampling_hz;
          const double phase = 2.0 * std::numbers::pi * (R[i] * a + signs[i] * S[i] * b);
          const double common = -std::sin(phase) * std::exp(-a * a - b * b) * 2.0 * std::numbers::pi *
                                g[(i * n + row) * n + col];
          dr[i] += common * a;
          ds[i] += common * signs[i] * b;
        }
      }
    if (t.requires_grad(mu_r)) {
      Tensor& gr = t.grad(mu_r);
      for (std::size_t i = 0; i < K; ++i) gr[i] += dr[i];
    }
    if (t.requires_grad(mu_s)) {
      Tensor& gs = t.grad(mu_s);
      for (std::size_t i = 0; i < K; ++i) gs[i] += ds[i];
    }
  });
}

/// Initial rate/scale parameters: a jittered grid over (0, max_rate) x
/// (0, max_scale), shared by the upward (+) first half and the downward (-)
/// second half of the bank.
struct ModulationInit {
  Tensor nu_r, nu_s;
  std::vector<double> signs;
};

inline ModulationInit init_modulation(std::size_t K, const ModulationGeometry& geo, Rng& rng) {
  if (K < 2 || K % 2 != 0) throw ConfigError("modulation filter count must be even and >= 2");
  const std::size_t per_sign = K / 2;
  const auto n_rate = static_cast<std::size_t>(std::ceil(std::sqrt(1.25 * static_cast<double>(per_sign))));
  const std::size_t n_scale = (per_sign + n_rate - 1) / n_rate;
  const double wr = geo.max_rate_hz / static_cast<double>(n_rate);
  const double ws = geo.max_scale_cpo / static_cast<double>(n_scale);

  ModulationInit init{Tensor({K}), Tensor({K}), std::vector<double>(K)};
  for (std::size_t p = 0; p < per_sign; ++p) {
    const double r = (static_cast<double>(p % n_rate) + 0.5 + rng.uniform(-0.25, 0.25)) * wr;
    const double s = (static_cast<double>(p / n_rate) + 0.5 + rng.uniform(-0.25, 0.25)) * ws;
    const double nu_r = std::log(r / (geo.max_rate_hz - r));
    const double nu_s = std::log(s / (geo.max_scale_cpo - s));
    init.nu_r[p] = init.nu_r[p + per_sign] = nu_r;
    init.nu_s[p] = init.nu_s[p + per_sign] = nu_s;
    init.signs[p] = 1.0;
    init.signs[p + per_sign] = -1.0;
  }
  return init;
}

}  // namespace relfb
