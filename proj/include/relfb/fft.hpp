#pragma once

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <mutex>
#include <span>
#include <vector>

#include "relfb/errors.hpp"

namespace relfb {

namespace detail {
// FFTW's planner is not thread-safe; execution of distinct plans is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Real-to-complex / complex-to-real transform pair of fixed length.
/// Forward output has n/2+1 bins; inverse is unnormalized (FFTW convention),
/// so inverse(forward(x)) == n * x.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n), real_(n), spec_(n / 2 + 1) {
    if (n == 0) throw ShapeError("RealFft: zero length");
    std::lock_guard lock(detail::fftw_planner_mutex());
    auto* spec = reinterpret_cast<fftw_complex*>(spec_.data());
    fwd_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), real_.data(), spec, FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), spec, real_.data(), FFTW_ESTIMATE);
  }

  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  ~RealFft() {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
  }

  std::size_t size() const noexcept { return n_; }
  std::size_t bins() const noexcept { return n_ / 2 + 1; }

  /// Input shorter than n is zero-padded.
  std::vector<std::complex<double>> forward(std::span<const double> x) {
    if (x.size() > n_) throw ShapeError("RealFft::forward: input longer than transform");
    std::fill(real_.begin(), real_.end(), 0.0);
    std::copy(x.begin(), x.end(), real_.begin());
    fftw_execute(fwd_);
    return spec_;
  }

  std::vector<double> inverse(std::span<const std::complex<double>> spectrum) {
    if (spectrum.size() != bins()) throw ShapeError("RealFft::inverse: wrong bin count");
    std::copy(spectrum.begin(), spectrum.end(), spec_.begin());
    fftw_execute(inv_);
    return real_;
  }

 private:
  std::size_t n_;
  std::vector<double> real_;
  std::vector<std::complex<double>> spec_;
  fftw_plan fwd_ = nullptr;
  fftw_plan inv_ = nullptr;
};

/// Magnitude of the full 2-D DFT of a rows x cols array zero-padded to
/// n_rows x n_cols. Row-major output.
inline std::vector<double> fft2_magnitude(std::span<const double> x, std::size_t rows,
                                          std::size_t cols, std::size_t n_rows,
                                          std::size_t n_cols) {
  if (x.size() != rows * cols || rows > n_rows || cols > n_cols)
    throw ShapeError("fft2_magnitude: bad shape");
  std::vector<std::complex<double>> buf(n_rows * n_cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) buf[r * n_cols + c] = x[r * cols + c];
  fftw_plan plan;
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    auto* p = reinterpret_cast<fftw_complex*>(buf.data());
    plan = fftw_plan_dft_2d(static_cast<int>(n_rows), static_cast<int>(n_cols), p, p,
                            FFTW_FORWARD, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  std::vector<double> mag(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) mag[i] = std::abs(buf[i]);
  return mag;
}

}  // namespace relfb
