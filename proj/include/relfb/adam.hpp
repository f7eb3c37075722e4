#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "relfb/autodiff.hpp"
#include "relfb/errors.hpp"
#include "relfb/tensor.hpp"

namespace relfb {

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;   // one per parameter, store order
  std::vector<Tensor> second_moment;

  static AdamState for_params(const ParamStore& params, double lr = 1e-4) {
    AdamState s;
    s.lr = lr;
    for (const auto& p : params) {
      s.first_moment.push_back(Tensor::zeros_like(p.value));
      s.second_moment.push_back(Tensor::zeros_like(p.value));
    }
    return s;
  }
};

/// One bias-corrected Adam update of every parameter from its .grad.
inline void adam_step(AdamState& state, ParamStore& params) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size())
    throw ShapeError("adam_step: optimizer tracks " + std::to_string(state.first_moment.size()) +
                     " tensors, store has " + std::to_string(params.size()));
  std::size_t idx = 0;
  for (auto& p : params) {
    const Tensor& m = state.first_moment[idx];
    if (m.shape() != p.value.shape() || state.second_moment[idx].shape() != p.value.shape() ||
        p.grad.shape() != p.value.shape())
      throw ShapeError("adam_step: shape mismatch for '" + p.name + "'");
    ++idx;
  }

  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  idx = 0;
  for (auto& p : params) {
    Tensor& m = state.first_moment[idx];
    Tensor& v = state.second_moment[idx];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    ++idx;
  }
}

}  // namespace relfb
