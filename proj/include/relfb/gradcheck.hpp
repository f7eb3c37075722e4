#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "relfb/autodiff.hpp"

namespace relfb {

struct GradcheckEntry {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradcheckScalar {
  std::size_t entry = 0;  // index into GradcheckReport::entries
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  std::vector<GradcheckScalar> scalars;  // every checked scalar, in check order

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

inline std::ostream& operator<<(std::ostream& os, const GradcheckReport& r) {
  os << "parameter,count,max_rel_error,worst_index,analytic,numeric\n";
  for (const auto& e : r.entries)
    os << e.name << ',' << e.count << ',' << e.max_rel_error << ',' << e.worst_index << ','
       << e.worst_analytic << ',' << e.worst_numeric << '\n';
  return os;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-12});
}

/// Builds the scalar loss on a fresh tape from the current parameter values.
using LossBuilder = std::function<Var(Tape&, ParamStore&)>;

inline double evaluate_loss(ParamStore& params, const LossBuilder& build) {
  Tape tape;
  return tape.value(build(tape, params))[0];
}

/// Picks which scalar indices of a parameter to check; empty means all.
using IndexSelector = std::function<std::vector<std::size_t>(const Parameter&)>;

/// Compares reverse-mode gradients with central differences
/// (L(theta + h) - L(theta - h)) / 2h for every selected scalar parameter.
inline GradcheckReport gradcheck(ParamStore& params, const LossBuilder& build, double h = 1e-5,
                                 const IndexSelector& select = {}) {
  params.zero_grad();
  {
    Tape tape;
    tape.backward(build(tape, params));
  }
  GradcheckReport report;
  for (auto& p : params) {
    std::vector<std::size_t> indices;
    if (select) indices = select(p);
    if (indices.empty()) {
      indices.resize(p.value.size());
      std::iota(indices.begin(), indices.end(), 0);
    }
    GradcheckEntry e{p.name, indices.size()};
    const Tensor analytic = p.grad;
    bool first = true;
    for (const std::size_t i : indices) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double plus = evaluate_loss(params, build);
      p.value[i] = orig - h;
      const double minus = evaluate_loss(params, build);
      p.value[i] = orig;
      const double numeric = (plus - minus) / (2.0 * h);
      const double err = relative_error(analytic[i], numeric);
      report.scalars.push_back({report.entries.size(), i, analytic[i], numeric, err});
      if (err > e.max_rel_error || first) {
        first = false;
        e.max_rel_error = err;
        e.worst_index = i;
        e.worst_analytic = analytic[i];
        e.worst_numeric = numeric;
      }
    }
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace relfb
