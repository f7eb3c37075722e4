#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "relfb/errors.hpp"
#include "relfb/tensor.hpp"

namespace relfb {

/// A named learnable tensor and its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Insertion-ordered collection of parameters. Order is part of the
/// checkpoint format and of the optimizer's iteration order.
class ParamStore {
 public:
  Parameter& add(std::string name, Tensor value) {
    if (find(name)) throw ConfigError("duplicate parameter '" + name + "'");
    Tensor g = Tensor::zeros_like(value);
    params_.push_back(Parameter{std::move(name), std::move(value), std::move(g)});
    return params_.back();
  }

  Parameter* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  const Parameter* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Parameter& get(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw ConfigError("no parameter named '" + name + "'");
  }
  const Parameter& get(const std::string& name) const {
    if (const auto* p = find(name)) return *p;
    throw ConfigError("no parameter named '" + name + "'");
  }
  bool contains(const std::string& name) const { return find(name) != nullptr; }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
  }

  /// Total number of scalar parameters.
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i)
      if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value))
        return false;
    return true;
  }

 private:
  // std::vector keeps references stable only until the next add(); callers
  // finish building the store before taking long-lived references.
  std::vector<Parameter> params_;
};

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Records a forward computation and replays it in reverse to accumulate
/// exact gradients. Each op pushes its value and a closure that maps the
/// gradient of its output to gradients of its inputs.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  Var constant(Tensor value, std::string op = "constant") {
    check_finite(op, value);
    nodes_.push_back(Node{std::move(op), std::move(value), {}, false, nullptr, nullptr});
    return Var{nodes_.size() - 1};
  }

  Var parameter(Parameter& p) {
    check_finite("parameter " + p.name, p.value);
    nodes_.push_back(Node{"parameter " + p.name, p.value, {}, true, nullptr, &p});
    return Var{nodes_.size() - 1};
  }

  /// Adds an op node. The backward closure is kept only when some input
  /// requires a gradient.
  Var record(std::string op, Tensor value, std::initializer_list<Var> inputs,
             Backward backward) {
    check_finite(op, value);
    bool needs = false;
    for (Var v : inputs) needs = needs || node(v).requires_grad;
    nodes_.push_back(Node{std::move(op), std::move(value), {}, needs,
                          needs ? std::move(backward) : nullptr, nullptr});
    return Var{nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor& grad(Var v) {
    Node& n = node(v);
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor::zeros_like(n.value);
    return n.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every parameter leaf,
  /// adding into Parameter::grad.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar");
    grad(loss)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.shape() != n.value.shape()) continue;
      check_finite(n.op + " (backward)", n.grad);
      if (n.param) {
        n.param->grad += n.grad;
      } else if (n.backward) {
        // The closure may grow other nodes' grads; copy ours out first.
        const Tensor g = std::move(n.grad);
        n.grad = Tensor();
        n.backward(*this, g);
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw ShapeError("invalid Var");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw ShapeError("invalid Var");
    return nodes_[v.id];
  }

  static void check_finite(const std::string& op, const Tensor& t) {
    if (!t.all_finite()) throw NumericalError(op, "non-finite value");
  }

  std::vector<Node> nodes_;
};

}  // namespace relfb
