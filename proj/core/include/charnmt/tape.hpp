#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "charnmt/tensor.hpp"

namespace charnmt::inline CHARNMT_ABI {

enum class InitKind { kUniform, kZeros, kOnes, kConstant };

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  InitKind init = InitKind::kUniform;
  Real init_constant = 0;
};

// Owns parameters in insertion order. References stay valid across moves.
class ParameterStore {
 public:
  Parameter& add(std::string name, Shape shape, InitKind init = InitKind::kUniform,
                 Real init_constant = 0);

  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t num_values() const;

  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.cbegin(); }
  auto end() const { return params_.cend(); }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return tape != nullptr; }
};

// Ordered record of executed primitives. backward() replays the recorded
// closures in exact reverse order; gradients accumulate over multiple uses.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Tensor value);
  // Differentiable leaf; its gradient is available via grad() after backward.
  Var leaf(Tensor value);
  // Leaf bound to a parameter. Each parameter is recorded once per tape and
  // its gradient is added to Parameter::grad at the end of backward().
  Var param(Parameter& p);

  const Tensor& value(Var v) const { return node_value(nodes_[v.id]); }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad_any(std::initializer_list<Var> vs) const;

  // Gradient of the last backward() target; zeros when never reached.
  Tensor grad(Var v) const;
  // nullptr when no gradient has flowed into v yet.
  const Tensor* grad_or_null(std::size_t id) const;
  // Accumulation target for backward closures; allocated on first use.
  Tensor& grad_ref(std::size_t id);

  // Records an op output. The caller attaches a closure with on_backward()
  // when the output requires gradients.
  Var push(Tensor value, bool requires_grad);
  void on_backward(BackwardFn fn);

  void backward(Var loss);

  std::size_t num_nodes() const noexcept { return nodes_.size(); }
  std::size_t num_ops() const noexcept { return ops_.size(); }

 private:
  struct Node {
    Tensor value;
    // Parameters are referenced, not copied; they stay frozen while a tape lives.
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
  };
  static const Tensor& node_value(const Node& n) {
    return n.external ? *n.external : n.value;
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<BackwardFn> ops_;
  std::unordered_map<Parameter*, std::size_t> param_nodes_;
  std::vector<std::pair<Parameter*, std::size_t>> param_order_;
};

}  // namespace charnmt
