#include "charnmt/tape.hpp"

namespace charnmt::inline CHARNMT_ABI {

Parameter& ParameterStore::add(std::string name, Shape shape, InitKind init,
                               Real init_constant) {
  if (index_.count(name))
    throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Tensor(shape);
  p->grad = Tensor(shape);
  p->init = init;
  p->init_constant = init_constant;
  index_.emplace(std::move(name), params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

std::size_t ParameterStore::num_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->grad.fill(0);
}

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) { return push(std::move(value), false); }

Var Tape::leaf(Tensor value) { return push(std::move(value), grad_enabled_); }

Var Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var{this, it->second};
  nodes_.push_back(Node{Tensor(), &p.value, Tensor(), grad_enabled_, false});
  Var v{this, nodes_.size() - 1};
  param_nodes_.emplace(&p, v.id);
  param_order_.emplace_back(&p, v.id);
  return v;
}

bool Tape::requires_grad_any(std::initializer_list<Var> vs) const {
  for (const Var& v : vs)
    if (nodes_[v.id].requires_grad) return true;
  return false;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.has_grad) return n.grad;
  return Tensor(node_value(n).shape());
}

const Tensor* Tape::grad_or_null(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.has_grad ? &n.grad : nullptr;
}

Tensor& Tape::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(node_value(n).shape());
    n.has_grad = true;
  }
  return n.grad;
}

Var Tape::push(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), nullptr, Tensor(),
                        requires_grad && grad_enabled_, false});
  return Var{this, nodes_.size() - 1};
}

void Tape::on_backward(BackwardFn fn) { ops_.push_back(std::move(fn)); }

void Tape::backward(Var loss) {
  CHARNMT_REQUIRE(loss.tape == this, "backward: variable from another tape");
  const Tensor& lv = node_value(nodes_[loss.id]);
  CHARNMT_REQUIRE(lv.size() == 1,
                  "backward: loss must be scalar, got " + shape_string(lv.shape()));
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad_ref(loss.id).fill(1);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)(*this);
  for (auto& [p, id] : param_order_) {
    if (const Tensor* g = grad_or_null(id)) p->grad.add_scaled(*g);
  }
}

}  // namespace charnmt
