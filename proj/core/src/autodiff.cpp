#include "geonorm/autodiff.hpp"

#include "geonorm/errors.hpp"

namespace geonorm {

Parameter::Parameter(std::string name_in, DenseTensor value_in)
    : name(std::move(name_in)), value(std::move(value_in)), grad(value.shape(), value.precision()) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = DenseTensor(value.shape(), value.precision());
  } else {
    grad.fill(0.0);
  }
}

const DenseTensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("use of an unbound Var");
  return tape_->value(*this);
}

const DenseTensor& BackwardContext::output() const { return tape_.nodes_[node_].value; }

const DenseTensor& BackwardContext::out_grad() const { return tape_.nodes_[node_].grad; }

const DenseTensor& BackwardContext::input(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].value;
}

DenseTensor* BackwardContext::input_grad(std::size_t i) {
  bool fresh = false;
  DenseTensor* g = input_grad_for_overwrite(i, fresh);
  if (fresh) g->fill(0.0);
  return g;
}

DenseTensor* BackwardContext::input_grad_for_overwrite(std::size_t i, bool& fresh) {
  auto& in = tape_.nodes_[tape_.nodes_[node_].inputs.at(i)];
  fresh = false;
  if (!in.requires_grad) return nullptr;
  if (in.grad.size() != in.value.size() || in.grad.shape() != in.value.shape()) {
    in.grad = DenseTensor::uninitialized(in.value.shape(), tape_.precision_);
    fresh = true;
  }
  return &in.grad;
}

void Tape::check_owner(Var v) const {
  if (!v.valid()) throw ContractError("use of an unbound Var");
  if (&v.tape() != this || v.id() >= nodes_.size()) {
    throw ContractError("Var belongs to a different tape");
  }
}

Var Tape::push(Node node) {
  node.value.set_precision(precision_);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(DenseTensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(DenseTensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::record(DenseTensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    check_owner(in);
    n.inputs.push_back(in.id());
    n.requires_grad = n.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::backward(Var loss) {
  check_owner(loss);
  if (nodes_[loss.id()].value.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        to_string(nodes_[loss.id()].value.shape()));
  }
  for (auto& n : nodes_) n.grad = DenseTensor();
  auto& root = nodes_[loss.id()];
  root.grad = DenseTensor::full(root.value.shape(), 1.0, precision_);

  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      BackwardContext ctx(*this, id);
      n.backward(ctx);
      if (precision_ == Precision::kNarrow) {
        for (std::size_t in : n.inputs) {
          if (!nodes_[in].grad.empty()) nodes_[in].grad.set_precision(precision_);
        }
      }
    }
    if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
  }
}

const DenseTensor& Tape::value(Var v) const {
  check_owner(v);
  return nodes_[v.id()].value;
}

DenseTensor Tape::grad(Var v) const {
  check_owner(v);
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return DenseTensor(n.value.shape(), precision_);
  return n.grad;
}

bool Tape::requires_grad(Var v) const {
  check_owner(v);
  return nodes_[v.id()].requires_grad;
}

}  // namespace geonorm
