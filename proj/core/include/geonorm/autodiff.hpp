#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "geonorm/tensor.hpp"

namespace geonorm {

/// A named trainable tensor with its accumulated gradient.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, DenseTensor value);

  std::string name;
  DenseTensor value;
  DenseTensor grad;

  void zero_grad();
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid for the
/// lifetime of the tape that produced it.
class Var {
 public:
  Var() = default;

  const DenseTensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class BackwardContext {
 public:
  const DenseTensor& output() const;
  const DenseTensor& out_grad() const;
  const DenseTensor& input(std::size_t i) const;
  // Zero-initialised on first use; nullptr when input i needs no gradient.
  DenseTensor* input_grad(std::size_t i);
  // Like input_grad, but a first-use buffer is left uninitialised and fresh is
  // set: the caller must then assign every element instead of accumulating.
  // Fetch and finish writing one input before asking for the next, since two
  // inputs may be the same node.
  DenseTensor* input_grad_for_overwrite(std::size_t i, bool& fresh);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

  Tape& tape_;
  std::size_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Records primitive operations in execution order. Nodes are appended only
/// after their inputs exist, so storage order is a topological order and the
/// backward sweep is a single reverse pass. A tape is built per forward pass
/// and thrown away afterwards.
class Tape {
 public:
  explicit Tape(Precision precision = Precision::kWide) : precision_(precision) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const { return precision_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(DenseTensor value);
  // Leaf that receives a gradient but is not bound to a Parameter.
  Var variable(DenseTensor value);
  // Leaf bound to p; backward() accumulates into p.grad.
  Var parameter(Parameter& p);

  Var record(DenseTensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Parameter
  // gradients accumulate across calls; node gradients are recomputed.
  void backward(Var loss);

  const DenseTensor& value(Var v) const;
  // Gradient from the last backward(); a zero tensor if v was not reached.
  DenseTensor grad(Var v) const;
  bool requires_grad(Var v) const;

 private:
  friend class BackwardContext;
  friend class Var;

  struct Node {
    DenseTensor value;
    DenseTensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  void check_owner(Var v) const;
  Var push(Node node);

  Precision precision_;
  std::deque<Node> nodes_;
};

}  // namespace geonorm
