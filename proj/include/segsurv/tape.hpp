// Reverse-mode differentiation tape.
//
// A Tape records every primitive applied during a forward pass. Each record
// owns its output value and a backward rule that maps the output gradient to
// additive contributions on its inputs. backward() walks the records in exact
// reverse order of creation, so the tape order is always a topological order.
//
// Parameters live outside the tape in a ParameterSet; a tape references them
// through leaf records and, at the end of backward(), adds the leaf gradients
// into Parameter::grad. One tape is confined to one thread; distinct tapes over
// distinct parameter sets may run concurrently.
#pragma once

#include "segsurv/tensor.hpp"

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace segsurv {

template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  // Buffers (batch-norm running statistics) are checkpointed but never trained.
  bool trainable = true;

  void zero_grad() { grad = Tensor<Scalar>::zeros(value.shape); }
};

/// Named parameters in registration order; element addresses are stable.
template <typename Scalar>
class ParameterSet {
 public:
  Parameter<Scalar>& add(const std::string& name, Shape shape, bool trainable = true);
  Parameter<Scalar>& get(const std::string& name);
  const Parameter<Scalar>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  size_t size() const { return params_.size(); }
  Parameter<Scalar>& operator[](size_t i) { return params_[i]; }
  const Parameter<Scalar>& operator[](size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  /// Total trainable scalar count.
  Index trainable_count() const;

 private:
  std::deque<Parameter<Scalar>> params_;
  std::map<std::string, size_t> index_;
};

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  Index id = -1;

  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape; }
  Index dim(Index axis) const { return value().dim(axis); }
  bool requires_grad() const;
};

/// Views handed to a backward rule. in_grads[i] is null when input i does not
/// need a gradient; otherwise the rule must accumulate (+=) into it.
template <typename Scalar>
struct BackwardArgs {
  const Tensor<Scalar>& out_grad;
  const Tensor<Scalar>& out_value;
  std::vector<const Tensor<Scalar>*> in_values;
  std::vector<Tensor<Scalar>*> in_grads;
};

template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(BackwardArgs<Scalar>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Non-differentiable leaf.
  Var<Scalar> constant(Tensor<Scalar> value);
  /// Differentiable leaf whose gradient is read back through grad().
  Var<Scalar> input(Tensor<Scalar> value);
  /// Leaf bound to a parameter; repeated calls return the same record.
  Var<Scalar> param(Parameter<Scalar>& p);

  /// Records a primitive output. The rule is dropped when no input needs a gradient.
  Var<Scalar> record(Tensor<Scalar> value, const std::vector<Var<Scalar>>& inputs, BackwardFn backward);

  /// Reverse sweep from a scalar loss. Throws if called twice without reset().
  void backward(Var<Scalar> loss);
  /// Gradient of the last backward() with respect to v (zeros if unreached).
  Tensor<Scalar> grad(Var<Scalar> v) const;

  const Tensor<Scalar>& value(Index id) const { return nodes_.at(static_cast<size_t>(id)).value; }
  bool requires_grad(Index id) const { return nodes_.at(static_cast<size_t>(id)).requires_grad; }
  size_t size() const { return nodes_.size(); }
  void reset();

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    std::vector<Index> inputs;
    BackwardFn backward;
    Parameter<Scalar>* param = nullptr;
    bool requires_grad = false;
  };

  Var<Scalar> push(Node node);

  // Deque keeps values of earlier records at stable addresses while new ones are appended.
  std::deque<Node> nodes_;
  std::map<const Parameter<Scalar>*, Index> param_nodes_;
  bool backward_done_ = false;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return tape->value(id);
}

template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return tape->requires_grad(id);
}

}  // namespace segsurv
