#include "segsurv/tape.hpp"

#include <stdexcept>

namespace segsurv {

template <typename Scalar>
Parameter<Scalar>& ParameterSet<Scalar>::add(const std::string& name, Shape shape, bool trainable) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Parameter<Scalar> p;
  p.name = name;
  p.value = Tensor<Scalar>::zeros(shape);
  p.grad = Tensor<Scalar>::zeros(shape);
  p.trainable = trainable;
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return params_.back();
}

template <typename Scalar>
Parameter<Scalar>& ParameterSet<Scalar>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return params_[it->second];
}

template <typename Scalar>
const Parameter<Scalar>& ParameterSet<Scalar>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return params_[it->second];
}

template <typename Scalar>
void ParameterSet<Scalar>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename Scalar>
Index ParameterSet<Scalar>::trainable_count() const {
  Index n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += p.value.size();
  return n;
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<Scalar>{this, static_cast<Index>(nodes_.size() - 1)};
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Tensor<Scalar> value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::input(Tensor<Scalar> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::param(Parameter<Scalar>& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var<Scalar>{this, it->second};
  Node n;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = p.trainable;
  Var<Scalar> v = push(std::move(n));
  param_nodes_[&p] = v.id;
  return v;
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(Tensor<Scalar> value, const std::vector<Var<Scalar>>& inputs,
                                 BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (in.tape != this) throw std::invalid_argument("record: input belongs to a different tape");
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[static_cast<size_t>(in.id)].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

template <typename Scalar>
void Tape<Scalar>::backward(Var<Scalar> loss) {
  if (backward_done_) throw std::logic_error("backward: already called on this tape; reset() first");
  if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to a different tape");
  Node& root = nodes_.at(static_cast<size_t>(loss.id));
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(root.value.shape));
  }
  backward_done_ = true;
  root.grad = Tensor<Scalar>::constant(root.value.shape, Scalar(1));

  for (Index id = loss.id; id >= 0; --id) {
    Node& node = nodes_[static_cast<size_t>(id)];
    if (!node.requires_grad || node.grad.size() == 0 || !node.backward) continue;
    BackwardArgs<Scalar> args{node.grad, node.value, {}, {}};
    for (Index in : node.inputs) {
      Node& src = nodes_[static_cast<size_t>(in)];
      args.in_values.push_back(&src.value);
      if (src.requires_grad) {
        if (src.grad.size() != src.value.size()) src.grad = Tensor<Scalar>::zeros(src.value.shape);
        args.in_grads.push_back(&src.grad);
      } else {
        args.in_grads.push_back(nullptr);
      }
    }
    node.backward(args);
  }

  for (auto& node : nodes_) {
    if (node.param && node.requires_grad && node.grad.size() == node.value.size() && node.grad.size() > 0) {
      if (node.param->grad.size() != node.param->value.size()) node.param->zero_grad();
      node.param->grad.data += node.grad.data;
    }
  }
}

template <typename Scalar>
Tensor<Scalar> Tape<Scalar>::grad(Var<Scalar> v) const {
  const Node& node = nodes_.at(static_cast<size_t>(v.id));
  if (node.grad.size() == node.value.size() && node.grad.size() > 0) return node.grad;
  return Tensor<Scalar>::zeros(node.value.shape);
}

template <typename Scalar>
void Tape<Scalar>::reset() {
  nodes_.clear();
  param_nodes_.clear();
  backward_done_ = false;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace segsurv
