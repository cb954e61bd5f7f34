#include "sqz/autodiff.hpp"

#include <algorithm>

namespace sqz {

template <typename T>
Var<T> Tape<T>::push(Node node) {
  if (consumed_) throw Error("tape already differentiated; start a new tape");
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(TensorT value) {
  Node node;
  node.op = "constant";
  node.value = std::move(value);
  return push(std::move(node));
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& param) {
  Node node;
  node.op = "parameter";
  node.value = param.value;
  node.requires_grad = grad_enabled_;
  node.param = &param;
  return push(std::move(node));
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, TensorT value, std::initializer_list<Var<T>> inputs,
                       BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, TensorT value, const std::vector<Var<T>>& inputs,
                       BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError("non-finite value produced by op '" + std::string(op) + "'");
  }
  Node node;
  node.op = std::string(op);
  node.value = std::move(value);
  if (grad_enabled_) {
    for (const Var<T>& in : inputs) {
      if (in.tape_ != this) throw Error("op '" + node.op + "' mixes vars from different tapes");
      if (nodes_[in.id()].requires_grad) node.requires_grad = true;
    }
  }
  if (node.requires_grad) node.backward = std::move(backward);
  ++op_count_;
  return push(std::move(node));
}

template <typename T>
const typename Tape<T>::TensorT& Tape<T>::grad(std::size_t id) {
  return grad_accumulator(id);
}

template <typename T>
typename Tape<T>::TensorT& Tape<T>::grad_accumulator(std::size_t id) {
  Node& node = nodes_.at(id);
  if (node.grad.shape() != node.value.shape()) node.grad = TensorT(node.value.shape());
  return node.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (op_count_ == 0) throw Error("backward called on a tape with no recorded ops");
  if (loss.tape_ != this) throw Error("loss was not recorded on this tape");
  if (consumed_) throw Error("backward already ran on this tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  consumed_ = true;
  grad_accumulator(loss.id())[0] = T(1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.backward) node.backward(*this, i);
  }
  for (Node& node : nodes_) {
    if (node.param == nullptr || node.grad.empty()) continue;
    Parameter<T>& p = *node.param;
    if (p.grad.shape() != p.value.shape()) p.grad = TensorT(p.value.shape());
    auto dst = p.grad.values();
    auto src = node.grad.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace sqz
