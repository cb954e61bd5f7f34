#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "sqz/tensor.hpp"

namespace sqz {

// A trainable tensor and its accumulated gradient. Gradients add up across
// backward passes until zero_grad() is called.
template <typename T>
struct Parameter {
  BasicTensor<T> value;
  BasicTensor<T> grad;

  Parameter() = default;
  explicit Parameter(BasicTensor<T> v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = BasicTensor<T>(value.shape());
    } else {
      grad.fill(T(0));
    }
  }
};

template <typename T>
class Tape;

// Handle to a node recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const BasicTensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode gradient tape. Ops append nodes in execution order; backward()
// visits them in exact reverse order, each op adding its contribution to its
// inputs' gradient accumulators. Leaves created with parameter() flush their
// accumulated gradient into the bound Parameter when backward finishes.
template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  // Called during backward with the tape and the id of the node being
  // differentiated; reads grad(self) and accumulates into its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // When disabled, ops record values only; no backward closures are kept.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(TensorT value);
  Var<T> parameter(Parameter<T>& param);

  // Appends an op node. Throws NumericError if the value holds NaN/Inf.
  Var<T> record(std::string_view op, TensorT value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward);
  Var<T> record(std::string_view op, TensorT value, const std::vector<Var<T>>& inputs,
                BackwardFn backward);

  const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
  // Gradient flowing into node `id`; zeros if nothing reached it.
  const TensorT& grad(std::size_t id);
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  // Mutable gradient accumulator of node `id` (allocated lazily).
  TensorT& grad_accumulator(std::size_t id);

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t op_count() const { return op_count_; }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded op backward. The loss
  // must be a single-element tensor recorded on this tape.
  void backward(Var<T> loss);

 private:
  struct Node {
    std::string op;
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  Var<T> push(Node node);

  std::vector<Node> nodes_;
  std::size_t op_count_ = 0;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace sqz
