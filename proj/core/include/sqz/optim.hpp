#pragma once

#include <vector>

#include "sqz/autodiff.hpp"

namespace sqz {

struct SgdmOptions {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

// velocity <- momentum * velocity + (grad + weight_decay * param)
// param    <- param - learning_rate * velocity
template <typename T>
void sgdm_step(BasicTensor<T>& param, const BasicTensor<T>& grad, BasicTensor<T>& velocity,
               const SgdmOptions& options);

// Holds one velocity buffer per parameter, in the order parameters are given.
template <typename T>
class Sgdm {
 public:
  explicit Sgdm(SgdmOptions options) : options_(options) {}

  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  const SgdmOptions& options() const { return options_; }

  void step(const std::vector<Parameter<T>*>& params);

 private:
  SgdmOptions options_;
  std::vector<BasicTensor<T>> velocity_;
};

extern template class Sgdm<float>;
extern template class Sgdm<double>;

}  // namespace sqz
