#include "sqz/optim.hpp"

namespace sqz {

template <typename T>
void sgdm_step(BasicTensor<T>& param, const BasicTensor<T>& grad, BasicTensor<T>& velocity,
               const SgdmOptions& options) {
  if (grad.shape() != param.shape() || velocity.shape() != param.shape()) {
    throw ShapeError("sgdm_step: parameter " + shape_str(param.shape()) + ", gradient " +
                     shape_str(grad.shape()) + ", velocity " + shape_str(velocity.shape()));
  }
  if (!(options.learning_rate >= 0)) throw ConfigError("sgdm_step: learning rate must be >= 0");
  const T lr = static_cast<T>(options.learning_rate);
  const T mu = static_cast<T>(options.momentum);
  const T wd = static_cast<T>(options.weight_decay);
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = mu * velocity[i] + grad[i] + wd * param[i];
    param[i] -= lr * velocity[i];
  }
}

template <typename T>
void Sgdm<T>::step(const std::vector<Parameter<T>*>& params) {
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    for (const Parameter<T>* p : params) velocity_.emplace_back(p->value.shape());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (velocity_[i].shape() != params[i]->value.shape()) {
      throw ShapeError("Sgdm: parameter set changed shape; create a new optimizer after surgery");
    }
    sgdm_step(params[i]->value, params[i]->grad, velocity_[i], options_);
  }
}

template void sgdm_step(BasicTensor<float>&, const BasicTensor<float>&, BasicTensor<float>&,
                        const SgdmOptions&);
template void sgdm_step(BasicTensor<double>&, const BasicTensor<double>&, BasicTensor<double>&,
                        const SgdmOptions&);
template class Sgdm<float>;
template class Sgdm<double>;

}  // namespace sqz
