#include "n2n/optim.hpp"

#include <cmath>

namespace n2n::nn {

template <typename T>
void Adam<T>::step(const std::vector<Param<T>*>& params) {
  if (m_.size() != params.size()) {
    m_.clear();
    v_.clear();
    for (const Param<T>* p : params) {
      m_.emplace_back(p->size(), T(0));
      v_.emplace_back(p->size(), T(0));
    }
  }
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const T step = static_cast<T>(config_.learning_rate / correction1);
  const T inv_c2 = static_cast<T>(1.0 / correction2);
  const T eps = static_cast<T>(config_.epsilon);
  const T tb1 = static_cast<T>(b1);
  const T tb2 = static_cast<T>(b2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param<T>& p = *params[k];
    if (m_[k].size() != p.size()) throw ShapeError("Adam: parameter list changed shape at " + p.name);
    T* m = m_[k].data();
    T* v = v_[k].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T g = p.grad[i];
      m[i] = tb1 * m[i] + (T(1) - tb1) * g;
      v[i] = tb2 * v[i] + (T(1) - tb2) * g * g;
      p.value[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
  }
}

template <typename T>
void SgdMomentum<T>::step(const std::vector<Param<T>*>& params) {
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    for (const Param<T>* p : params) velocity_.emplace_back(p->size(), T(0));
  }
  const T lr = static_cast<T>(config_.learning_rate);
  const T mu = static_cast<T>(config_.momentum);
  const T wd = static_cast<T>(config_.weight_decay);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param<T>& p = *params[k];
    T* vel = velocity_[k].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T g = p.grad[i] + wd * p.value[i];
      vel[i] = mu * vel[i] - lr * g;
      p.value[i] += vel[i];
    }
  }
}

template class Adam<float>;
template class Adam<double>;
template class SgdMomentum<float>;
template class SgdMomentum<double>;

}  // namespace n2n::nn
