#include "tspsae/numerics/adam.hpp"

#include <cmath>

namespace tspsae {

template <class T>
Adam<T>::Adam(std::vector<ad::Parameter<T>*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  if (!(config_.lr > 0.0) || !(config_.beta1 >= 0.0 && config_.beta1 < 1.0) ||
      !(config_.beta2 >= 0.0 && config_.beta2 < 1.0) || !(config_.eps > 0.0)) {
    throw ParameterError("adam: lr > 0, 0 <= beta < 1 and eps > 0 required");
  }
  for (const auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

template <class T>
void Adam<T>::step() {
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, double(step_));
  const double correction2 = 1.0 - std::pow(b2, double(step_));
  const double step_size = config_.lr / correction1;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    ad::Parameter<T>& p = *params_[k];
    if (p.grad.shape() != p.value.shape()) {
      throw DimensionError("adam: gradient " + shape_string(p.grad.shape()) + " for parameter " + p.name + " " +
                           shape_string(p.value.shape()));
    }
    BasicTensor<T>& m = m_[k];
    BasicTensor<T>& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = b1 * double(m[i]) + (1.0 - b1) * g;
      const double vi = b2 * double(v[i]) + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double denom = std::sqrt(vi / correction2) + config_.eps;
      p.value[i] = static_cast<T>(double(p.value[i]) - step_size * mi / denom);
    }
  }
}

template <class T>
void Adam<T>::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

template <class T>
double grad_norm(const std::vector<ad::Parameter<T>*>& params) {
  double total = 0.0;
  for (const auto* p : params) {
    for (T g : p->grad.values()) total += double(g) * double(g);
  }
  return std::sqrt(total);
}

template <class T>
double clip_grad_norm(const std::vector<ad::Parameter<T>*>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto* p : params) {
      for (T& g : p->grad.values()) g *= factor;
    }
  }
  return norm;
}

template class Adam<float>;
template class Adam<double>;
template double grad_norm<float>(const std::vector<ad::Parameter<float>*>&);
template double grad_norm<double>(const std::vector<ad::Parameter<double>*>&);
template double clip_grad_norm<float>(const std::vector<ad::Parameter<float>*>&, double);
template double clip_grad_norm<double>(const std::vector<ad::Parameter<double>*>&, double);

}  // namespace tspsae
