#pragma once

#include <cstdint>
#include <vector>

#include "tspsae/numerics/tape.hpp"

namespace tspsae {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed list of parameters.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<ad::Parameter<T>*> params, AdamConfig config);

  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  std::uint64_t step_count() const { return step_; }

  // Applies one update from each parameter's .grad. Gradients are left
  // untouched; call zero_grad() before the next accumulation.
  void step();

  void zero_grad();

  // Moment tensors, index-aligned with the parameter list (checkpointing).
  std::vector<BasicTensor<T>>& first_moments() { return m_; }
  std::vector<BasicTensor<T>>& second_moments() { return v_; }
  const std::vector<BasicTensor<T>>& first_moments() const { return m_; }
  const std::vector<BasicTensor<T>>& second_moments() const { return v_; }
  void set_step_count(std::uint64_t step) { step_ = step; }

 private:
  std::vector<ad::Parameter<T>*> params_;
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<BasicTensor<T>> m_;
  std::vector<BasicTensor<T>> v_;
};

// Global L2 norm of all parameter gradients.
template <class T>
double grad_norm(const std::vector<ad::Parameter<T>*>& params);

// Rescales gradients so their global norm is at most max_norm. Returns the
// norm before clipping.
template <class T>
double clip_grad_norm(const std::vector<ad::Parameter<T>*>& params, double max_norm);

}  // namespace tspsae
