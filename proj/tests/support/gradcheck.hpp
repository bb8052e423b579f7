#pragma once

// Central finite-difference oracle for tape gradients. Independent of the
// backward implementations: it only ever evaluates forward values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "tspsae/numerics/ops.hpp"

namespace tspsae::testing {

using Builder = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

inline double forward_value(const Builder& build, const std::vector<TensorD>& inputs) {
  ad::Tape<double> tape(false);
  std::vector<ad::Var<double>> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.constant(x));
  return build(tape, leaves).value().item();
}

inline std::vector<TensorD> analytic_gradients(const Builder& build, const std::vector<TensorD>& inputs) {
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.variable(x));
  tape.backward(build(tape, leaves));
  std::vector<TensorD> grads;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const TensorD* g = tape.grad_of(leaves[i]);
    grads.push_back(g ? *g : TensorD(inputs[i].shape()));
  }
  return grads;
}

inline std::vector<TensorD> numeric_gradients(const Builder& build, std::vector<TensorD> inputs, double h) {
  std::vector<TensorD> grads;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    TensorD g(inputs[t].shape());
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double orig = inputs[t][i];
      inputs[t][i] = orig + h;
      const double up = forward_value(build, inputs);
      inputs[t][i] = orig - h;
      const double down = forward_value(build, inputs);
      inputs[t][i] = orig;
      g[i] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// ||a - b|| / max(||a||, ||b||) over all tensors flattened together.
inline double relative_error(const std::vector<TensorD>& a, const std::vector<TensorD>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (std::size_t i = 0; i < a[t].size(); ++i) {
      diff += (a[t][i] - b[t][i]) * (a[t][i] - b[t][i]);
      na += a[t][i] * a[t][i];
      nb += b[t][i] * b[t][i];
    }
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
  return std::sqrt(diff) / denom;
}

inline double gradient_error(const Builder& build, const std::vector<TensorD>& inputs, double h = 1e-3) {
  return relative_error(analytic_gradients(build, inputs), numeric_gradients(build, inputs, h));
}

}  // namespace tspsae::testing
