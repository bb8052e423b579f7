#pragma once

// Randomly shaped miniature networks that route through every
// differentiable primitive, for gradient checks.

#include <vector>

#include "support/gradcheck.hpp"
#include "tspsae/rng.hpp"

namespace tspsae::testing {

inline TensorD random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  TensorD t(std::move(shape));
  for (auto& v : t.values()) v = rng.normal(0.0, scale);
  return t;
}

struct MiniNet {
  Builder build;
  std::vector<TensorD> inputs;
};

// Two-layer tanh MLP with a layer-norm and a squared-error head. Hidden width
// starts at 4: a width-2 layer-norm is a sign function of its inputs, too
// sharp for a finite-difference step of 1e-3.
inline MiniNet random_two_layer_net(Rng& rng) {
  const std::size_t batch = 2 + rng.below(4), in = 2 + rng.below(5), hidden = 4 + rng.below(6), out = 1 + rng.below(4);
  MiniNet net;
  net.inputs = {random_tensor({batch, in}, rng), random_tensor({in, hidden}, rng, 0.7), random_tensor({hidden}, rng, 0.3),
                random_tensor({hidden}, rng, 0.3), random_tensor({hidden}, rng, 0.3), random_tensor({hidden, out}, rng, 0.7),
                random_tensor({batch, out}, rng)};
  net.build = [](ad::Tape<double>&, const std::vector<ad::Var<double>>& v) {
    auto h = ad::tanh(ad::add_row(ad::matmul(v[0], v[1]), v[2]));
    h = ad::layer_norm(h, v[3], v[4]);
    auto y = ad::matmul(h, v[5]);
    return ad::scale(ad::sum_squares(ad::sub(y, v[6])), 0.5);
  };
  return net;
}

// Attention block + pointer head, close to one encoder layer and one decode
// step of the policy.
inline MiniNet random_attention_net(Rng& rng) {
  const std::size_t groups = 1 + rng.below(3), nodes = 2 + rng.below(4), heads = 1 + rng.below(2);
  const std::size_t d = heads * (1 + rng.below(3));
  MiniNet net;
  net.inputs = {random_tensor({groups * nodes, d}, rng), random_tensor({d, d}, rng, 0.5), random_tensor({d, d}, rng, 0.5),
                random_tensor({d, d}, rng, 0.5), random_tensor({2 * d, d}, rng, 0.5), random_tensor({d}, rng, 0.5)};
  std::vector<std::size_t> current(groups), target(groups);
  ad::Mask mask(groups * nodes, 0);
  for (std::size_t g = 0; g < groups; ++g) {
    current[g] = g * nodes + rng.below(nodes);
    const std::size_t hidden = rng.below(nodes);
    target[g] = (hidden + 1) % nodes;
    if (nodes > 2) mask[g * nodes + hidden] = 1;
  }
  net.build = [=](ad::Tape<double>&, const std::vector<ad::Var<double>>& v) {
    auto q = ad::matmul(v[0], v[1]);
    auto k = ad::matmul(v[0], v[2]);
    auto val = ad::matmul(v[0], v[3]);
    auto h = ad::add(v[0], ad::attention(q, k, val, heads, groups));
    auto graph = ad::group_mean(h, groups);
    auto cur = ad::gather_rows(h, current);
    auto ctx = ad::matmul(ad::concat_cols(graph, cur), v[4]);
    ctx = ad::add(ctx, ad::broadcast_rows(v[5], groups));
    auto glimpse = ad::attention(ctx, h, h, heads, groups, &mask);
    auto logits = ad::scale(ad::tanh(ad::scale(ad::group_rowdot(glimpse, h), 0.5)), 3.0);
    auto logp = ad::log_softmax(logits, &mask, 0.8);
    std::vector<double> w(groups);
    for (std::size_t g = 0; g < groups; ++g) w[g] = 1.0 + 0.5 * double(g);
    auto probs = ad::softmax(ctx, 1, 1.3);
    return ad::add(ad::weighted_sum(ad::pick(logp, target), w), ad::mean(ad::mul(probs, probs)));
  };
  return net;
}

}  // namespace tspsae::testing
