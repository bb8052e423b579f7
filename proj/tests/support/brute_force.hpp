#pragma once

#include <algorithm>
#include <limits>
#include <numeric>

#include "tspsae/tsp/instance.hpp"

namespace tspsae::testing {

// Exhaustive minimum over all tours starting at node 0.
inline double brute_force_optimum(const tsp::Instance& inst) {
  std::vector<std::size_t> order(inst.n);
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    best = std::min(best, tsp::tour_length(inst, order));
  } while (std::next_permutation(order.begin() + 1, order.end()));
  return best;
}

}  // namespace tspsae::testing
