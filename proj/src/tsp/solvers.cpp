#include "tspsae/tsp/solvers.hpp"

#include <algorithm>
#include <limits>

#include "tspsae/error.hpp"

namespace tspsae::tsp {

Tour make_tour(const Instance& instance, std::vector<std::size_t> order) {
  Tour t;
  t.length = tour_length(instance, order);
  t.order = std::move(order);
  return t;
}

Tour nearest_neighbor(const Instance& instance, std::size_t start) {
  const std::size_t n = instance.n;
  if (start >= n) throw ParameterError("nearest_neighbor: start node out of range");
  std::vector<bool> visited(n, false);
  std::vector<std::size_t> order{start};
  visited[start] = true;
  std::size_t current = start;
  for (std::size_t step = 1; step < n; ++step) {
    std::size_t best = n;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (visited[j]) continue;
      const double d = instance.distance(current, j);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    visited[best] = true;
    order.push_back(best);
    current = best;
  }
  return make_tour(instance, std::move(order));
}

Tour two_opt(const Instance& instance, const Tour& initial, double min_gain) {
  const std::size_t n = instance.n;
  if (!is_permutation_of_n(initial.order, n)) throw ContractError("two_opt: initial order is not a permutation");
  std::vector<std::size_t> order = initial.order;
  bool improved = true;
  while (improved) {
    improved = false;
    // Reversing order[i+1..j] replaces edges (i,i+1),(j,j+1) by (i,j),(i+1,j+1).
    for (std::size_t i = 0; i + 2 < n && !improved; ++i) {
      for (std::size_t j = i + 2; j < n; ++j) {
        const std::size_t a = order[i], b = order[i + 1], c = order[j], d = order[(j + 1) % n];
        if (d == a) continue;
        const double delta =
            instance.distance(a, c) + instance.distance(b, d) - instance.distance(a, b) - instance.distance(c, d);
        if (delta < -min_gain) {
          std::reverse(order.begin() + static_cast<std::ptrdiff_t>(i + 1), order.begin() + static_cast<std::ptrdiff_t>(j + 1));
          improved = true;
          break;
        }
      }
    }
  }
  Tour result = make_tour(instance, std::move(order));
  // Sorted summation can differ from the input's length by rounding only.
  if (result.length > initial.length) return make_tour(instance, initial.order);
  return result;
}

Tour held_karp(const Instance& instance) {
  const std::size_t n = instance.n;
  if (n > kHeldKarpMaxNodes) {
    throw CapacityError("held_karp: n = " + std::to_string(n) + " exceeds the cap of " +
                        std::to_string(kHeldKarpMaxNodes));
  }
  instance.validate();
  // Node 0 is the fixed start; subsets range over nodes 1..n-1, bit (v-1).
  const std::size_t m = n - 1;
  const std::size_t full = (std::size_t{1} << m) - 1;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> cost((full + 1) * m, inf);
  std::vector<std::uint8_t> parent((full + 1) * m, 0);

  for (std::size_t v = 0; v < m; ++v) cost[(std::size_t{1} << v) * m + v] = instance.distance(0, v + 1);
  for (std::size_t mask = 1; mask <= full; ++mask) {
    for (std::size_t last = 0; last < m; ++last) {
      if (!(mask & (std::size_t{1} << last))) continue;
      const std::size_t prev_mask = mask & ~(std::size_t{1} << last);
      if (prev_mask == 0) continue;
      double best = inf;
      std::uint8_t best_prev = 0;
      for (std::size_t prev = 0; prev < m; ++prev) {
        if (!(prev_mask & (std::size_t{1} << prev))) continue;
        const double c = cost[prev_mask * m + prev] + instance.distance(prev + 1, last + 1);
        if (c < best) {
          best = c;
          best_prev = static_cast<std::uint8_t>(prev);
        }
      }
      cost[mask * m + last] = best;
      parent[mask * m + last] = best_prev;
    }
  }

  double best = inf;
  std::size_t last = 0;
  for (std::size_t v = 0; v < m; ++v) {
    const double c = cost[full * m + v] + instance.distance(v + 1, 0);
    if (c < best) {
      best = c;
      last = v;
    }
  }
  std::vector<std::size_t> reversed;
  std::size_t mask = full;
  while (mask) {
    reversed.push_back(last + 1);
    const std::size_t prev = parent[mask * m + last];
    mask &= ~(std::size_t{1} << last);
    last = prev;
  }
  std::vector<std::size_t> order{0};
  order.insert(order.end(), reversed.rbegin(), reversed.rend());
  return make_tour(instance, std::move(order));
}

}  // namespace tspsae::tsp
