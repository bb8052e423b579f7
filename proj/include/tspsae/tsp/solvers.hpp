#pragma once

#include <vector>

#include "tspsae/tsp/instance.hpp"

namespace tspsae::tsp {

struct Tour {
  std::vector<std::size_t> order;
  double length = 0.0;
};

Tour make_tour(const Instance& instance, std::vector<std::size_t> order);

// Greedy construction from `start`; ties go to the lowest index.
Tour nearest_neighbor(const Instance& instance, std::size_t start = 0);

// First-improvement 2-opt until no move shortens the tour by more than
// `min_gain`. Returned length never exceeds the initial one.
Tour two_opt(const Instance& instance, const Tour& initial, double min_gain = 1e-10);

inline constexpr std::size_t kHeldKarpMaxNodes = 16;

// Exact optimum by subset dynamic programming; n <= kHeldKarpMaxNodes,
// otherwise CapacityError.
Tour held_karp(const Instance& instance);

}  // namespace tspsae::tsp
