#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tspsae::tsp {

enum class Distribution : std::uint32_t { uniform = 0, clusters = 1, ring = 2 };

std::string_view to_string(Distribution d);
Distribution parse_distribution(std::string_view name);

using Point = std::array<double, 2>;

/// Planar instance in the unit square.
struct Instance {
  std::size_t n = 0;
  std::vector<Point> coords;
  Distribution distribution = Distribution::uniform;
  std::uint64_t seed = 0;

  // Throws ParameterError if n < 3, sizes disagree or a point leaves [0,1]^2.
  void validate() const;

  double distance(std::size_t i, std::size_t j) const;
};

struct GeneratorParams {
  std::size_t cluster_count = 4;
  double cluster_sigma = 0.05;
  double ring_inner = 0.30;
  double ring_outer = 0.45;
  double ring_jitter = 0.02;
};

/// Deterministic in (distribution, n, seed).
Instance generate(Distribution distribution, std::size_t n, std::uint64_t seed, const GeneratorParams& params = {});

/// Cyclic Euclidean length of `order`. Edge lengths are summed in sorted
/// order, so the result is bit-identical under rotation and reversal.
double tour_length(const Instance& instance, std::span<const std::size_t> order);

bool is_permutation_of_n(std::span<const std::size_t> order, std::size_t n);

// Instance file: {"n", "distribution", "seed", "coords": [[x, y], ...]}.
std::string to_json(const Instance& instance);
Instance instance_from_json(std::string_view text);
void save_instance(const Instance& instance, const std::filesystem::path& path);
Instance load_instance(const std::filesystem::path& path);

}  // namespace tspsae::tsp
