#include "tspsae/tsp/instance.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "tspsae/error.hpp"
#include "tspsae/rng.hpp"

namespace tspsae::tsp {

std::string_view to_string(Distribution d) {
  switch (d) {
    case Distribution::uniform:
      return "uniform";
    case Distribution::clusters:
      return "clusters";
    case Distribution::ring:
      return "ring";
  }
  return "unknown";
}

Distribution parse_distribution(std::string_view name) {
  if (name == "uniform") return Distribution::uniform;
  if (name == "clusters") return Distribution::clusters;
  if (name == "ring") return Distribution::ring;
  throw ParameterError("unknown distribution '" + std::string(name) + "'");
}

void Instance::validate() const {
  if (n < 3) throw ParameterError("instance: n must be >= 3, got " + std::to_string(n));
  if (coords.size() != n) {
    throw ParameterError("instance: n = " + std::to_string(n) + " but " + std::to_string(coords.size()) + " points");
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (double c : coords[i]) {
      if (!(c >= 0.0 && c <= 1.0)) throw ParameterError("instance: point " + std::to_string(i) + " outside [0,1]^2");
    }
  }
}

double Instance::distance(std::size_t i, std::size_t j) const {
  const double dx = coords[i][0] - coords[j][0];
  const double dy = coords[i][1] - coords[j][1];
  return std::sqrt(dx * dx + dy * dy);
}

Instance generate(Distribution distribution, std::size_t n, std::uint64_t seed, const GeneratorParams& params) {
  if (n < 3) throw ParameterError("generate: n must be >= 3, got " + std::to_string(n));
  Rng rng(seed);
  Instance inst;
  inst.n = n;
  inst.distribution = distribution;
  inst.seed = seed;
  inst.coords.resize(n);
  auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };

  switch (distribution) {
    case Distribution::uniform:
      for (auto& p : inst.coords) {
        p[0] = rng.uniform();
        p[1] = rng.uniform();
      }
      break;
    case Distribution::clusters: {
      if (params.cluster_count == 0) throw ParameterError("generate: cluster_count must be >= 1");
      std::vector<Point> centers(params.cluster_count);
      for (auto& c : centers) {
        c[0] = rng.uniform();
        c[1] = rng.uniform();
      }
      for (auto& p : inst.coords) {
        const Point& c = centers[rng.below(centers.size())];
        p[0] = clamp01(rng.normal(c[0], params.cluster_sigma));
        p[1] = clamp01(rng.normal(c[1], params.cluster_sigma));
      }
      break;
    }
    case Distribution::ring:
      for (auto& p : inst.coords) {
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double radius = rng.uniform(params.ring_inner, params.ring_outer);
        p[0] = clamp01(0.5 + radius * std::cos(angle) + rng.normal(0.0, params.ring_jitter));
        p[1] = clamp01(0.5 + radius * std::sin(angle) + rng.normal(0.0, params.ring_jitter));
      }
      break;
  }
  return inst;
}

bool is_permutation_of_n(std::span<const std::size_t> order, std::size_t n) {
  if (order.size() != n) return false;
  std::vector<bool> seen(n, false);
  for (std::size_t v : order) {
    if (v >= n || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

double tour_length(const Instance& instance, std::span<const std::size_t> order) {
  if (!is_permutation_of_n(order, instance.n)) {
    throw ContractError("tour_length: order is not a permutation of 0.." + std::to_string(instance.n - 1));
  }
  std::vector<double> edges(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    edges[i] = instance.distance(order[i], order[(i + 1) % order.size()]);
  }
  std::sort(edges.begin(), edges.end());
  double total = 0.0;
  for (double e : edges) total += e;
  return total;
}

std::string to_json(const Instance& instance) {
  nlohmann::json j;
  j["n"] = instance.n;
  j["distribution"] = std::string(to_string(instance.distribution));
  j["seed"] = instance.seed;
  nlohmann::json coords = nlohmann::json::array();
  for (const auto& p : instance.coords) coords.push_back({p[0], p[1]});
  j["coords"] = std::move(coords);
  return j.dump();
}

Instance instance_from_json(std::string_view text) {
  Instance inst;
  try {
    const auto j = nlohmann::json::parse(text);
    inst.n = j.at("n").get<std::size_t>();
    inst.distribution = parse_distribution(j.at("distribution").get<std::string>());
    inst.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& p : j.at("coords")) {
      if (p.size() != 2) throw FormatError("instance: coordinate entries must be [x, y]");
      inst.coords.push_back({p[0].get<double>(), p[1].get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("instance: ") + e.what());
  } catch (const ParameterError& e) {
    throw FormatError(e.what());
  }
  try {
    inst.validate();
  } catch (const ParameterError& e) {
    throw FormatError(e.what());
  }
  return inst;
}

void save_instance(const Instance& instance, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << to_json(instance) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Instance load_instance(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return instance_from_json(buffer.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace tspsae::tsp
