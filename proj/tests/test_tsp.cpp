#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "support/brute_force.hpp"
#include "tspsae/error.hpp"
#include "tspsae/rng.hpp"
#include "tspsae/tsp/solvers.hpp"

using namespace tspsae;
using namespace tspsae::tsp;

namespace {

Instance from_points(std::vector<Point> pts) {
  Instance inst;
  inst.n = pts.size();
  inst.coords = std::move(pts);
  return inst;
}

Instance unit_square() { return from_points({{0, 0}, {1, 0}, {1, 1}, {0, 1}}); }

}  // namespace

TEST_CASE("generate: shape, bounds and determinism") {
  const auto inst = generate(Distribution::uniform, 100, 42);
  CHECK(inst.n == 100);
  CHECK(inst.coords.size() == 100);
  CHECK_NOTHROW(inst.validate());
  for (auto d : {Distribution::uniform, Distribution::clusters, Distribution::ring}) {
    const auto a = generate(d, 37, 9);
    const auto b = generate(d, 37, 9);
    CHECK(a.coords == b.coords);
    CHECK(generate(d, 37, 10).coords != a.coords);
  }
  CHECK_THROWS_AS(generate(Distribution::uniform, 2, 1), ParameterError);
}

TEST_CASE("generate: every distribution stays in the unit square over 1000 seeds") {
  for (auto d : {Distribution::uniform, Distribution::clusters, Distribution::ring}) {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const auto inst = generate(d, 20, seed);
      for (const auto& p : inst.coords) {
        REQUIRE(p[0] >= 0.0);
        REQUIRE(p[0] <= 1.0);
        REQUIRE(p[1] >= 0.0);
        REQUIRE(p[1] <= 1.0);
      }
    }
  }
}

TEST_CASE("generate: clusters split into at least two groups") {
  // Recover the centres with the generator's own stream, then assign each
  // point to its nearest centre.
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto inst = generate(Distribution::clusters, 200, seed);
    Rng rng(seed);
    std::vector<Point> centers(4);
    for (auto& c : centers) c = {rng.uniform(), rng.uniform()};
    std::vector<int> counts(4, 0);
    for (const auto& p : inst.coords) {
      std::size_t best = 0;
      double best_d = 1e9;
      for (std::size_t c = 0; c < 4; ++c) {
        const double d = std::hypot(p[0] - centers[c][0], p[1] - centers[c][1]);
        if (d < best_d) best_d = d, best = c;
      }
      ++counts[best];
    }
    CHECK(std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) >= 2);
  }
}

TEST_CASE("generate: ring points lie near the annulus") {
  const auto inst = generate(Distribution::ring, 500, 3);
  for (const auto& p : inst.coords) {
    const double r = std::hypot(p[0] - 0.5, p[1] - 0.5);
    CHECK(r > 0.3 - 5 * 0.02 * std::sqrt(2.0));
    CHECK(r < 0.45 + 5 * 0.02 * std::sqrt(2.0));
  }
}

TEST_CASE("tour_length: square, collinear, invalid order") {
  const auto sq = unit_square();
  std::vector<std::size_t> order{0, 1, 2, 3};
  CHECK(tour_length(sq, order) == doctest::Approx(4.0).epsilon(1e-12));

  const auto line = from_points({{0, 0}, {0.5, 0}, {1, 0}});
  std::vector<std::size_t> perm{0, 1, 2};
  do {
    CHECK(tour_length(line, perm) == doctest::Approx(2.0).epsilon(1e-12));
  } while (std::next_permutation(perm.begin(), perm.end()));

  std::vector<std::size_t> dup{0, 1, 1, 3};
  std::vector<std::size_t> short_order{0, 1, 2};
  CHECK_THROWS_AS(tour_length(sq, dup), ContractError);
  CHECK_THROWS_AS(tour_length(sq, short_order), ContractError);
}

TEST_CASE("tour_length is exactly invariant under rotation and reversal") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto inst = generate(Distribution::uniform, 15, seed);
    std::vector<std::size_t> order(15);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng.engine());
    const double base = tour_length(inst, order);
    auto rotated = order;
    std::rotate(rotated.begin(), rotated.begin() + 1 + static_cast<long>(seed % 14), rotated.end());
    auto reversed = order;
    std::reverse(reversed.begin(), reversed.end());
    CHECK(tour_length(inst, rotated) == base);
    CHECK(tour_length(inst, reversed) == base);
  }
}

TEST_CASE("tour_length reaches the exhaustive minimum only at optimal orders") {
  const auto inst = generate(Distribution::uniform, 8, 123);
  const double best = testing::brute_force_optimum(inst);
  const Tour opt = held_karp(inst);
  CHECK(opt.length == best);
  std::vector<std::size_t> order(8);
  std::iota(order.begin(), order.end(), 0);
  std::size_t optimal_orders = 0;
  do {
    const double len = tour_length(inst, order);
    CHECK(len >= best);
    if (len == best) ++optimal_orders;
  } while (std::next_permutation(order.begin() + 1, order.end()));
  // One optimal cycle, visited in both directions from node 0.
  CHECK(optimal_orders == 2);
}

TEST_CASE("nearest_neighbor") {
  CHECK(nearest_neighbor(unit_square(), 0).length == doctest::Approx(4.0).epsilon(1e-12));

  const auto line = from_points({{0, 0}, {0.25, 0}, {0.6, 0}, {1, 0}});
  CHECK(nearest_neighbor(line, 0).length == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(nearest_neighbor(line, 3).length == doctest::Approx(2.0).epsilon(1e-12));

  // Equidistant candidates: lowest index wins.
  const auto tie = from_points({{0.5, 0.5}, {0.5, 0.9}, {0.5, 0.1}, {0.1, 0.5}});
  CHECK(nearest_neighbor(tie, 0).order[1] == 1);

  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto inst = generate(Distribution::uniform, 8, seed);
    const Tour nn = nearest_neighbor(inst, seed % 8);
    CHECK(is_permutation_of_n(nn.order, 8));
    CHECK(nn.order.front() == seed % 8);
    CHECK(nn.length >= held_karp(inst).length);
  }
  CHECK_THROWS_AS(nearest_neighbor(unit_square(), 4), ParameterError);
}

TEST_CASE("two_opt: optimal square unchanged, crossing square uncrossed") {
  const auto sq = unit_square();
  const Tour good = make_tour(sq, {0, 1, 2, 3});
  CHECK(two_opt(sq, good).order == good.order);

  const auto crossing = from_points({{0, 0}, {1, 1}, {1, 0}, {0, 1}});
  const Tour bad = make_tour(crossing, {0, 1, 2, 3});
  CHECK(bad.length == doctest::Approx(2.0 + 2.0 * std::sqrt(2.0)));
  CHECK(two_opt(crossing, bad).length == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("two_opt: never worse, idempotent, locally optimal") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto inst = generate(Distribution::uniform, 25, seed);
    std::vector<std::size_t> order(25);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng.engine());
    const Tour start = make_tour(inst, order);
    const Tour once = two_opt(inst, start);
    CHECK(once.length <= start.length);
    CHECK(two_opt(inst, once).order == once.order);
    for (std::size_t i = 0; i + 2 < 25; ++i) {
      for (std::size_t j = i + 2; j < 25; ++j) {
        const std::size_t a = once.order[i], b = once.order[i + 1], c = once.order[j], d = once.order[(j + 1) % 25];
        if (d == a) continue;
        CHECK(inst.distance(a, c) + inst.distance(b, d) - inst.distance(a, b) - inst.distance(c, d) >= -1e-10);
      }
    }
  }
}

TEST_CASE("two_opt: within 8% of optimal on at least 90% of n=10 instances") {
  int close = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto inst = generate(Distribution::uniform, 10, seed);
    const double opt = held_karp(inst).length;
    const Tour t = two_opt(inst, nearest_neighbor(inst, 0));
    if (t.length <= 1.08 * opt) ++close;
  }
  CHECK(close >= 90);
}

TEST_CASE("held_karp: square, triangle, capacity") {
  CHECK(held_karp(unit_square()).length == doctest::Approx(4.0).epsilon(1e-12));
  const auto tri = from_points({{0, 0}, {0.3, 0.9}, {1, 0.2}});
  const double perimeter = tri.distance(0, 1) + tri.distance(1, 2) + tri.distance(2, 0);
  CHECK(held_karp(tri).length == doctest::Approx(perimeter).epsilon(1e-12));
  CHECK_THROWS_AS(held_karp(generate(Distribution::uniform, 17, 1)), CapacityError);
  CHECK_NOTHROW(held_karp(generate(Distribution::uniform, 12, 1)));
}

TEST_CASE("held_karp equals the exhaustive minimum for n <= 8") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    for (auto d : {Distribution::uniform, Distribution::clusters, Distribution::ring}) {
      const auto inst = generate(d, 3 + seed % 6, seed);
      const Tour t = held_karp(inst);
      CHECK(is_permutation_of_n(t.order, inst.n));
      CHECK(t.length == testing::brute_force_optimum(inst));
    }
  }
}

TEST_CASE("instance JSON round-trips exactly") {
  const auto path = std::filesystem::temp_directory_path() / "tspsae_instance_test.json";
  for (auto d : {Distribution::uniform, Distribution::clusters, Distribution::ring}) {
    const auto inst = generate(d, 30, 77);
    save_instance(inst, path);
    const auto back = load_instance(path);
    CHECK(back.n == inst.n);
    CHECK(back.seed == inst.seed);
    CHECK(back.distribution == inst.distribution);
    CHECK(back.coords == inst.coords);
  }
  std::filesystem::remove(path);
  CHECK_THROWS_AS(instance_from_json(R"({"n": 3, "distribution": "uniform", "seed": 1, "coords": [[0,0],[1,1]]})"),
                  FormatError);
  CHECK_THROWS_AS(instance_from_json(R"({"n": 3, "distribution": "spiral", "seed": 1, "coords": []})"), FormatError);
  CHECK_THROWS_AS(instance_from_json("not json"), FormatError);
}
