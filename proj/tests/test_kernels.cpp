#include <cmath>
#include <vector>

#include "doctest.h"
#include "tspsae/numerics/kernels.hpp"
#include "tspsae/rng.hpp"

using namespace tspsae;
using kernels::Isa;

namespace {

template <class T>
std::vector<T> random_values(std::size_t n, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return v;
}

template <class T>
double max_rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({1.0, std::abs(double(a[i])), std::abs(double(b[i]))});
    worst = std::max(worst, std::abs(double(a[i]) - double(b[i])) / scale);
  }
  return worst;
}

struct IsaGuard {
  Isa saved = kernels::active_isa();
  ~IsaGuard() { kernels::set_isa(saved); }
};

template <class T>
void check_variant_matches_reference(Isa isa, double tol) {
  const auto& ref = kernels::table_for<T>(Isa::scalar);
  const auto& var = kernels::table_for<T>(isa);
  Rng rng(17);
  // Sizes straddle the register tile (4 rows x 2 vectors) and its tails.
  for (std::size_t m : {1u, 3u, 4u, 5u, 9u, 20u}) {
    for (std::size_t k : {1u, 7u, 16u, 33u}) {
      for (std::size_t n : {1u, 3u, 8u, 15u, 16u, 17u, 40u}) {
        const auto a = random_values<T>(m * k, rng);
        const auto b = random_values<T>(k * n, rng);
        const auto init = random_values<T>(m * n, rng);
        for (bool acc : {false, true}) {
          auto c_ref = init, c_var = init;
          ref.gemm_nn(m, k, n, a.data(), b.data(), c_ref.data(), acc);
          var.gemm_nn(m, k, n, a.data(), b.data(), c_var.data(), acc);
          CHECK(max_rel_diff(c_ref, c_var) < tol);
        }
      }
    }
  }
  for (std::size_t n : {0u, 1u, 7u, 8u, 16u, 31u, 100u}) {
    const auto x = random_values<T>(n, rng);
    const auto y = random_values<T>(n, rng);
    CHECK(std::abs(double(ref.dot(n, x.data(), y.data())) - double(var.dot(n, x.data(), y.data()))) <
          tol * std::max(1.0, double(n)));
    auto y_ref = y, y_var = y;
    ref.axpy(n, T(0.37), x.data(), y_ref.data());
    var.axpy(n, T(0.37), x.data(), y_var.data());
    CHECK(max_rel_diff(y_ref, y_var) < tol);
  }
}

}  // namespace

TEST_CASE("dispatch reports a usable instruction set") {
  IsaGuard guard;
  CHECK(kernels::set_isa(Isa::scalar));
  CHECK(kernels::active_isa() == Isa::scalar);
  const Isa best = kernels::detect_isa();
  CHECK(kernels::set_isa(best));
  CHECK(kernels::active_isa() == best);
  CHECK(kernels::isa_name(Isa::scalar) == "scalar");
}

TEST_CASE("vectorized kernels agree with the scalar reference") {
  if (kernels::detect_isa() == Isa::scalar) {
    MESSAGE("host has no vector ISA; only the reference path is exercised");
    return;
  }
  check_variant_matches_reference<float>(kernels::detect_isa(), 1e-5);
  check_variant_matches_reference<double>(kernels::detect_isa(), 1e-12);
}

TEST_CASE("transposed gemm wrappers match explicit transposes") {
  IsaGuard guard;
  Rng rng(3);
  const std::size_t m = 5, k = 6, n = 7;
  const auto a = random_values<double>(m * k, rng);
  const auto b_nk = random_values<double>(n * k, rng);
  const auto a_km = random_values<double>(k * m, rng);
  const auto b_kn = random_values<double>(k * n, rng);
  for (Isa isa : {Isa::scalar, kernels::detect_isa()}) {
    kernels::set_isa(isa);
    std::vector<double> c(m * n);
    kernels::gemm_nt(m, k, n, a.data(), b_nk.data(), c.data());
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b_nk[j * k + p];
        CHECK(c[i * n + j] == doctest::Approx(s).epsilon(1e-12));
      }
    }
    kernels::gemm_tn(m, k, n, a_km.data(), b_kn.data(), c.data());
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a_km[p * m + i] * b_kn[p * n + j];
        CHECK(c[i * n + j] == doctest::Approx(s).epsilon(1e-12));
      }
    }
  }
}
