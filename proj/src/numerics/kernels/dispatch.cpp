#include <atomic>
#include <cstdlib>
#include <string>
#include <vector>

#include "tspsae/numerics/kernels.hpp"

namespace tspsae::kernels {
namespace {

bool host_supports(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(TSPSAE_HAVE_AVX2)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

Isa initial_isa() {
  if (const char* env = std::getenv("TSPSAE_ISA")) {
    const std::string want(env);
    if (want == "scalar") return Isa::scalar;
    if (want == "avx2" && host_supports(Isa::avx2)) return Isa::avx2;
  }
  return detect_isa();
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
  }
  return "unknown";
}

Isa detect_isa() { return host_supports(Isa::avx2) ? Isa::avx2 : Isa::scalar; }

Isa active_isa() { return current().load(std::memory_order_relaxed); }

bool set_isa(Isa isa) {
  if (!host_supports(isa)) return false;
  current().store(isa, std::memory_order_relaxed);
  return true;
}

template <class T>
const KernelTable<T>& table_for(Isa isa) {
#if defined(TSPSAE_HAVE_AVX2)
  if (isa == Isa::avx2) return avx2::table<T>();
#endif
  (void)isa;
  return scalar::table<T>();
}

template <class T>
const KernelTable<T>& table() {
  return table_for<T>(active_isa());
}

// Transposed variants go through a packed copy so that only gemm_nn needs a
// vectorized micro-kernel; the copy is O(mk) against O(mkn) work.
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  thread_local std::vector<T> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  table<T>().gemm_nn(m, k, n, a, bt.data(), c, accumulate);
}

template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  thread_local std::vector<T> at;
  at.resize(m * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) at[i * k + p] = a[p * m + i];
  }
  table<T>().gemm_nn(m, k, n, at.data(), b, c, accumulate);
}

template const KernelTable<float>& table<float>();
template const KernelTable<double>& table<double>();
template const KernelTable<float>& table_for<float>(Isa);
template const KernelTable<double>& table_for<double>(Isa);
template void gemm_nt<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*, bool);
template void gemm_nt<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
template void gemm_tn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*, bool);
template void gemm_tn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);

}  // namespace tspsae::kernels
