#pragma once

// Inner-loop kernels behind the dense ops. Every kernel has a scalar
// reference implementation; vectorized variants are picked at runtime from
// the host's CPU features and must agree with the reference (see
// tests/test_kernels.cpp).

#include <cstddef>
#include <string_view>

namespace tspsae::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

// Best instruction set the host supports and this build was compiled for.
Isa detect_isa();

// Currently dispatched instruction set. Initialised from detect_isa(), or
// from the TSPSAE_ISA environment variable ("scalar" | "avx2") if set.
Isa active_isa();

// Force a specific table; returns false (and changes nothing) if the host
// cannot run it. Intended for tests and benchmarks.
bool set_isa(Isa isa);

template <class T>
struct KernelTable {
  // C[m x n] (+)= A[m x k] * B[k x n], all row-major, dense.
  void (*gemm_nn)(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate);
  T (*dot)(std::size_t n, const T* x, const T* y);
  // y += alpha * x
  void (*axpy)(std::size_t n, T alpha, const T* x, T* y);
};

template <class T>
const KernelTable<T>& table();

template <class T>
const KernelTable<T>& table_for(Isa isa);

// Convenience wrappers over the active table.

template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate = false) {
  table<T>().gemm_nn(m, k, n, a, b, c, accumulate);
}

// C[m x n] (+)= A[m x k] * B^T where B is [n x k].
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate = false);

// C[m x n] (+)= A^T * B where A is [k x m] and B is [k x n].
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate = false);

template <class T>
T dot(std::size_t n, const T* x, const T* y) {
  return table<T>().dot(n, x, y);
}

template <class T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  table<T>().axpy(n, alpha, x, y);
}

namespace scalar {
template <class T>
const KernelTable<T>& table();
}

#if defined(TSPSAE_HAVE_AVX2)
namespace avx2 {
template <class T>
const KernelTable<T>& table();
}
#endif

}  // namespace tspsae::kernels
