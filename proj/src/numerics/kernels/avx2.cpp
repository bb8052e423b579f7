// Compiled with -mavx2 -mfma; only reached when detect_isa() reports AVX2.

#include <immintrin.h>

#include "tspsae/numerics/kernels.hpp"

namespace tspsae::kernels::avx2 {
namespace {

template <class T>
struct Vec;

template <>
struct Vec<float> {
  using type = __m256;
  static constexpr std::size_t width = 8;
  static type zero() { return _mm256_setzero_ps(); }
  static type load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, type v) { _mm256_storeu_ps(p, v); }
  static type set1(float v) { return _mm256_set1_ps(v); }
  static type fma(type a, type b, type c) { return _mm256_fmadd_ps(a, b, c); }
  static type add(type a, type b) { return _mm256_add_ps(a, b); }
  static float hsum(type v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    __m128 s = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, s);
    s = _mm_add_ss(s, sh);
    return _mm_cvtss_f32(s);
  }
};

template <>
struct Vec<double> {
  using type = __m256d;
  static constexpr std::size_t width = 4;
  static type zero() { return _mm256_setzero_pd(); }
  static type load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, type v) { _mm256_storeu_pd(p, v); }
  static type set1(double v) { return _mm256_set1_pd(v); }
  static type fma(type a, type b, type c) { return _mm256_fmadd_pd(a, b, c); }
  static type add(type a, type b) { return _mm256_add_pd(a, b); }
  static double hsum(type v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d h = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, h));
  }
};

// 4 rows x (2 vectors) register tile. B rows are streamed once per tile,
// each load feeding four FMAs.
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
  using V = Vec<T>;
  constexpr std::size_t W = V::width;
  constexpr std::size_t NB = 2 * W;

  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* a0 = a + (i + 0) * k;
    const T* a1 = a + (i + 1) * k;
    const T* a2 = a + (i + 2) * k;
    const T* a3 = a + (i + 3) * k;
    T* c0 = c + (i + 0) * n;
    T* c1 = c + (i + 1) * n;
    T* c2 = c + (i + 2) * n;
    T* c3 = c + (i + 3) * n;
    std::size_t j = 0;
    for (; j + NB <= n; j += NB) {
      typename V::type r00, r01, r10, r11, r20, r21, r30, r31;
      if (accumulate) {
        r00 = V::load(c0 + j), r01 = V::load(c0 + j + W);
        r10 = V::load(c1 + j), r11 = V::load(c1 + j + W);
        r20 = V::load(c2 + j), r21 = V::load(c2 + j + W);
        r30 = V::load(c3 + j), r31 = V::load(c3 + j + W);
      } else {
        r00 = r01 = r10 = r11 = r20 = r21 = r30 = r31 = V::zero();
      }
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * n + j;
        const auto b0 = V::load(brow);
        const auto b1 = V::load(brow + W);
        auto s = V::set1(a0[p]);
        r00 = V::fma(s, b0, r00), r01 = V::fma(s, b1, r01);
        s = V::set1(a1[p]);
        r10 = V::fma(s, b0, r10), r11 = V::fma(s, b1, r11);
        s = V::set1(a2[p]);
        r20 = V::fma(s, b0, r20), r21 = V::fma(s, b1, r21);
        s = V::set1(a3[p]);
        r30 = V::fma(s, b0, r30), r31 = V::fma(s, b1, r31);
      }
      V::store(c0 + j, r00), V::store(c0 + j + W, r01);
      V::store(c1 + j, r10), V::store(c1 + j + W, r11);
      V::store(c2 + j, r20), V::store(c2 + j + W, r21);
      V::store(c3 + j, r30), V::store(c3 + j + W, r31);
    }
    for (; j + W <= n; j += W) {
      typename V::type r0, r1, r2, r3;
      if (accumulate) {
        r0 = V::load(c0 + j), r1 = V::load(c1 + j), r2 = V::load(c2 + j), r3 = V::load(c3 + j);
      } else {
        r0 = r1 = r2 = r3 = V::zero();
      }
      for (std::size_t p = 0; p < k; ++p) {
        const auto bv = V::load(b + p * n + j);
        r0 = V::fma(V::set1(a0[p]), bv, r0);
        r1 = V::fma(V::set1(a1[p]), bv, r1);
        r2 = V::fma(V::set1(a2[p]), bv, r2);
        r3 = V::fma(V::set1(a3[p]), bv, r3);
      }
      V::store(c0 + j, r0), V::store(c1 + j, r1), V::store(c2 + j, r2), V::store(c3 + j, r3);
    }
    for (; j < n; ++j) {
      T s0 = accumulate ? c0[j] : T(0), s1 = accumulate ? c1[j] : T(0);
      T s2 = accumulate ? c2[j] : T(0), s3 = accumulate ? c3[j] : T(0);
      for (std::size_t p = 0; p < k; ++p) {
        const T bv = b[p * n + j];
        s0 += a0[p] * bv, s1 += a1[p] * bv, s2 += a2[p] * bv, s3 += a3[p] * bv;
      }
      c0[j] = s0, c1[j] = s1, c2[j] = s2, c3[j] = s3;
    }
  }
  for (; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    std::size_t j = 0;
    for (; j + W <= n; j += W) {
      auto r = accumulate ? V::load(crow + j) : V::zero();
      for (std::size_t p = 0; p < k; ++p) r = V::fma(V::set1(arow[p]), V::load(b + p * n + j), r);
      V::store(crow + j, r);
    }
    for (; j < n; ++j) {
      T s = accumulate ? crow[j] : T(0);
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * b[p * n + j];
      crow[j] = s;
    }
  }
}

template <class T>
T dot(std::size_t n, const T* x, const T* y) {
  using V = Vec<T>;
  constexpr std::size_t W = V::width;
  auto acc0 = V::zero(), acc1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * W <= n; i += 2 * W) {
    acc0 = V::fma(V::load(x + i), V::load(y + i), acc0);
    acc1 = V::fma(V::load(x + i + W), V::load(y + i + W), acc1);
  }
  for (; i + W <= n; i += W) acc0 = V::fma(V::load(x + i), V::load(y + i), acc0);
  T s = V::hsum(V::add(acc0, acc1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

template <class T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  using V = Vec<T>;
  constexpr std::size_t W = V::width;
  const auto va = V::set1(alpha);
  std::size_t i = 0;
  for (; i + W <= n; i += W) V::store(y + i, V::fma(va, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

template <class T>
const KernelTable<T>& table() {
  static const KernelTable<T> t{&gemm_nn<T>, &dot<T>, &axpy<T>};
  return t;
}

template const KernelTable<float>& table<float>();
template const KernelTable<double>& table<double>();

}  // namespace tspsae::kernels::avx2
