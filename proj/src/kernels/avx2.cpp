// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include <immintrin.h>

#include <algorithm>
#include <vector>

#include "encap/kernels.hpp"

namespace encap::kernels::avx2 {

namespace {

template <class T>
struct Vec;

template <>
struct Vec<float> {
  using type = __m256;
  static constexpr int width = 8;
  static type zero() { return _mm256_setzero_ps(); }
  static type load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, type v) { _mm256_storeu_ps(p, v); }
  static type set1(float x) { return _mm256_set1_ps(x); }
  static type fma(type a, type b, type c) { return _mm256_fmadd_ps(a, b, c); }
  static type mul(type a, type b) { return _mm256_mul_ps(a, b); }
  static type add(type a, type b) { return _mm256_add_ps(a, b); }
  static float hsum(type v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_hadd_ps(lo, lo);
    lo = _mm_hadd_ps(lo, lo);
    return _mm_cvtss_f32(lo);
  }
};

template <>
struct Vec<double> {
  using type = __m256d;
  static constexpr int width = 4;
  static type zero() { return _mm256_setzero_pd(); }
  static type load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, type v) { _mm256_storeu_pd(p, v); }
  static type set1(double x) { return _mm256_set1_pd(x); }
  static type fma(type a, type b, type c) { return _mm256_fmadd_pd(a, b, c); }
  static type mul(type a, type b) { return _mm256_mul_pd(a, b); }
  static type add(type a, type b) { return _mm256_add_pd(a, b); }
  static double hsum(type v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    lo = _mm_hadd_pd(lo, lo);
    return _mm_cvtsd_f64(lo);
  }
};

constexpr std::int64_t kBlockK = 256;

template <class T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> buffers[2];
  return buffers[slot];
}

// C[rows, n] += alpha * A[rows, kc] * B[kc, n]; A and B row-major packed.
template <class T, int Rows>
void strip(std::int64_t n, std::int64_t kc, T alpha, const T* a, std::int64_t lda, const T* b,
           std::int64_t ldb, T* c, std::int64_t ldc) {
  using V = Vec<T>;
  constexpr int W = V::width;
  const auto valpha = V::set1(alpha);
  std::int64_t j = 0;
  for (; j + 2 * W <= n; j += 2 * W) {
    typename V::type acc[Rows][2];
    for (int r = 0; r < Rows; ++r) acc[r][0] = acc[r][1] = V::zero();
    for (std::int64_t p = 0; p < kc; ++p) {
      const auto b0 = V::load(b + p * ldb + j);
      const auto b1 = V::load(b + p * ldb + j + W);
      for (int r = 0; r < Rows; ++r) {
        const auto av = V::set1(a[r * lda + p]);
        acc[r][0] = V::fma(av, b0, acc[r][0]);
        acc[r][1] = V::fma(av, b1, acc[r][1]);
      }
    }
    for (int r = 0; r < Rows; ++r) {
      T* crow = c + r * ldc + j;
      V::store(crow, V::fma(valpha, acc[r][0], V::load(crow)));
      V::store(crow + W, V::fma(valpha, acc[r][1], V::load(crow + W)));
    }
  }
  for (; j + W <= n; j += W) {
    typename V::type acc[Rows];
    for (int r = 0; r < Rows; ++r) acc[r] = V::zero();
    for (std::int64_t p = 0; p < kc; ++p) {
      const auto b0 = V::load(b + p * ldb + j);
      for (int r = 0; r < Rows; ++r) acc[r] = V::fma(V::set1(a[r * lda + p]), b0, acc[r]);
    }
    for (int r = 0; r < Rows; ++r) {
      T* crow = c + r * ldc + j;
      V::store(crow, V::fma(valpha, acc[r], V::load(crow)));
    }
  }
  for (; j < n; ++j) {
    for (int r = 0; r < Rows; ++r) {
      T s = 0;
      for (std::int64_t p = 0; p < kc; ++p) s += a[r * lda + p] * b[p * ldb + j];
      c[r * ldc + j] += alpha * s;
    }
  }
}

}  // namespace

template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (beta == T(0)) {
      std::fill(crow, crow + n, T(0));
    } else if (beta != T(1)) {
      for (std::int64_t j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
  if (m == 0 || n == 0 || k == 0 || alpha == T(0)) return;

  if (trans_a) {
    auto& pa = scratch<T>(0);
    pa.resize(static_cast<std::size_t>(m * k));
    for (std::int64_t p = 0; p < k; ++p)
      for (std::int64_t i = 0; i < m; ++i) pa[i * k + p] = a[p * lda + i];
    a = pa.data();
    lda = k;
  }
  if (trans_b) {
    auto& pb = scratch<T>(1);
    pb.resize(static_cast<std::size_t>(k * n));
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < k; ++p) pb[p * n + j] = b[j * ldb + p];
    b = pb.data();
    ldb = n;
  }

  for (std::int64_t p0 = 0; p0 < k; p0 += kBlockK) {
    const std::int64_t kc = std::min(kBlockK, k - p0);
    std::int64_t i = 0;
    for (; i + 4 <= m; i += 4)
      strip<T, 4>(n, kc, alpha, a + i * lda + p0, lda, b + p0 * ldb, ldb, c + i * ldc, ldc);
    for (; i < m; ++i)
      strip<T, 1>(n, kc, alpha, a + i * lda + p0, lda, b + p0 * ldb, ldb, c + i * ldc, ldc);
  }
}

template <class T>
T dot(const T* x, const T* y, std::int64_t n) {
  using V = Vec<T>;
  constexpr int W = V::width;
  auto s0 = V::zero();
  auto s1 = V::zero();
  std::int64_t i = 0;
  for (; i + 2 * W <= n; i += 2 * W) {
    s0 = V::fma(V::load(x + i), V::load(y + i), s0);
    s1 = V::fma(V::load(x + i + W), V::load(y + i + W), s1);
  }
  for (; i + W <= n; i += W) s0 = V::fma(V::load(x + i), V::load(y + i), s0);
  T s = V::hsum(V::add(s0, s1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

template <class T>
void axpy(std::int64_t n, T alpha, const T* x, T* y) {
  using V = Vec<T>;
  constexpr int W = V::width;
  const auto va = V::set1(alpha);
  std::int64_t i = 0;
  for (; i + W <= n; i += W) V::store(y + i, V::fma(va, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void vmul(std::int64_t n, const T* x, const T* y, T* z) {
  using V = Vec<T>;
  constexpr int W = V::width;
  std::int64_t i = 0;
  for (; i + W <= n; i += W) V::store(z + i, V::mul(V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) z[i] = x[i] * y[i];
}

#define ENCAP_INSTANTIATE(T)                                                                   \
  template void gemm<T>(bool, bool, std::int64_t, std::int64_t, std::int64_t, T, const T*,     \
                        std::int64_t, const T*, std::int64_t, T, T*, std::int64_t);            \
  template T dot<T>(const T*, const T*, std::int64_t);                                         \
  template void axpy<T>(std::int64_t, T, const T*, T*);                                        \
  template void vmul<T>(std::int64_t, const T*, const T*, T*);

ENCAP_INSTANTIATE(float)
ENCAP_INSTANTIATE(double)
#undef ENCAP_INSTANTIATE

}  // namespace encap::kernels::avx2
