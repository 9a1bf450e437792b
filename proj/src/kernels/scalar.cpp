#include "encap/kernels.hpp"

namespace encap::kernels::scalar {

template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (beta == T(0)) {
      for (std::int64_t j = 0; j < n; ++j) crow[j] = T(0);
    } else if (beta != T(1)) {
      for (std::int64_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = alpha * (trans_a ? a[p * lda + i] : a[i * lda + p]);
      if (av == T(0)) continue;
      if (!trans_b) {
        const T* brow = b + p * ldb;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
      }
    }
  }
}

template <class T>
T dot(const T* x, const T* y, std::int64_t n) {
  T s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

template <class T>
void axpy(std::int64_t n, T alpha, const T* x, T* y) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void vmul(std::int64_t n, const T* x, const T* y, T* z) {
  for (std::int64_t i = 0; i < n; ++i) z[i] = x[i] * y[i];
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

}  // namespace encap::kernels::scalar
