#pragma once

// Dense arithmetic hot loops. Every kernel has a portable scalar reference in
// namespace `scalar` and an AVX2/FMA variant in namespace `avx2`; the public
// entry points dispatch at runtime to the best variant the CPU supports. Set
// ENCAP_SIMD=scalar to force the reference path.

#include <cstdint>

namespace encap::kernels {

enum class Isa { scalar, avx2 };

bool isa_available(Isa isa);
Isa active_isa();
/// Overrides the runtime choice (tests use this to compare variants).
void set_active_isa(Isa isa);
const char* isa_name(Isa isa);

// C = alpha * op(A) * op(B) + beta * C, all row-major.
// op(A) is m x k, op(B) is k x n. beta == 0 overwrites C without reading it.
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          float alpha, const float* a, std::int64_t lda, const float* b, std::int64_t ldb,
          float beta, float* c, std::int64_t ldc);
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          double alpha, const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
          double beta, double* c, std::int64_t ldc);

float dot(const float* x, const float* y, std::int64_t n);
double dot(const double* x, const double* y, std::int64_t n);

// y += alpha * x
void axpy(std::int64_t n, float alpha, const float* x, float* y);
void axpy(std::int64_t n, double alpha, const double* x, double* y);

// z = x * y elementwise
void vmul(std::int64_t n, const float* x, const float* y, float* z);
void vmul(std::int64_t n, const double* x, const double* y, double* z);

namespace scalar {
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc);
template <class T>
T dot(const T* x, const T* y, std::int64_t n);
template <class T>
void axpy(std::int64_t n, T alpha, const T* x, T* y);
template <class T>
void vmul(std::int64_t n, const T* x, const T* y, T* z);
}  // namespace scalar

namespace avx2 {
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc);
template <class T>
T dot(const T* x, const T* y, std::int64_t n);
template <class T>
void axpy(std::int64_t n, T alpha, const T* x, T* y);
template <class T>
void vmul(std::int64_t n, const T* x, const T* y, T* z);
}  // namespace avx2

}  // namespace encap::kernels
