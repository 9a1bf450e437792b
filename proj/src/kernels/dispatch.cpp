#include <atomic>
#include <cstdlib>
#include <cstring>

#include "encap/kernels.hpp"

namespace encap::kernels {

namespace {

bool cpu_has_avx2() {
#if defined(ENCAP_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa detect() {
  if (const char* env = std::getenv("ENCAP_SIMD"); env && std::strcmp(env, "scalar") == 0)
    return Isa::scalar;
  return cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

bool isa_available(Isa isa) { return isa == Isa::scalar || cpu_has_avx2(); }

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  current().store(isa_available(isa) ? isa : Isa::scalar, std::memory_order_relaxed);
}

const char* isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

#if defined(ENCAP_HAVE_AVX2)
#define ENCAP_DISPATCH(fn, ...) \
  (active_isa() == Isa::avx2 ? avx2::fn(__VA_ARGS__) : scalar::fn(__VA_ARGS__))
#else
#define ENCAP_DISPATCH(fn, ...) scalar::fn(__VA_ARGS__)
#endif

void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, float alpha,
          const float* a, std::int64_t lda, const float* b, std::int64_t ldb, float beta,
          float* c, std::int64_t ldc) {
  ENCAP_DISPATCH(gemm<float>, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, double alpha,
          const double* a, std::int64_t lda, const double* b, std::int64_t ldb, double beta,
          double* c, std::int64_t ldc) {
  ENCAP_DISPATCH(gemm<double>, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

float dot(const float* x, const float* y, std::int64_t n) { return ENCAP_DISPATCH(dot<float>, x, y, n); }
double dot(const double* x, const double* y, std::int64_t n) {
  return ENCAP_DISPATCH(dot<double>, x, y, n);
}

void axpy(std::int64_t n, float alpha, const float* x, float* y) {
  ENCAP_DISPATCH(axpy<float>, n, alpha, x, y);
}
void axpy(std::int64_t n, double alpha, const double* x, double* y) {
  ENCAP_DISPATCH(axpy<double>, n, alpha, x, y);
}

void vmul(std::int64_t n, const float* x, const float* y, float* z) {
  ENCAP_DISPATCH(vmul<float>, n, x, y, z);
}
void vmul(std::int64_t n, const double* x, const double* y, double* z) {
  ENCAP_DISPATCH(vmul<double>, n, x, y, z);
}

#undef ENCAP_DISPATCH

}  // namespace encap::kernels
