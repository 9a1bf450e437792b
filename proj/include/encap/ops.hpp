#pragma once

#include <cstdint>
#include <vector>

#include "encap/tensor.hpp"

namespace encap {

// Elementwise, numpy broadcasting. Inputs must share a dtype.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
/// Throws DomainError on negative entries.
Tensor log(const Tensor& x);
/// Throws DomainError on negative entries.
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
/// max(x, lo); gradient flows only where x > lo.
Tensor clamp_min(const Tensor& x, double lo);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator+(double c, const Tensor& x) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x, double c) { return add_scalar(x, -c); }
inline Tensor operator-(double c, const Tensor& x) { return add_scalar(neg(x), c); }
inline Tensor operator*(const Tensor& x, double c) { return mul_scalar(x, c); }
inline Tensor operator*(double c, const Tensor& x) { return mul_scalar(x, c); }
inline Tensor operator/(const Tensor& x, double c) { return mul_scalar(x, 1.0 / c); }

// Reductions. Negative axes count from the end.
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::int64_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::int64_t axis, bool keepdim = false);

// Layout. All results are contiguous copies.
/// One extent may be -1 and is inferred.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::int64_t>& dims);
Tensor transpose(const Tensor& x, std::int64_t a, std::int64_t b);
Tensor narrow(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t length);
Tensor concat(const std::vector<Tensor>& xs, std::int64_t axis);

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [B,m,k] x [B,k,n] -> [B,m,n]
Tensor bmm(const Tensor& a, const Tensor& b);

struct Conv2dArgs {
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  std::int64_t groups = 1;
};

struct ConvTranspose2dArgs {
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  std::int64_t output_padding = 0;
  std::int64_t groups = 1;
};

/// x [B,Cin,H,W], w [Cout,Cin/g,k,k] -> [B,Cout,H',W'], H' = (H+2p-k)/s + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dArgs args = {});
/// x [B,Cin,H,W], w [Cin,Cout/g,k,k] -> [B,Cout,(H-1)s-2p+k+op, ...].
/// The adjoint of conv2d with the same weight.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, ConvTranspose2dArgs args = {});

Tensor softmax(const Tensor& x, std::int64_t axis);
Tensor logsumexp(const Tensor& x, std::int64_t axis, bool keepdim = false);

struct BatchNormArgs {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Normalises over every axis except 1 (the channel axis). In training mode the
/// running statistics are updated in place (unbiased variance, like PyTorch).
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, BatchNormArgs args = {});

/// v = |s|^2/(1+|s|^2) * s/|s| along `axis`, with |s| = sqrt(sum s^2 + eps).
Tensor squash(const Tensor& x, std::int64_t axis, double eps = 1e-8);

}  // namespace encap
