#pragma once

#include <string>
#include <vector>

#include "encap/ops.hpp"
#include "encap/rng.hpp"

namespace encap {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};
using ParamList = std::vector<NamedTensor>;

/// Gaussian with std sqrt(2 / fan_in).
Tensor he_normal(Rng& rng, const Shape& shape, std::int64_t fan_in, DType dt);

struct Conv2d {
  Tensor weight;  // [Cout, Cin/g, k, k]
  Tensor bias;    // [Cout] or undefined
  Conv2dArgs args;

  static Conv2d make(Rng& rng, std::int64_t cin, std::int64_t cout, std::int64_t k,
                     Conv2dArgs args, bool bias, DType dt);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct ConvTranspose2d {
  Tensor weight;  // [Cin, Cout/g, k, k]
  ConvTranspose2dArgs args;

  static ConvTranspose2d make(Rng& rng, std::int64_t cin, std::int64_t cout, std::int64_t k,
                              ConvTranspose2dArgs args, DType dt);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct BatchNorm {
  Tensor gamma, beta;
  mutable Tensor running_mean, running_var;

  static BatchNorm make(std::int64_t channels, DType dt);
  Tensor forward(const Tensor& x, bool training) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear make(Rng& rng, std::int64_t in, std::int64_t out, DType dt);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// conv -> BN -> ReLU, the plain building block of stems and vanilla networks.
struct ConvBnRelu {
  Conv2d conv;
  BatchNorm bn;

  static ConvBnRelu make(Rng& rng, std::int64_t cin, std::int64_t cout, std::int64_t k,
                         std::int64_t stride, std::int64_t pad, DType dt);
  Tensor forward(const Tensor& x, bool training) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Two conv-BN stages with an identity or 1x1 projection shortcut.
struct ResBlock {
  ConvBnRelu first;
  Conv2d second;
  BatchNorm bn2;
  bool project = false;
  Conv2d proj;
  BatchNorm proj_bn;

  static ResBlock make(Rng& rng, std::int64_t cin, std::int64_t cout, std::int64_t stride,
                       DType dt);
  Tensor forward(const Tensor& x, bool training) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// [B, C, H, W] -> [B, C]
Tensor global_avg_pool(const Tensor& x);

}  // namespace encap
