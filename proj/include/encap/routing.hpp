#pragma once

#include <vector>

#include "encap/tensor.hpp"

namespace encap {

struct CapnetShape {
  std::int64_t in_channels = 0;  // C1, capsule channels of the input grid
  std::int64_t in_dim = 0;       // d1
  std::int64_t out_caps = 0;     // n2, higher capsules
  std::int64_t out_dim = 0;      // d2
};

/// Mapping kernel of a capsule layer where every lower capsule is transformed
/// into each higher capsule's space: [C1*n2*d2, d1, 1, 1], used as a grouped
/// 1x1 convolution with groups = C1 (spatial capsules of a channel share it).
Shape capnet_kernel_shape(const CapnetShape& s);

/// u [B, C1*d1, H, W], w from capnet_kernel_shape -> v_hat [B, n1, n2, d2] with
/// n1 = C1*H*W and lower index i = (c1, y, x).
Tensor capnet_map(const Tensor& u, const Tensor& w, const CapnetShape& s);

/// Per-iteration coefficient snapshots, for invariant checks.
struct RoutingTrace {
  std::vector<Tensor> coefficients;  // each [B, n1, n2]
};

struct DynamicRoutingArgs {
  int iterations = 3;
  /// Normalise logits over lower capsules i; false normalises over j.
  bool softmax_over_i = true;
};

/// v_hat [B, n1, n2, d2] -> v [B, n2, d2]. Logits start at zero and every
/// iteration is recorded on the tape.
Tensor dynamic_routing(const Tensor& v_hat, DynamicRoutingArgs args = {},
                       RoutingTrace* trace = nullptr);

struct EmRoutingArgs {
  int iterations = 3;
  double var_floor = 1e-6;
  /// Stabiliser for standardising the activation cost across j.
  double norm_eps = 1e-6;
};

struct EmResult {
  Tensor mean;        // [B, n2, d2], the output capsules
  Tensor activation;  // [B, n2]
};

/// Gaussian-cluster routing with one diagonal Gaussian per higher capsule.
/// a_in [B, n1] in [0, 1]; beta_v, beta_a [n2] are learnable offsets.
EmResult em_routing(const Tensor& v_hat, const Tensor& a_in, const Tensor& beta_v,
                    const Tensor& beta_a, EmRoutingArgs args = {}, RoutingTrace* trace = nullptr);

struct HistogramRow {
  double bin_low = 0;
  double bin_high = 0;
  double percent = 0;
  double mean_length = 0;
};

/// Distribution of cos(v_j, v_hat_{j|i}) over all (sample, i, j) triples in
/// equal bins over [-1, 1], with the mean |v_hat_{j|i}| inside each bin.
std::vector<HistogramRow> routing_histogram(const Tensor& v_hat, const Tensor& v, int bins = 20);

}  // namespace encap
