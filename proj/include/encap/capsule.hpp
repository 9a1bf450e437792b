#pragma once

#include <vector>

#include "encap/tensor.hpp"

namespace encap {

// A capsule grid is a [B, C*d, H, W] tensor whose channel axis holds C capsule
// channels of d contiguous components each.

/// Squashes every d-dimensional capsule of a [B, C*d, H, W] grid.
Tensor squash_grid(const Tensor& grid, std::int64_t caps_dim, double eps = 1e-8);

/// [B, C*d, H, W] -> [B, C*H*W, d], capsule index i = (c, y, x).
Tensor grid_to_capsules(const Tensor& grid, std::int64_t caps_dim);
/// [B, C*H*W, d] -> [B, C*d, H, W]; inverse of grid_to_capsules.
Tensor capsules_to_grid(const Tensor& caps, std::int64_t channels, std::int64_t height,
                        std::int64_t width);

/// sqrt(sum v^2 + eps) over the last axis: [B, n, d] -> [B, n].
Tensor capsule_norms(const Tensor& v, double eps = 1e-8);

struct MarginLossArgs {
  double m_pos = 0.9;
  double m_neg = 0.1;
  double lambda_down = 0.5;
};

/// Batch mean of sum_k T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2.
/// v is [B, n_classes, d]. Throws InputError on labels outside [0, n_classes).
Tensor margin_loss(const Tensor& v, const std::vector<int>& labels, MarginLossArgs args = {});

/// Per-dimension fully connected layer: in [B, n_in, d], w [d, n_in, n_classes]
/// -> squash(out) with out[b, :, k] = w[k]^T in[b, :, k].
Tensor capfc(const Tensor& in, const Tensor& w);

/// Argmax of capsule norms per sample; ties go to the lowest index.
std::vector<int> predict(const Tensor& v);

}  // namespace encap
