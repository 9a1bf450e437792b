#include "encap/capsule.hpp"

#include <cmath>

#include "encap/ops.hpp"

namespace encap {

Tensor squash_grid(const Tensor& grid, std::int64_t caps_dim, double eps) {
  if (grid.dim() != 4 || grid.size(1) % caps_dim != 0)
    throw ShapeError("capsule grid " + shape_str(grid.shape()) + " is not divisible into " +
                     std::to_string(caps_dim) + "-d capsules");
  const auto& s = grid.shape();
  auto x = reshape(grid, {s[0], s[1] / caps_dim, caps_dim, s[2] * s[3]});
  return reshape(squash(x, 2, eps), s);
}

Tensor grid_to_capsules(const Tensor& grid, std::int64_t caps_dim) {
  const auto& s = grid.shape();
  if (grid.dim() != 4 || s[1] % caps_dim != 0)
    throw ShapeError("capsule grid " + shape_str(s) + " is not divisible into " +
                     std::to_string(caps_dim) + "-d capsules");
  const auto C = s[1] / caps_dim;
  auto x = reshape(grid, {s[0], C, caps_dim, s[2] * s[3]});
  return reshape(permute(x, {0, 1, 3, 2}), {s[0], C * s[2] * s[3], caps_dim});
}

Tensor capsules_to_grid(const Tensor& caps, std::int64_t channels, std::int64_t height,
                        std::int64_t width) {
  const auto B = caps.size(0), n = caps.size(1), d = caps.size(2);
  if (n != channels * height * width)
    throw ShapeError("capsule count " + std::to_string(n) + " does not fill a " +
                     std::to_string(channels) + "x" + std::to_string(height) + "x" +
                     std::to_string(width) + " grid");
  auto x = reshape(caps, {B, channels, height * width, d});
  return reshape(permute(x, {0, 1, 3, 2}), {B, channels * d, height, width});
}

Tensor capsule_norms(const Tensor& v, double eps) {
  return encap::sqrt(add_scalar(sum(square(v), -1), eps));
}

Tensor margin_loss(const Tensor& v, const std::vector<int>& labels, MarginLossArgs args) {
  if (v.dim() != 3) throw ShapeError("margin_loss expects [B, classes, d]");
  const auto B = v.size(0), K = v.size(1);
  if (static_cast<std::int64_t>(labels.size()) != B)
    throw InputError("margin_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(B));
  std::vector<double> onehot(static_cast<std::size_t>(B * K), 0.0);
  for (std::int64_t b = 0; b < B; ++b) {
    const int t = labels[static_cast<std::size_t>(b)];
    if (t < 0 || t >= K)
      throw InputError("label " + std::to_string(t) + " outside [0, " + std::to_string(K) + ")");
    onehot[static_cast<std::size_t>(b * K + t)] = 1.0;
  }
  const auto T = Tensor::from(std::move(onehot), {B, K}, v.dtype());
  const auto norms = capsule_norms(v, 1e-16);
  const auto pos = square(relu(args.m_pos - norms));
  const auto negt = square(relu(norms - args.m_neg));
  const auto per = T * pos + args.lambda_down * ((1.0 - T) * negt);
  return sum(per) / static_cast<double>(B);
}

Tensor capfc(const Tensor& in, const Tensor& w) {
  if (in.dim() != 3 || w.dim() != 3 || in.size(2) != w.size(0) || in.size(1) != w.size(1))
    throw ShapeError("capfc: input " + shape_str(in.shape()) + " vs weights " +
                     shape_str(w.shape()));
  auto x = permute(in, {2, 0, 1});   // [d, B, n_in]
  auto y = bmm(x, w);                // [d, B, n_cls]
  return squash(permute(y, {1, 2, 0}), 2);
}

std::vector<int> predict(const Tensor& v) {
  const auto n = capsule_norms(v.detach()).to_vector();
  const auto B = v.size(0), K = v.size(1);
  std::vector<int> out(static_cast<std::size_t>(B));
  for (std::int64_t b = 0; b < B; ++b) {
    int best = 0;
    for (std::int64_t k = 1; k < K; ++k)
      if (n[b * K + k] > n[b * K + best]) best = static_cast<int>(k);
    out[static_cast<std::size_t>(b)] = best;
  }
  return out;
}

}  // namespace encap
