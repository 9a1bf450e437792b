#include "encap/routing.hpp"

#include <algorithm>
#include <cmath>

#include "encap/ops.hpp"

namespace encap {

Shape capnet_kernel_shape(const CapnetShape& s) {
  if (s.in_channels <= 0 || s.in_dim <= 0 || s.out_caps <= 0 || s.out_dim <= 0)
    throw ConfigError("capsule mapping needs positive channel, capsule and dimension counts");
  return {s.in_channels * s.out_caps * s.out_dim, s.in_dim, 1, 1};
}

Tensor capnet_map(const Tensor& u, const Tensor& w, const CapnetShape& s) {
  if (u.dim() != 4 || u.size(1) != s.in_channels * s.in_dim)
    throw ConfigError("capsule mapping: input " + shape_str(u.shape()) + " is not " +
                      std::to_string(s.in_channels) + " channels of " + std::to_string(s.in_dim) +
                      "-d capsules");
  if (w.shape() != capnet_kernel_shape(s))
    throw ConfigError("capsule mapping: kernel " + shape_str(w.shape()) + " expected " +
                      shape_str(capnet_kernel_shape(s)));
  const auto B = u.size(0), H = u.size(2), W = u.size(3);
  auto y = conv2d(u, w, {.groups = s.in_channels});  // [B, C1*n2*d2, H, W]
  y = reshape(y, {B, s.in_channels, s.out_caps, s.out_dim, H * W});
  y = permute(y, {0, 1, 4, 2, 3});
  return reshape(y, {B, s.in_channels * H * W, s.out_caps, s.out_dim});
}

Tensor dynamic_routing(const Tensor& v_hat, DynamicRoutingArgs args, RoutingTrace* trace) {
  if (args.iterations < 1) throw ConfigError("routing needs at least one iteration");
  if (v_hat.dim() != 4) throw ShapeError("dynamic_routing expects [B, n1, n2, d2]");
  const auto B = v_hat.size(0), n1 = v_hat.size(1), n2 = v_hat.size(2);
  auto b = Tensor::zeros({B, n1, n2}, v_hat.dtype());
  Tensor v;
  for (int r = 0; r < args.iterations; ++r) {
    auto c = softmax(b, args.softmax_over_i ? 1 : 2);
    if (trace) trace->coefficients.push_back(c.detach());
    auto s = sum(reshape(c, {B, n1, n2, 1}) * v_hat, 1);  // [B, n2, d2]
    v = squash(s, 2);
    if (r + 1 < args.iterations) b = b + sum(v_hat * reshape(v, {B, 1, n2, -1}), 3);
  }
  return v;
}

EmResult em_routing(const Tensor& v_hat, const Tensor& a_in, const Tensor& beta_v,
                    const Tensor& beta_a, EmRoutingArgs args, RoutingTrace* trace) {
  if (args.iterations < 1) throw ConfigError("routing needs at least one iteration");
  if (v_hat.dim() != 4) throw ShapeError("em_routing expects [B, n1, n2, d2]");
  const auto B = v_hat.size(0), n1 = v_hat.size(1), n2 = v_hat.size(2), d = v_hat.size(3);
  if (a_in.shape() != Shape{B, n1}) throw ShapeError("em_routing: activations must be [B, n1]");
  if (beta_v.numel() != n2 || beta_a.numel() != n2)
    throw ShapeError("em_routing: beta vectors must have one entry per higher capsule");
  const auto dt = v_hat.dtype();
  const double log_2pi = std::log(2.0 * M_PI);
  // Tiny floor on the responsibilities keeps the cluster means defined when
  // every input activation is zero.
  constexpr double kWeightFloor = 1e-10;

  auto r = Tensor::full({B, n1, n2}, 1.0 / static_cast<double>(n2), dt);
  if (trace) trace->coefficients.push_back(r.detach());
  auto a = reshape(a_in, {B, n1, 1});
  auto bv = reshape(beta_v, {1, n2, 1});
  auto ba = reshape(beta_a, {1, n2});
  EmResult out;
  for (int it = 0; it < args.iterations; ++it) {
    // M-step
    auto w = add_scalar(r * a, kWeightFloor);                // [B, n1, n2]
    auto wsum = sum(w, 1, true);                             // [B, 1, n2]
    auto coef = reshape(w / wsum, {B, n1, n2, 1});
    auto mu = sum(coef * v_hat, 1, true);                    // [B, 1, n2, d]
    auto var = clamp_min(sum(coef * square(v_hat - mu), 1, true), args.var_floor);
    auto log_var = encap::log(var);                          // [B, 1, n2, d]
    auto cost = (bv + 0.5 * sum(reshape(log_var, {B, n2, d}), 2, true)) *
                reshape(wsum, {B, n2, 1});                   // [B, n2, 1]
    cost = reshape(cost, {B, n2});
    auto cmean = mean(cost, 1, true);
    auto cvar = mean(square(cost - cmean), 1, true);
    auto z = (cost - cmean) / encap::sqrt(add_scalar(cvar, args.norm_eps));
    auto act = sigmoid(ba - z);                              // [B, n2]
    out.mean = reshape(mu, {B, n2, d});
    out.activation = act;
    if (it + 1 == args.iterations) break;
    // E-step
    auto log_p = -0.5 * sum(square(v_hat - mu) / var + log_var, 3) - 0.5 * d * log_2pi;
    auto logits = log_p + reshape(encap::log(clamp_min(act, 1e-30)), {B, 1, n2});
    r = softmax(logits, 2);
    if (trace) trace->coefficients.push_back(r.detach());
  }
  return out;
}

std::vector<HistogramRow> routing_histogram(const Tensor& v_hat, const Tensor& v, int bins) {
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  const auto B = v_hat.size(0), n1 = v_hat.size(1), n2 = v_hat.size(2), d = v_hat.size(3);
  if (v.shape() != Shape{B, n2, d}) throw ShapeError("routing_histogram: v must be [B, n2, d2]");
  const auto H = v_hat.to_vector(), V = v.to_vector();
  std::vector<double> count(static_cast<std::size_t>(bins), 0.0),
      length(static_cast<std::size_t>(bins), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t j = 0; j < n2; ++j) {
      const double* vj = V.data() + (b * n2 + j) * d;
      double vn = 0;
      for (std::int64_t k = 0; k < d; ++k) vn += vj[k] * vj[k];
      vn = std::sqrt(vn);
      for (std::int64_t i = 0; i < n1; ++i) {
        const double* h = H.data() + ((b * n1 + i) * n2 + j) * d;
        double hn = 0, dotv = 0;
        for (std::int64_t k = 0; k < d; ++k) {
          hn += h[k] * h[k];
          dotv += h[k] * vj[k];
        }
        hn = std::sqrt(hn);
        const double cs = std::clamp(dotv / std::max(hn * vn, 1e-12), -1.0, 1.0);
        auto bin = static_cast<int>(std::floor((cs + 1.0) / 2.0 * bins));
        bin = std::clamp(bin, 0, bins - 1);
        count[static_cast<std::size_t>(bin)] += 1;
        length[static_cast<std::size_t>(bin)] += hn;
      }
    }
  const double total = static_cast<double>(B * n1 * n2);
  std::vector<HistogramRow> rows(static_cast<std::size_t>(bins));
  for (int k = 0; k < bins; ++k) {
    auto& row = rows[static_cast<std::size_t>(k)];
    row.bin_low = -1.0 + 2.0 * k / bins;
    row.bin_high = -1.0 + 2.0 * (k + 1) / bins;
    row.percent = 100.0 * count[static_cast<std::size_t>(k)] / total;
    row.mean_length = count[static_cast<std::size_t>(k)] > 0
                          ? length[static_cast<std::size_t>(k)] / count[static_cast<std::size_t>(k)]
                          : 0.0;
  }
  return rows;
}

}  // namespace encap
