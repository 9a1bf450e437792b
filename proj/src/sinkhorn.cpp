#include "encap/sinkhorn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "encap/capsule.hpp"

namespace encap {

CostKind parse_cost_kind(const std::string& s) {
  if (s == "cosine") return CostKind::cosine;
  if (s == "l2") return CostKind::l2;
  throw ConfigError("unknown cost '" + s + "'");
}

Regularizer parse_regularizer(const std::string& s) {
  if (s == "none") return Regularizer::none;
  if (s == "ot" || s == "sinkhorn") return Regularizer::ot;
  if (s == "kl") return Regularizer::kl;
  throw ConfigError("unknown regularizer '" + s + "'");
}

Tensor cost_matrix(const Tensor& a, const Tensor& b, CostKind kind) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(1))
    throw ShapeError("cost_matrix: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto cross = matmul(a, transpose(b, 0, 1));  // [n2, n1]
  if (kind == CostKind::cosine) {
    auto sa = sum(square(a), 1, true);                   // [n2,1]
    auto sb = reshape(sum(square(b), 1, false), {1, -1});  // [1,n1]
    return 1.0 - cross / encap::sqrt(clamp_min(sa * sb, 1e-16));
  }
  auto sa = sum(square(a), 1, true);
  auto sb = reshape(sum(square(b), 1, false), {1, -1});
  return clamp_min(sa + sb - 2.0 * cross, 0.0);
}

std::vector<double> Coupling::row_sums() const {
  std::vector<double> r(static_cast<std::size_t>(rows), 0.0);
  for (std::int64_t x = 0; x < rows; ++x)
    for (std::int64_t y = 0; y < cols; ++y) r[x] += P[x * cols + y];
  return r;
}

std::vector<double> Coupling::col_sums() const {
  std::vector<double> c(static_cast<std::size_t>(cols), 0.0);
  for (std::int64_t x = 0; x < rows; ++x)
    for (std::int64_t y = 0; y < cols; ++y) c[y] += P[x * cols + y];
  return c;
}

namespace {

double lse(const double* v, std::int64_t n, std::int64_t stride) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::int64_t i = 0; i < n; ++i) m = std::max(m, v[i * stride]);
  if (!std::isfinite(m)) return m;
  double s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += std::exp(v[i * stride] - m);
  return m + std::log(s);
}

}  // namespace

Coupling sinkhorn(const std::vector<double>& Q, std::int64_t rows, std::int64_t cols, double eps,
                  int iters) {
  if (eps <= 0) throw ConfigError("Sinkhorn needs eps > 0");
  if (iters < 1) throw ConfigError("Sinkhorn needs at least one iteration");
  if (static_cast<std::int64_t>(Q.size()) != rows * cols)
    throw ShapeError("Sinkhorn: cost has " + std::to_string(Q.size()) + " entries, expected " +
                     std::to_string(rows * cols));
  for (double q : Q)
    if (!std::isfinite(q)) throw NumericError("sinkhorn", "Sinkhorn cost matrix is not finite");
  Coupling c;
  c.rows = rows;
  c.cols = cols;
  std::vector<double> logK(Q.size());
  for (std::size_t i = 0; i < Q.size(); ++i) logK[i] = -Q[i] / eps;
  const double log_r = -std::log(static_cast<double>(rows));
  const double log_c = -std::log(static_cast<double>(cols));
  c.log_b.assign(static_cast<std::size_t>(rows), log_r);
  c.log_a.assign(static_cast<std::size_t>(cols), 0.0);
  std::vector<double> tmp(static_cast<std::size_t>(std::max(rows, cols)));
  for (int l = 0; l < iters; ++l) {
    for (std::int64_t y = 0; y < cols; ++y) {
      for (std::int64_t x = 0; x < rows; ++x) tmp[x] = logK[x * cols + y] + c.log_b[x];
      c.log_a[y] = log_c - lse(tmp.data(), rows, 1);
    }
    for (std::int64_t x = 0; x < rows; ++x) {
      for (std::int64_t y = 0; y < cols; ++y) tmp[y] = logK[x * cols + y] + c.log_a[y];
      c.log_b[x] = log_r - lse(tmp.data(), cols, 1);
    }
  }
  c.P.resize(Q.size());
  for (std::int64_t x = 0; x < rows; ++x)
    for (std::int64_t y = 0; y < cols; ++y)
      c.P[x * cols + y] = std::exp(c.log_b[x] + logK[x * cols + y] + c.log_a[y]);
  return c;
}

Tensor sinkhorn_plan(const Tensor& Q, double eps, int iters) {
  if (eps <= 0) throw ConfigError("Sinkhorn needs eps > 0");
  if (iters < 1) throw ConfigError("Sinkhorn needs at least one iteration");
  const auto rows = Q.size(0), cols = Q.size(1);
  const double log_r = -std::log(static_cast<double>(rows));
  const double log_c = -std::log(static_cast<double>(cols));
  auto logK = Q * (-1.0 / eps);
  auto log_b = Tensor::full({rows, 1}, log_r, Q.dtype());
  Tensor log_a;
  for (int l = 0; l < iters; ++l) {
    log_a = log_c - logsumexp(logK + log_b, 0, true);  // [1, cols]
    log_b = log_r - logsumexp(logK + log_a, 1, true);  // [rows, 1]
  }
  return encap::exp(log_b + logK + log_a);
}

Tensor ot_loss(const Tensor& Q, const OtConfig& cfg) {
  if (Q.dim() != 2) throw ShapeError("ot_loss expects a cost matrix");
  if (!cfg.stop_gradient) return sum(Q * sinkhorn_plan(Q, cfg.eps, cfg.iters));
  auto c = sinkhorn(Q.to_vector(), Q.size(0), Q.size(1), cfg.eps, cfg.iters);
  auto P = Tensor::from(std::move(c.P), Q.shape(), Q.dtype());
  return sum(Q * P);
}

double brute_force_ot(const std::vector<double>& Q, std::int64_t n) {
  if (n < 1 || n > 6)
    throw ConfigError("brute-force OT enumerates n! permutations and is limited to n <= 6");
  if (static_cast<std::int64_t>(Q.size()) != n * n) throw ShapeError("brute_force_ot: Q is not n x n");
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0;
    for (std::int64_t x = 0; x < n; ++x) s += Q[x * n + perm[x]];
    best = std::min(best, s / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Tensor sinkhorn_divergence(const Tensor& x, const Tensor& y, const OtConfig& cfg) {
  auto wxy = ot_loss(cost_matrix(x, y, cfg.cost), cfg);
  if (!cfg.debiased) return wxy;
  auto wxx = ot_loss(cost_matrix(x, x, cfg.cost), cfg);
  auto wyy = ot_loss(cost_matrix(y, y, cfg.cost), cfg);
  return 2.0 * wxy - wxx - wyy;
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape() || p.dim() != 2) throw ShapeError("kl_divergence: shape mismatch");
  auto lp = encap::log(clamp_min(p, 1e-12));
  auto lq = encap::log(clamp_min(q, 1e-12));
  return sum(p * (lp - lq)) / static_cast<double>(p.size(0));
}

Tensor kl_alternative(const Tensor& p_feats, const Tensor& q_feats) {
  return kl_divergence(softmax(p_feats, 1), softmax(q_feats, 1));
}

Generator Generator::make(Rng& rng, std::int64_t in_channels, std::int64_t in_dim,
                          std::int64_t out_channels, std::int64_t out_dim, std::int64_t stride,
                          DType dt) {
  if (stride != 1 && stride != 2) throw ConfigError("generator stride must be 1 or 2");
  const auto cin = in_channels * in_dim, cout = out_channels * out_dim;
  if (cout % in_dim != 0)
    throw ConfigError("generator output channels " + std::to_string(cout) +
                      " not divisible by input capsule dimension " + std::to_string(in_dim));
  Generator g;
  g.deconv = ConvTranspose2d::make(rng, cin, cout, 3,
                                   {.stride = stride, .pad = 1, .output_padding = stride - 1,
                                    .groups = in_dim},
                                   dt);
  g.bn = BatchNorm::make(cout, dt);
  g.out_dim = out_dim;
  return g;
}

Tensor Generator::forward(const Tensor& v, bool training) const {
  return squash_grid(relu(bn.forward(deconv.forward(v), training)), out_dim);
}

void Generator::collect(ParamList& out, const std::string& prefix) const {
  deconv.collect(out, prefix + ".deconv");
  bn.collect(out, prefix + ".bn");
}

Extractor Extractor::make(Rng& rng, std::int64_t in_channels, DType dt) {
  if (in_channels < 4)
    throw ConfigError("extractor needs at least 4 input channels, got " +
                      std::to_string(in_channels));
  Extractor e;
  e.first = ConvBnRelu::make(rng, in_channels, in_channels / 4, 3, 2, 1, dt);
  e.second = ConvBnRelu::make(rng, in_channels / 4, 1, 3, 2, 1, dt);
  return e;
}

Tensor Extractor::forward(const Tensor& x, bool training) const {
  auto y = second.forward(first.forward(x, training), training);
  return reshape(y, {y.size(0), -1});
}

void Extractor::collect(ParamList& out, const std::string& prefix) const {
  first.collect(out, prefix + ".conv1");
  second.collect(out, prefix + ".conv2");
}

AgreementUnit AgreementUnit::make(Rng& rng, std::int64_t v_channels, std::int64_t v_dim,
                                  std::int64_t u_channels, std::int64_t u_dim,
                                  std::int64_t stride, DType dt) {
  AgreementUnit a;
  a.generator = Generator::make(rng, v_channels, v_dim, u_channels, u_dim, stride, dt);
  a.extractor = Extractor::make(rng, u_channels * u_dim, dt);
  return a;
}

Tensor AgreementUnit::loss(const Tensor& v, const Tensor& u, Regularizer kind,
                           const OtConfig& cfg, bool training) const {
  auto generated = generator.forward(v, training);
  if (generated.shape() != u.shape())
    throw ConfigError("generator output " + shape_str(generated.shape()) + " does not match " +
                      shape_str(u.shape()));
  const auto B = u.size(0);
  // One extractor pass over both sets so they share normalisation statistics.
  auto feats = extractor.forward(concat({generated, u}, 0), training);
  auto f_gen = narrow(feats, 0, 0, B);
  auto f_real = narrow(feats, 0, B, B);
  if (kind == Regularizer::kl) return kl_alternative(f_gen, f_real);
  return sinkhorn_divergence(f_gen, f_real, cfg);
}

void AgreementUnit::collect(ParamList& out, const std::string& prefix) const {
  generator.collect(out, prefix + ".generator");
  extractor.collect(out, prefix + ".extractor");
}

}  // namespace encap
