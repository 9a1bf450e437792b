#pragma once

#include <string>
#include <vector>

#include "encap/layers.hpp"

namespace encap {

enum class CostKind { cosine, l2 };

CostKind parse_cost_kind(const std::string& s);

struct OtConfig {
  double eps = 0.1;
  int iters = 10;
  bool stop_gradient = true;
  CostKind cost = CostKind::cosine;
  bool debiased = true;
};

/// Pairwise cost between rows of a [n2, F] and b [n1, F] -> [n2, n1].
/// cosine: 1 - cos (squared norm product floored at 1e-16); l2: squared Euclidean distance.
Tensor cost_matrix(const Tensor& a, const Tensor& b, CostKind kind);

/// Entropic coupling between uniform marginals on rows (size n2) and columns
/// (size n1), computed in the log domain.
struct Coupling {
  std::int64_t rows = 0, cols = 0;
  std::vector<double> P;      // row-major [rows, cols]
  std::vector<double> log_a;  // column scaling, [cols]
  std::vector<double> log_b;  // row scaling, [rows]

  std::vector<double> row_sums() const;
  std::vector<double> col_sums() const;
};

/// Starts from b = 1/rows and alternates a = (1/cols) / (K^T b) then
/// b = (1/rows) / (K a), `iters` times, with K = exp(-Q / eps).
/// P = diag(b) K diag(a). The row marginal is exact after the final update.
Coupling sinkhorn(const std::vector<double>& Q, std::int64_t rows, std::int64_t cols, double eps,
                  int iters);

/// <Q, P>. With stop_gradient the coupling is a constant and dL/dQ = P;
/// otherwise gradients flow through every Sinkhorn iterate.
Tensor ot_loss(const Tensor& Q, const OtConfig& cfg);

/// Differentiable coupling built from Sinkhorn iterates recorded on the tape.
Tensor sinkhorn_plan(const Tensor& Q, double eps, int iters);

/// Exact optimum over the n! permutation couplings (scaled 1/n); n <= 6.
double brute_force_ot(const std::vector<double>& Q, std::int64_t n);

/// 2 W(x, y) - W(x, x) - W(y, y) over features x [n2, F], y [n1, F], or the plain
/// W(x, y) when cfg.debiased is false.
Tensor sinkhorn_divergence(const Tensor& x, const Tensor& y, const OtConfig& cfg);

/// sum p log(p / q) along axis 1 with q clamped at 1e-12, averaged over rows.
Tensor kl_divergence(const Tensor& p, const Tensor& q);
/// KL between softmax-normalised feature rows.
Tensor kl_alternative(const Tensor& p_feats, const Tensor& q_feats);

/// Grouped transposed capConv mapping higher capsules back onto the lower grid:
/// groups = input capsule dimension, kernel 3, then BN -> ReLU -> squash.
struct Generator {
  ConvTranspose2d deconv;
  BatchNorm bn;
  std::int64_t out_dim = 1;

  static Generator make(Rng& rng, std::int64_t in_channels, std::int64_t in_dim,
                        std::int64_t out_channels, std::int64_t out_dim, std::int64_t stride,
                        DType dt);
  Tensor forward(const Tensor& v, bool training) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Two (3, pad 1, stride 2) conv-BN-ReLU stages: Cin -> Cin/4 -> 1, flattened.
struct Extractor {
  ConvBnRelu first;
  ConvBnRelu second;

  static Extractor make(Rng& rng, std::int64_t in_channels, DType dt);
  Tensor forward(const Tensor& x, bool training) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

enum class Regularizer { none, ot, kl };

Regularizer parse_regularizer(const std::string& s);

/// Feedback-agreement unit comparing generated lower capsules g(v) with the
/// actual lower capsules u.
struct AgreementUnit {
  Generator generator;
  Extractor extractor;

  static AgreementUnit make(Rng& rng, std::int64_t v_channels, std::int64_t v_dim,
                            std::int64_t u_channels, std::int64_t u_dim, std::int64_t stride,
                            DType dt);
  Tensor loss(const Tensor& v, const Tensor& u, Regularizer kind, const OtConfig& cfg,
              bool training) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

}  // namespace encap
