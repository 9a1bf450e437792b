#pragma once

#include <optional>
#include <string>
#include <vector>

#include "encap/layers.hpp"

namespace encap {

enum class Interaction { master_only, v1, v2, v3 };
enum class AideMode { exclude, include };
enum class CapConvType { I, II };
enum class SkipMode { none, type_I, type_II, both };

Interaction parse_interaction(const std::string& s);
AideMode parse_aide_mode(const std::string& s);
SkipMode parse_skip_mode(const std::string& s);
const char* to_string(Interaction v);
const char* to_string(AideMode v);
const char* to_string(SkipMode v);

struct CapConvSpec {
  std::int64_t channels = 0;  // capsule channels C, equal on input and output
  std::int64_t in_dim = 0;    // d1
  std::int64_t out_dim = 0;   // d2
  CapConvType type = CapConvType::I;
  std::int64_t stride = 1;
  std::int64_t aide_kernel = 1;
  Interaction interaction = Interaction::v3;
  AideMode aide = AideMode::exclude;

  /// Type I uses a 3x3 master kernel with padding 1, Type II a 1x1 kernel.
  std::int64_t master_kernel() const { return type == CapConvType::I ? 3 : 1; }
  std::int64_t master_pad() const { return type == CapConvType::I ? 1 : 0; }
  void validate() const;
};

/// Intermediate results of one capConv layer.
struct CapConvBranches {
  Tensor master;  // v_hat^(1), [B, C*d2, H', W']
  Tensor aide;    // v_hat^(2), undefined for master_only
  Tensor m1, m2;  // [B, C, 1, H'*W'] coefficients, undefined for master_only
};

/// s = m1 * master(u) + m2 * aide(u), then BN -> ReLU -> squash, in one pass.
class CapConvLayer {
 public:
  CapConvLayer() = default;
  CapConvLayer(const CapConvSpec& spec, Rng& rng, DType dt);

  const CapConvSpec& spec() const { return spec_; }
  CapConvBranches branches(const Tensor& u) const;
  /// Pre-normalisation sum m1 * v_hat^(1) + m2 * v_hat^(2).
  Tensor combine(const CapConvBranches& br) const;
  Tensor forward(const Tensor& u, bool training) const;
  void collect(ParamList& out, const std::string& prefix) const;

  /// connectivity[j][i]: whether input capsule channel i feeds output capsule
  /// channel j through the master (resp. aide) branch, read off the weight
  /// grouping and mask.
  std::vector<std::vector<bool>> master_connectivity() const;
  std::vector<std::vector<bool>> aide_connectivity() const;

  Conv2d master;
  Conv2d aide;
  Tensor aide_mask;  // same shape as aide.weight; 0 blocks a connection
  Conv2d coef_a;     // v1/v2: produces m1; v3: produces (m1, m2) per capsule
  Conv2d coef_b;     // v1/v2: produces m2
  BatchNorm bn;

 private:
  CapConvSpec spec_;
};

/// True when, for every output capsule channel, master and aide inputs are
/// disjoint and together cover all input channels.
bool master_aide_partition_holds(const CapConvLayer& layer);

struct ModuleSpec {
  std::int64_t channels = 0;
  std::int64_t in_dim = 0;
  std::int64_t out_dim = 0;
  std::int64_t stride = 1;
  std::int64_t type2_count = 0;  // N
  Interaction interaction = Interaction::v3;
  AideMode aide = AideMode::exclude;
  SkipMode skip = SkipMode::none;
};

struct ModuleOutput {
  Tensor out;
  Tensor type1_out;
};

/// One Type I capConv followed by N Type II capConvs, with optional skips.
class EncapModule {
 public:
  EncapModule() = default;
  EncapModule(const ModuleSpec& spec, Rng& rng, DType dt);

  const ModuleSpec& spec() const { return spec_; }
  ModuleOutput forward(const Tensor& u, bool training) const;
  void collect(ParamList& out, const std::string& prefix) const;
  std::int64_t depth() const { return 1 + spec_.type2_count; }

  CapConvLayer type1;
  std::vector<CapConvLayer> type2;
  std::optional<Conv2d> projection;  // Type I skip, 1x1 grouped and strided

 private:
  ModuleSpec spec_;
};

}  // namespace encap
