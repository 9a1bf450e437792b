#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "encap/config.hpp"

namespace encap {

struct ForwardOptions {
  bool training = false;
  /// Evaluate the feedback-agreement units; they never run at eval time.
  bool regularize = false;
  /// Keep the class layer's predictions and outputs (CapNet families).
  bool keep_routing = false;
};

struct ForwardResult {
  Tensor class_caps;              // [B, n_classes, class_dim]
  std::vector<Tensor> module_ot;  // one scalar per module, undefined when inactive
  Tensor route_vhat;              // [B, n1, n_classes, class_dim]
  Tensor route_v;                 // [B, n_classes, class_dim]
};

/// margin + lambda * sum of the defined per-module divergences.
Tensor total_loss(const Tensor& margin, const std::vector<Tensor>& ot, double lambda);
Tensor total_loss(const Tensor& class_caps, const std::vector<int>& labels,
                  const std::vector<Tensor>& ot, double lambda, MarginLossArgs args = {});

struct LayerCount {
  std::string name;
  std::int64_t params = 0;  // trainable entries
  bool counts_depth = true;  // false for training-only units
};

class Network {
 public:
  Network() = default;
  /// Throws ConfigError when shapes between consecutive layers disagree.
  static Network build(const NetworkConfig& cfg, std::uint64_t seed);

  ForwardResult forward(const Tensor& x, ForwardOptions opts) const;

  /// Every tensor, including BN running statistics and aide masks
  /// (trainable = false).
  ParamList params() const;
  std::vector<LayerCount> layer_table() const;
  std::int64_t trainable_count() const;
  /// Weight layers on the inference path.
  std::int64_t depth() const;
  /// Depth predicted from the config alone.
  static std::int64_t depth_formula(const NetworkConfig& cfg);

  const NetworkConfig& config() const { return cfg_; }
  std::vector<const CapConvLayer*> capconv_layers() const;
  /// Shape of the CapNet hidden mapping, for complexity reporting.
  const CapnetShape& capnet_hidden_shape() const { return hidden_shape_; }
  std::int64_t capnet_grid_size() const { return grid_h_; }

 private:
  struct Entry {
    std::string name;
    bool counts_depth;
    std::function<void(ParamList&, const std::string&)> collect;
  };
  std::vector<Entry> entries() const;

  Tensor forward_stem(const Tensor& x, bool training) const;

  NetworkConfig cfg_;
  std::vector<ConvBnRelu> stem_;
  std::int64_t grid_h_ = 0, grid_w_ = 0;  // spatial extent after the stem

  // encapnet
  std::vector<EncapModule> modules_;
  std::vector<std::optional<AgreementUnit>> ot_a_, ot_b_;
  Tensor capfc_w_;

  // capnet families
  CapnetShape hidden_shape_, class_shape_;
  Tensor map_hidden_, map_class_;
  Conv2d act_conv_;  // EM input activations from the primary grid
  Tensor beta_v_hidden_, beta_a_hidden_, beta_v_class_, beta_a_class_;

  // vanilla_cnn and resnet
  ConvBnRelu conv5_;
  std::vector<ResBlock> blocks_;
  Linear fc_;
};

/// Mapping cost of a CapNet layer against a master/aide capConv with the same
/// capsule shape on an S x S grid.
struct ComplexityReport {
  std::int64_t kernel_channels = 0;        // output channels of the CapNet transform kernel
  std::int64_t capnet_mapping = 0;         // transform kernel entries
  std::int64_t master_aide_mapping = 0;    // two d1 -> d2 mappings per capsule channel
  std::int64_t capnet_routing = 0;         // n1 * n2 coupling coefficients
  std::int64_t master_aide_routing = 0;    // C1 * C2 * d2
  std::int64_t mapping_factor() const { return capnet_mapping / master_aide_mapping; }
  std::int64_t routing_factor() const { return capnet_routing / master_aide_routing; }
};

/// shape: C1 channels of d1-dim capsules on an S x S grid mapped to n2 = C2 S^2
/// capsules of d2 components.
ComplexityReport capnet_complexity(const CapnetShape& shape, std::int64_t grid);
/// Same numbers straight from a CapNet config, without allocating weights.
ComplexityReport capnet_complexity(const NetworkConfig& cfg);

}  // namespace encap
