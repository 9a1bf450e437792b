#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "encap/capconv.hpp"
#include "encap/capsule.hpp"
#include "encap/routing.hpp"
#include "encap/sinkhorn.hpp"

namespace encap {

enum class Family { encapnet, capnet_dynamic, capnet_em, vanilla_cnn, resnet };

Family parse_family(const std::string& s);
const char* to_string(Family f);

/// conv(k, stride, pad) -> BN -> ReLU with `out` channels.
struct StemLayerConfig {
  std::int64_t out = 0;
  std::int64_t kernel = 3;
  std::int64_t stride = 1;
  std::int64_t pad = 1;
};

struct ModuleConfig {
  std::int64_t out_dim = 0;
  std::int64_t stride = 1;
  std::int64_t type2_count = 0;  // N
  Interaction interaction = Interaction::v3;
  AideMode aide = AideMode::exclude;
  SkipMode skip = SkipMode::none;
  /// OT-A compares the module output with the module input, OT-B with the
  /// Type I output (the source of the Type II skip path).
  bool ot_a = true;
  bool ot_b = false;
};

struct CapnetConfig {
  std::int64_t hidden_channels = 0;  // C2 of the hidden capsule grid
  std::int64_t hidden_dim = 16;
  int iterations = 3;
  bool softmax_over_i = true;
  EmRoutingArgs em;
};

struct ResnetConfig {
  std::vector<std::int64_t> blocks;   // n_i per stage
  std::vector<std::int64_t> widths;   // output channels per stage
  std::vector<std::int64_t> strides;  // first-block stride per stage
};

struct RegularizerConfig {
  Regularizer kind = Regularizer::none;
  double lambda = 10.0;
  OtConfig ot;
  bool active() const { return kind != Regularizer::none && lambda > 0; }
};

struct TrainConfig {
  double lr = 1e-4;
  std::vector<double> schedule{200, 300, 400};
  double decay = 0.1;
  double max_epoch = 600;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 5e-4;
  std::int64_t batch = 128;
  bool augment = true;
  std::int64_t train_limit = 0;  // 0 keeps the full split
  std::int64_t test_limit = 0;
  std::uint64_t seed = 0;
};

struct NetworkConfig {
  Family family = Family::encapnet;
  std::int64_t in_channels = 1;
  std::int64_t in_size = 28;
  std::int64_t n_classes = 10;
  DType dtype = DType::f32;

  std::vector<StemLayerConfig> stem;
  /// The last stem activation is read as caps_channels capsule channels of
  /// caps_dim components each.
  std::int64_t caps_channels = 0;
  std::int64_t caps_dim = 1;
  std::vector<ModuleConfig> modules;
  std::int64_t class_dim = 16;

  CapnetConfig capnet;
  std::int64_t vanilla_channels = 0;  // fifth conv of the plain CNN
  ResnetConfig resnet;

  RegularizerConfig reg;
  MarginLossArgs margin;
  TrainConfig train;

  /// Source text, kept verbatim so checkpoints rebuild the same network.
  std::string text;
};

/// Parses the INI-style config text; unknown families, bad enums, and
/// missing required keys raise ConfigError.
NetworkConfig parse_config(const std::string& text);
NetworkConfig load_config(const std::string& path);

/// Applies "section.key=value" on top of the source text and reparses.
NetworkConfig override_config(const NetworkConfig& cfg, const std::vector<std::string>& sets);

}  // namespace encap
