#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "encap/data.hpp"
#include "encap/model.hpp"

namespace encap {

struct AdamArgs {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;  // decoupled: p -= lr * wd * p
};

/// Adam with bias correction and decoupled weight decay. Moments are kept in
/// double whatever the parameter precision.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamArgs args);

  /// Applies one update from the accumulated gradients (missing gradients
  /// count as zero), then clears them.
  void step(double lr);
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamArgs args_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Trainable tensors of a parameter list.
std::vector<Tensor> trainable(const ParamList& ps);

/// Epoch count and decay milestones after scaling by `scale` (rounded, at
/// least one epoch).
struct Schedule {
  std::int64_t epochs = 0;
  std::vector<std::int64_t> milestones;
  double base_lr = 0;
  double decay = 0.1;
  double lr_at(std::int64_t epoch) const;
};
Schedule make_schedule(const TrainConfig& t, double scale);

struct EvalResult {
  double error = 0;   // fraction misclassified
  double margin = 0;  // mean per-batch margin loss
  std::int64_t samples = 0;
};

/// Fraction of positions where pred and labels differ.
double error_rate(const std::vector<int>& pred, const std::vector<int>& labels);

/// Eval-mode BN, no graph, no regularizer.
EvalResult evaluate(const Network& net, const Dataset& ds, std::int64_t batch = 256);

struct MetricsRow {
  std::int64_t epoch = 0;
  std::string split;
  double loss = 0;
  double error = 0;
  std::vector<std::optional<double>> ot;  // per module; absent without the regularizer
  double lr = 0;
  double wallclock = 0;
  double margin = 0;
};

/// Header "epoch,split,loss,error,ot_m1..ot_mK,lr,wallclock,margin" with
/// K = max(4, n_modules); absent values are empty fields.
std::string metrics_header(std::size_t ot_columns);
std::string metrics_line(const MetricsRow& row, std::size_t ot_columns);

/// cos(v_j, v_hat_{j|i}) histogram of the class routing layer of a CapNet over
/// the first `samples` images of `ds`, eval mode.
std::vector<HistogramRow> network_routing_histogram(const Network& net, const Dataset& ds,
                                                    std::int64_t samples, int bins);
/// "bin_low,bin_high,percent,mean_length" with %.17g values.
void write_histogram_csv(const std::string& path, const std::vector<HistogramRow>& rows);

struct TrainOptions {
  double scale = 1.0;
  std::string metrics_out;     // CSV, truncated at start
  std::string checkpoint_out;  // best test error so far
  std::string snapshot_dir;    // init.ckpt and epoch_<e>.ckpt when set
  std::string data_dir;        // recorded in checkpoints
  bool verbose = false;
  std::function<void(std::int64_t epoch, const Network&)> on_epoch_end;
};

struct TrainSummary {
  std::vector<MetricsRow> rows;
  std::int64_t epochs = 0;
  double best_test_error = 1;
  double final_test_error = 1;
};

/// Runs the scaled schedule. A non-finite loss or update reruns the failing
/// step under anomaly detection and throws NumericError naming the first op
/// that produced a non-finite value.
TrainSummary train(Network& net, const Dataset& train_set, const Dataset& test_set,
                   const TrainOptions& opts);

struct CheckpointMeta {
  std::int64_t epoch = -1;
  double test_error = 1;
  std::uint64_t seed = 0;
  std::string data_dir;
};

/// Layout, all integers little-endian:
///   "ENCAPCKP" | u32 version | u32 len, config text | u32 len, data dir |
///   i64 epoch | f64 test error | u64 seed | u32 tensor count |
///   per tensor: u32 len, name | u8 dtype (0 f32, 1 f64) | u8 trainable |
///               u32 rank | i64 extents... |
///   then every tensor's raw little-endian values in manifest order.
void save_checkpoint(const std::string& path, const Network& net, const CheckpointMeta& meta);

struct Checkpoint {
  Network net;
  CheckpointMeta meta;
};

/// Rebuilds the network from the stored config and restores every tensor.
/// Bad magic or version → FormatError; short file → LengthError; manifest
/// that disagrees with the rebuilt network → FormatError.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace encap
