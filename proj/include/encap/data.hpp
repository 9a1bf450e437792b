#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "encap/tensor.hpp"

namespace encap {

struct Dataset {
  std::int64_t channels = 1, height = 0, width = 0;
  std::vector<float> pixels;  // [N, C, H, W] in [0, 1]
  std::vector<int> labels;
  int n_classes = 10;
  std::string split;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t image_numel() const { return channels * height * width; }
  /// Images [idx.size(), C, H, W] in the requested dtype.
  Tensor images(const std::vector<std::int64_t>& idx, DType dt) const;
  /// First n samples.
  Dataset head(std::int64_t n) const;
};

/// Reads an IDX image/label pair, gzip-compressed or plain. Pixels are scaled
/// by 1/255. `limit` > 0 keeps only the first `limit` samples. The CRC-32 of
/// each decompressed file is stored in `crc_out` when given.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split = "", std::int64_t limit = 0,
                 std::vector<std::uint32_t>* crc_out = nullptr);

/// Loads <dir>/<stem>-images-idx3-ubyte[.gz] and the matching labels.
Dataset load_mnist_split(const std::string& dir, const std::string& stem, std::int64_t limit = 0);

/// Writes pixels as round(255 v); gzip when the path ends in ".gz".
void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

struct SyntheticSpec {
  int n_classes = 10;
  int per_class = 100;
  int size = 28;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

/// Class k is a bar through the centre at angle k*pi/n_classes with a dot on
/// one end. Sample 0 of each class sits at the canonical pose; later samples
/// get a rotation jitter of up to 8 degrees and a shift of up to 2 pixels.
/// Gaussian pixel noise of std `noise` is added and clamped to [0, 1].
Dataset synth_generate(const SyntheticSpec& spec);
/// Noise-free canonical image of class k, [size * size].
std::vector<float> synth_base_pattern(const SyntheticSpec& spec, int k);

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::int64_t> indices;
};

/// Deterministic epoch batching: the order of epoch e is a permutation drawn
/// from (seed, e), the final partial batch is kept, and with augmentation each
/// image is resized to (H+2)x(W+2) bilinearly and randomly cropped back.
class Batcher {
 public:
  Batcher(const Dataset& ds, std::int64_t batch_size, std::uint64_t seed, bool shuffle,
          bool augment, DType dt = DType::f32);

  void begin_epoch(std::int64_t epoch);
  std::int64_t num_batches() const;
  Batch batch(std::int64_t k) const;
  const std::vector<std::int64_t>& order() const { return order_; }

 private:
  const Dataset& ds_;
  std::int64_t batch_size_;
  std::uint64_t seed_;
  bool shuffle_, augment_;
  DType dt_;
  std::int64_t epoch_ = 0;
  std::vector<std::int64_t> order_;
};

/// Bilinear resize of one [C, H, W] image (align-corners off, edge clamped).
std::vector<float> resize_bilinear(const float* src, std::int64_t C, std::int64_t H,
                                   std::int64_t W, std::int64_t Ho, std::int64_t Wo);

}  // namespace encap
