#include "encap/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "encap/rng.hpp"

namespace encap {

namespace {

std::vector<unsigned char> read_maybe_gz(const std::string& path) {
  // gzread passes plain files through unchanged.
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw FormatError("cannot open '" + path + "'");
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError("'" + path + "' is not a readable gzip stream");
  return out;
}

void write_maybe_gz(const std::string& path, const std::vector<unsigned char>& data) {
  const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
  gzFile f = gzopen(path.c_str(), gz ? "wb9" : "wbT");
  if (!f) throw FormatError("cannot write '" + path + "'");
  const int n = gzwrite(f, data.data(), static_cast<unsigned>(data.size()));
  gzclose(f);
  if (n != static_cast<int>(data.size())) throw FormatError("short write to '" + path + "'");
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::uint32_t crc_of(const std::vector<unsigned char>& b) {
  return static_cast<std::uint32_t>(crc32(0L, b.data(), static_cast<uInt>(b.size())));
}

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

}  // namespace

Tensor Dataset::images(const std::vector<std::int64_t>& idx, DType dt) const {
  const auto m = image_numel();
  std::vector<double> v(idx.size() * static_cast<std::size_t>(m));
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy_n(pixels.begin() + idx[k] * m, m, v.begin() + static_cast<std::ptrdiff_t>(k * m));
  return Tensor::from(std::move(v), {static_cast<std::int64_t>(idx.size()), channels, height, width},
                      dt);
}

Dataset Dataset::head(std::int64_t n) const {
  Dataset d = *this;
  n = std::min(n, size());
  d.labels.resize(static_cast<std::size_t>(n));
  d.pixels.resize(static_cast<std::size_t>(n * image_numel()));
  return d;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split, std::int64_t limit, std::vector<std::uint32_t>* crc_out) {
  const auto img = read_maybe_gz(images_path);
  const auto lab = read_maybe_gz(labels_path);
  if (crc_out) *crc_out = {crc_of(img), crc_of(lab)};
  if (img.size() < 16 || be32(img, 0) != kImageMagic)
    throw FormatError("'" + images_path + "' is not an IDX image file (magic 0x00000803)");
  if (lab.size() < 8 || be32(lab, 0) != kLabelMagic)
    throw FormatError("'" + labels_path + "' is not an IDX label file (magic 0x00000801)");
  const std::int64_t n = be32(img, 4), H = be32(img, 8), W = be32(img, 12);
  const std::int64_t nl = be32(lab, 4);
  if (n != nl)
    throw FormatError("image count " + std::to_string(n) + " differs from label count " +
                      std::to_string(nl));
  if (static_cast<std::int64_t>(img.size()) < 16 + n * H * W)
    throw LengthError("'" + images_path + "' holds " + std::to_string(img.size() - 16) +
                      " pixel bytes, header promises " + std::to_string(n * H * W));
  if (static_cast<std::int64_t>(lab.size()) < 8 + n)
    throw LengthError("'" + labels_path + "' holds " + std::to_string(lab.size() - 8) +
                      " labels, header promises " + std::to_string(n));
  const auto keep = limit > 0 ? std::min(limit, n) : n;
  Dataset d;
  d.height = H;
  d.width = W;
  d.split = split;
  d.pixels.resize(static_cast<std::size_t>(keep * H * W));
  for (std::size_t i = 0; i < d.pixels.size(); ++i) d.pixels[i] = img[16 + i] / 255.0f;
  d.labels.resize(static_cast<std::size_t>(keep));
  int max_label = 0;
  for (std::int64_t i = 0; i < keep; ++i) {
    d.labels[i] = lab[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.n_classes = std::max(10, max_label + 1);
  return d;
}

Dataset load_mnist_split(const std::string& dir, const std::string& stem, std::int64_t limit) {
  namespace fs = std::filesystem;
  auto pick = [&](const std::string& kind) {
    const auto base = (fs::path(dir) / (stem + "-" + kind)).string();
    if (fs::exists(base + ".gz")) return base + ".gz";
    if (fs::exists(base)) return base;
    throw FormatError("missing IDX file '" + base + "[.gz]'");
  };
  return load_idx(pick("images-idx3-ubyte"), pick("labels-idx1-ubyte"), stem, limit);
}

void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  if (ds.channels != 1) throw FormatError("IDX images are single channel");
  std::vector<unsigned char> img, lab;
  put_be32(img, kImageMagic);
  put_be32(img, static_cast<std::uint32_t>(ds.size()));
  put_be32(img, static_cast<std::uint32_t>(ds.height));
  put_be32(img, static_cast<std::uint32_t>(ds.width));
  for (float v : ds.pixels)
    img.push_back(static_cast<unsigned char>(std::clamp(std::lround(v * 255.0f), 0L, 255L)));
  put_be32(lab, kLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) lab.push_back(static_cast<unsigned char>(l));
  write_maybe_gz(images_path, img);
  write_maybe_gz(labels_path, lab);
}

namespace {

// Bar from the centre along `angle` plus a dot at its far end, drawn with a
// soft edge so small pose changes move intensity smoothly.
void draw_pattern(float* out, int size, int k, int n_classes, double angle_jitter, double dx,
                  double dy) {
  const double pi = std::acos(-1.0);
  const double angle = pi * k / n_classes + angle_jitter;
  const double c = (size - 1) / 2.0;
  const double half = size * 0.32, width = 1.6;
  const double ux = std::cos(angle), uy = std::sin(angle);
  const double dot_x = c + dx + ux * half, dot_y = c + dy + uy * half;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double px = x - c - dx, py = y - c - dy;
      const double t = std::clamp(px * ux + py * uy, -half, half);
      const double dist = std::hypot(px - t * ux, py - t * uy);
      double v = std::clamp(1.0 - (dist - width / 2) / 1.0, 0.0, 1.0);
      const double dd = std::hypot(x - dot_x, y - dot_y);
      v = std::max(v, std::clamp(1.0 - (dd - 2.0), 0.0, 1.0));
      out[y * size + x] = static_cast<float>(v);
    }
}

}  // namespace

std::vector<float> synth_base_pattern(const SyntheticSpec& spec, int k) {
  std::vector<float> img(static_cast<std::size_t>(spec.size * spec.size));
  draw_pattern(img.data(), spec.size, k, spec.n_classes, 0, 0, 0);
  return img;
}

Dataset synth_generate(const SyntheticSpec& spec) {
  if (spec.n_classes < 1 || spec.per_class < 1 || spec.size < 4)
    throw ConfigError("synthetic spec needs classes, samples and an image of at least 4x4");
  Dataset d;
  d.height = d.width = spec.size;
  d.n_classes = spec.n_classes;
  d.split = "synthetic";
  const auto m = static_cast<std::size_t>(spec.size * spec.size);
  d.pixels.resize(m * static_cast<std::size_t>(spec.n_classes * spec.per_class));
  const Rng root(spec.seed);
  const double pi = std::acos(-1.0);
  std::size_t at = 0;
  for (int s = 0; s < spec.per_class; ++s)
    for (int k = 0; k < spec.n_classes; ++k) {
      Rng rng = root.split(static_cast<std::uint64_t>(s) * 1000003u + static_cast<std::uint64_t>(k));
      double rot = 0, dx = 0, dy = 0;
      if (s > 0) {
        rot = rng.uniform(-8.0, 8.0) * pi / 180.0;
        dx = rng.uniform(-2.0, 2.0);
        dy = rng.uniform(-2.0, 2.0);
      }
      float* img = d.pixels.data() + at * m;
      draw_pattern(img, spec.size, k, spec.n_classes, rot, dx, dy);
      if (spec.noise > 0)
        for (std::size_t i = 0; i < m; ++i)
          img[i] = static_cast<float>(std::clamp(img[i] + spec.noise * rng.normal(), 0.0, 1.0));
      d.labels.push_back(k);
      ++at;
    }
  return d;
}

std::vector<float> resize_bilinear(const float* src, std::int64_t C, std::int64_t H,
                                   std::int64_t W, std::int64_t Ho, std::int64_t Wo) {
  std::vector<float> out(static_cast<std::size_t>(C * Ho * Wo));
  const double sy = static_cast<double>(H) / Ho, sx = static_cast<double>(W) / Wo;
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t y = 0; y < Ho; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
      const auto y0 = static_cast<std::int64_t>(fy);
      const auto y1 = std::min(y0 + 1, H - 1);
      const double wy = fy - y0;
      for (std::int64_t x = 0; x < Wo; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
        const auto x0 = static_cast<std::int64_t>(fx);
        const auto x1 = std::min(x0 + 1, W - 1);
        const double wx = fx - x0;
        const float* p = src + c * H * W;
        const double v = (1 - wy) * ((1 - wx) * p[y0 * W + x0] + wx * p[y0 * W + x1]) +
                         wy * ((1 - wx) * p[y1 * W + x0] + wx * p[y1 * W + x1]);
        out[static_cast<std::size_t>((c * Ho + y) * Wo + x)] = static_cast<float>(v);
      }
    }
  return out;
}

Batcher::Batcher(const Dataset& ds, std::int64_t batch_size, std::uint64_t seed, bool shuffle,
                 bool augment, DType dt)
    : ds_(ds), batch_size_(batch_size), seed_(seed), shuffle_(shuffle), augment_(augment), dt_(dt) {
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  begin_epoch(0);
}

void Batcher::begin_epoch(std::int64_t epoch) {
  epoch_ = epoch;
  order_.resize(static_cast<std::size_t>(ds_.size()));
  std::iota(order_.begin(), order_.end(), 0);
  if (!shuffle_) return;
  Rng rng = Rng(seed_).split(0x5348554646ULL + static_cast<std::uint64_t>(epoch));
  for (std::size_t i = order_.size(); i > 1; --i)
    std::swap(order_[i - 1], order_[rng.below(i)]);
}

std::int64_t Batcher::num_batches() const { return (ds_.size() + batch_size_ - 1) / batch_size_; }

Batch Batcher::batch(std::int64_t k) const {
  if (k < 0 || k >= num_batches()) throw ContractError("batch index out of range");
  Batch b;
  const auto start = k * batch_size_, stop = std::min(ds_.size(), start + batch_size_);
  b.indices.assign(order_.begin() + start, order_.begin() + stop);
  for (auto i : b.indices) b.labels.push_back(ds_.labels[static_cast<std::size_t>(i)]);
  if (!augment_) {
    b.images = ds_.images(b.indices, dt_);
    return b;
  }
  const auto C = ds_.channels, H = ds_.height, W = ds_.width, m = ds_.image_numel();
  Rng rng = Rng(seed_).split(0x41554731ULL + static_cast<std::uint64_t>(epoch_) * 1000003u +
                             static_cast<std::uint64_t>(k));
  std::vector<double> v(b.indices.size() * static_cast<std::size_t>(m));
  for (std::size_t s = 0; s < b.indices.size(); ++s) {
    const auto big = resize_bilinear(ds_.pixels.data() + b.indices[s] * m, C, H, W, H + 2, W + 2);
    const auto oy = static_cast<std::int64_t>(rng.below(3)), ox = static_cast<std::int64_t>(rng.below(3));
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x)
          v[s * m + (c * H + y) * W + x] = big[static_cast<std::size_t>((c * (H + 2) + y + oy) * (W + 2) + x + ox)];
  }
  b.images = Tensor::from(std::move(v), {static_cast<std::int64_t>(b.indices.size()), C, H, W}, dt_);
  return b;
}

}  // namespace encap
