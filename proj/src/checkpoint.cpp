#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "encap/train.hpp"

namespace encap {

namespace {

constexpr char kMagic[8] = {'E', 'N', 'C', 'A', 'P', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <class U>
  void uint(U v) {
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os_.write(reinterpret_cast<const char*>(b), sizeof(U));
  }
  void f64(double x) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, 8);
    uint(bits);
  }
  void f32(float x) {
    std::uint32_t bits;
    std::memcpy(&bits, &x, 4);
    uint(bits);
  }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::string buf) : buf_(std::move(buf)) {}
  void need(std::size_t n) {
    if (pos_ + n > buf_.size())
      throw LengthError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  template <class U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  double f64() {
    const auto bits = uint<std::uint64_t>();
    double x;
    std::memcpy(&x, &bits, 8);
    return x;
  }
  float f32() {
    const auto bits = uint<std::uint32_t>();
    float x;
    std::memcpy(&x, &bits, 4);
    return x;
  }
  std::string str() {
    const auto n = uint<std::uint32_t>();
    need(n);
    auto s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string bytes(std::size_t n) {
    need(n);
    auto s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const Network& net, const CheckpointMeta& meta) {
  std::ostringstream os;
  Writer w(os);
  os.write(kMagic, 8);
  w.uint(kVersion);
  w.str(net.config().text);
  w.str(meta.data_dir);
  w.uint(static_cast<std::uint64_t>(meta.epoch));
  w.f64(meta.test_error);
  w.uint(meta.seed);
  const auto ps = net.params();
  w.uint(static_cast<std::uint32_t>(ps.size()));
  for (const auto& p : ps) {
    w.str(p.name);
    w.uint(static_cast<std::uint8_t>(p.tensor.dtype() == DType::f64));
    w.uint(static_cast<std::uint8_t>(p.trainable));
    w.uint(static_cast<std::uint32_t>(p.tensor.dim()));
    for (auto e : p.tensor.shape()) w.uint(static_cast<std::uint64_t>(e));
  }
  for (const auto& p : ps) {
    if (p.tensor.dtype() == DType::f64) {
      for (auto x : p.tensor.data<double>()) w.f64(x);
    } else {
      for (auto x : p.tensor.data<float>()) w.f32(x);
    }
  }
  // Write to a sibling file first so a crash never leaves a half checkpoint.
  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint '" + path + "'");
    const auto buf = os.str();
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw InputError("failed writing checkpoint '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw InputError("cannot move checkpoint into place at '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());
  if (r.bytes(8) != std::string(kMagic, 8)) throw FormatError("'" + path + "' is not a checkpoint");
  const auto version = r.uint<std::uint32_t>();
  if (version != kVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto text = r.str();
  CheckpointMeta meta;
  meta.data_dir = r.str();
  meta.epoch = static_cast<std::int64_t>(r.uint<std::uint64_t>());
  meta.test_error = r.f64();
  meta.seed = r.uint<std::uint64_t>();

  Checkpoint ck{Network::build(parse_config(text), meta.seed), meta};
  const auto ps = ck.net.params();
  const auto count = r.uint<std::uint32_t>();
  if (count != ps.size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, network has " +
                      std::to_string(ps.size()));
  std::vector<bool> f64(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name = r.str();
    f64[k] = r.uint<std::uint8_t>() != 0;
    r.uint<std::uint8_t>();
    const auto rank = r.uint<std::uint32_t>();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d)
      shape.push_back(static_cast<std::int64_t>(r.uint<std::uint64_t>()));
    if (name != ps[k].name || shape != ps[k].tensor.shape())
      throw FormatError("manifest entry " + name + " " + shape_str(shape) +
                        " does not match network tensor " + ps[k].name + " " +
                        shape_str(ps[k].tensor.shape()));
  }
  for (std::uint32_t k = 0; k < count; ++k) {
    auto t = ps[k].tensor;
    std::vector<double> vals(static_cast<std::size_t>(t.numel()));
    for (auto& v : vals) v = f64[k] ? r.f64() : static_cast<double>(r.f32());
    t.assign(vals);
  }
  return ck;
}

}  // namespace encap
