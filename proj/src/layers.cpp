#include "encap/layers.hpp"

#include <cmath>

namespace encap {

Tensor he_normal(Rng& rng, const Shape& shape, std::int64_t fan_in, DType dt) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(std::move(v), shape, dt);
}

Conv2d Conv2d::make(Rng& rng, std::int64_t cin, std::int64_t cout, std::int64_t k,
                    Conv2dArgs args, bool bias, DType dt) {
  if (cin % args.groups != 0 || cout % args.groups != 0)
    throw ConfigError("conv " + std::to_string(cin) + "->" + std::to_string(cout) +
                      " not divisible by groups " + std::to_string(args.groups));
  Conv2d c;
  c.args = args;
  const auto cin_g = cin / args.groups;
  c.weight = he_normal(rng, {cout, cin_g, k, k}, cin_g * k * k, dt);
  if (bias) c.bias = Tensor::zeros({cout}, dt);
  return c;
}

Tensor Conv2d::forward(const Tensor& x) const {
  auto y = conv2d(x, weight, args);
  if (bias.defined()) y = y + reshape(bias, {1, -1, 1, 1});
  return y;
}

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

ConvTranspose2d ConvTranspose2d::make(Rng& rng, std::int64_t cin, std::int64_t cout,
                                      std::int64_t k, ConvTranspose2dArgs args, DType dt) {
  if (cin % args.groups != 0 || cout % args.groups != 0)
    throw ConfigError("transposed conv " + std::to_string(cin) + "->" + std::to_string(cout) +
                      " not divisible by groups " + std::to_string(args.groups));
  ConvTranspose2d c;
  c.args = args;
  const auto cin_g = cin / args.groups;
  c.weight = he_normal(rng, {cin, cout / args.groups, k, k}, cin_g * k * k, dt);
  return c;
}

Tensor ConvTranspose2d::forward(const Tensor& x) const { return conv_transpose2d(x, weight, args); }

void ConvTranspose2d::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
}

BatchNorm BatchNorm::make(std::int64_t channels, DType dt) {
  BatchNorm b;
  b.gamma = Tensor::ones({channels}, dt);
  b.beta = Tensor::zeros({channels}, dt);
  b.running_mean = Tensor::zeros({channels}, dt);
  b.running_var = Tensor::ones({channels}, dt);
  return b;
}

Tensor BatchNorm::forward(const Tensor& x, bool training) const {
  return batchnorm(x, gamma, beta, running_mean, running_var, {.training = training});
}

void BatchNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma, true});
  out.push_back({prefix + ".beta", beta, true});
  out.push_back({prefix + ".running_mean", running_mean, false});
  out.push_back({prefix + ".running_var", running_var, false});
}

Linear Linear::make(Rng& rng, std::int64_t in, std::int64_t out, DType dt) {
  Linear l;
  l.weight = he_normal(rng, {in, out}, in, dt);
  l.bias = Tensor::zeros({out}, dt);
  return l;
}

Tensor Linear::forward(const Tensor& x) const { return matmul(x, weight) + bias; }

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, true});
}

ConvBnRelu ConvBnRelu::make(Rng& rng, std::int64_t cin, std::int64_t cout, std::int64_t k,
                            std::int64_t stride, std::int64_t pad, DType dt) {
  return {Conv2d::make(rng, cin, cout, k, {stride, pad, 1}, false, dt), BatchNorm::make(cout, dt)};
}

Tensor ConvBnRelu::forward(const Tensor& x, bool training) const {
  return relu(bn.forward(conv.forward(x), training));
}

void ConvBnRelu::collect(ParamList& out, const std::string& prefix) const {
  conv.collect(out, prefix + ".conv");
  bn.collect(out, prefix + ".bn");
}

ResBlock ResBlock::make(Rng& rng, std::int64_t cin, std::int64_t cout, std::int64_t stride,
                        DType dt) {
  ResBlock r;
  r.first = ConvBnRelu::make(rng, cin, cout, 3, stride, 1, dt);
  r.second = Conv2d::make(rng, cout, cout, 3, {1, 1, 1}, false, dt);
  r.bn2 = BatchNorm::make(cout, dt);
  r.project = stride != 1 || cin != cout;
  if (r.project) {
    r.proj = Conv2d::make(rng, cin, cout, 1, {stride, 0, 1}, false, dt);
    r.proj_bn = BatchNorm::make(cout, dt);
  }
  return r;
}

Tensor ResBlock::forward(const Tensor& x, bool training) const {
  auto y = bn2.forward(second.forward(first.forward(x, training)), training);
  auto s = project ? proj_bn.forward(proj.forward(x), training) : x;
  return relu(y + s);
}

void ResBlock::collect(ParamList& out, const std::string& prefix) const {
  first.collect(out, prefix + ".conv1");
  second.collect(out, prefix + ".conv2");
  bn2.collect(out, prefix + ".bn2");
  if (project) {
    proj.collect(out, prefix + ".proj");
    proj_bn.collect(out, prefix + ".proj_bn");
  }
}

Tensor global_avg_pool(const Tensor& x) {
  const auto& s = x.shape();
  return mean(reshape(x, {s[0], s[1], s[2] * s[3]}), 2);
}

}  // namespace encap
