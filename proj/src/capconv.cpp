#include "encap/capconv.hpp"

#include "encap/capsule.hpp"

namespace encap {

Interaction parse_interaction(const std::string& s) {
  if (s == "master_only" || s == "master") return Interaction::master_only;
  if (s == "v1") return Interaction::v1;
  if (s == "v2") return Interaction::v2;
  if (s == "v3") return Interaction::v3;
  throw ConfigError("unknown interaction variant '" + s + "'");
}

AideMode parse_aide_mode(const std::string& s) {
  if (s == "exclude") return AideMode::exclude;
  if (s == "include" || s == "all") return AideMode::include;
  throw ConfigError("unknown aide mode '" + s + "'");
}

SkipMode parse_skip_mode(const std::string& s) {
  if (s == "none") return SkipMode::none;
  if (s == "type_I" || s == "type1") return SkipMode::type_I;
  if (s == "type_II" || s == "type2") return SkipMode::type_II;
  if (s == "both") return SkipMode::both;
  throw ConfigError("unknown skip mode '" + s + "'");
}

const char* to_string(Interaction v) {
  switch (v) {
    case Interaction::master_only: return "master_only";
    case Interaction::v1: return "v1";
    case Interaction::v2: return "v2";
    case Interaction::v3: return "v3";
  }
  return "?";
}

const char* to_string(AideMode v) { return v == AideMode::exclude ? "exclude" : "include"; }

const char* to_string(SkipMode v) {
  switch (v) {
    case SkipMode::none: return "none";
    case SkipMode::type_I: return "type_I";
    case SkipMode::type_II: return "type_II";
    case SkipMode::both: return "both";
  }
  return "?";
}

void CapConvSpec::validate() const {
  if (channels <= 0 || in_dim <= 0 || out_dim <= 0 || stride <= 0 || aide_kernel <= 0)
    throw ConfigError("capConv needs positive channels, dims, stride and kernel");
  if (type == CapConvType::II && (in_dim != out_dim || stride != 1))
    throw ConfigError("Type II capConv keeps capsule dimension and spatial size");
  if (aide_kernel % 2 == 0) throw ConfigError("aide kernel must be odd");
}

CapConvLayer::CapConvLayer(const CapConvSpec& spec, Rng& rng, DType dt) : spec_(spec) {
  spec.validate();
  const auto C = spec.channels, d1 = spec.in_dim, d2 = spec.out_dim;
  const auto k1 = spec.master_kernel();
  master = Conv2d::make(rng, C * d1, C * d2, k1, {spec.stride, spec.master_pad(), C}, false, dt);
  bn = BatchNorm::make(C * d2, dt);
  if (spec.interaction == Interaction::master_only) return;

  const auto k2 = spec.aide_kernel;
  aide = Conv2d::make(rng, C * d1, C * d2, k2, {spec.stride, k2 / 2, 1}, false, dt);
  std::vector<double> mask(static_cast<std::size_t>(aide.weight.numel()), 1.0);
  if (spec.aide == AideMode::exclude) {
    for (std::int64_t o = 0; o < C * d2; ++o)
      for (std::int64_t i = 0; i < C * d1; ++i)
        if (o / d2 == i / d1)
          for (std::int64_t t = 0; t < k2 * k2; ++t)
            mask[static_cast<std::size_t>((o * C * d1 + i) * k2 * k2 + t)] = 0.0;
  }
  aide_mask = Tensor::from(std::move(mask), aide.weight.shape(), dt);
  aide.weight = mul(aide.weight, aide_mask).detach();

  if (spec.interaction == Interaction::v3) {
    coef_a = Conv2d::make(rng, 2 * C * d2, 2 * C, 1, {1, 0, C}, true, dt);
  } else {
    coef_a = Conv2d::make(rng, C * d2, C, 1, {1, 0, C}, true, dt);
    coef_b = Conv2d::make(rng, C * d2, C, 1, {1, 0, C}, true, dt);
  }
}

CapConvBranches CapConvLayer::branches(const Tensor& u) const {
  CapConvBranches br;
  br.master = master.forward(u);
  if (spec_.interaction == Interaction::master_only) return br;
  br.aide = conv2d(u, mul(aide.weight, aide_mask), aide.args);
  const auto B = br.master.size(0), H = br.master.size(2), W = br.master.size(3);
  const auto C = spec_.channels, d2 = spec_.out_dim;
  switch (spec_.interaction) {
    case Interaction::v1:
      br.m1 = sigmoid(coef_a.forward(br.master));
      br.m2 = sigmoid(coef_b.forward(br.aide));
      break;
    case Interaction::v2:
      br.m1 = sigmoid(coef_a.forward(br.aide));
      br.m2 = sigmoid(coef_b.forward(br.master));
      break;
    case Interaction::v3: {
      // Interleave per capsule channel so each group of the 1x1 conv sees
      // both activations of its own capsule.
      auto a = reshape(br.master, {B, C, d2, H * W});
      auto b = reshape(br.aide, {B, C, d2, H * W});
      auto both = reshape(concat({a, b}, 2), {B, 2 * C * d2, H, W});
      auto m = reshape(sigmoid(coef_a.forward(both)), {B, C, 2, H * W});
      br.m1 = narrow(m, 2, 0, 1);
      br.m2 = narrow(m, 2, 1, 1);
      break;
    }
    case Interaction::master_only:
      break;
  }
  br.m1 = reshape(br.m1, {B, C, 1, H * W});
  br.m2 = reshape(br.m2, {B, C, 1, H * W});
  return br;
}

Tensor CapConvLayer::combine(const CapConvBranches& br) const {
  if (spec_.interaction == Interaction::master_only) return br.master;
  const auto& s = br.master.shape();
  const auto C = spec_.channels, d2 = spec_.out_dim;
  auto a = reshape(br.master, {s[0], C, d2, s[2] * s[3]});
  auto b = reshape(br.aide, {s[0], C, d2, s[2] * s[3]});
  return reshape(br.m1 * a + br.m2 * b, s);
}

Tensor CapConvLayer::forward(const Tensor& u, bool training) const {
  auto s = combine(branches(u));
  return squash_grid(relu(bn.forward(s, training)), spec_.out_dim);
}

void CapConvLayer::collect(ParamList& out, const std::string& prefix) const {
  master.collect(out, prefix + ".master");
  if (spec_.interaction != Interaction::master_only) {
    aide.collect(out, prefix + ".aide");
    out.push_back({prefix + ".aide.mask", aide_mask, false});
    coef_a.collect(out, prefix + ".coef_a");
    if (coef_b.weight.defined()) coef_b.collect(out, prefix + ".coef_b");
  }
  bn.collect(out, prefix + ".bn");
}

std::vector<std::vector<bool>> CapConvLayer::master_connectivity() const {
  const auto C = spec_.channels, d1 = spec_.in_dim, d2 = spec_.out_dim;
  const auto groups = master.args.groups;
  const auto cout_g = C * d2 / groups, cin_g = C * d1 / groups;
  std::vector<std::vector<bool>> conn(static_cast<std::size_t>(C),
                                      std::vector<bool>(static_cast<std::size_t>(C), false));
  for (std::int64_t o = 0; o < C * d2; ++o) {
    const auto g = o / cout_g;
    for (std::int64_t i = g * cin_g; i < (g + 1) * cin_g; ++i)
      conn[static_cast<std::size_t>(o / d2)][static_cast<std::size_t>(i / d1)] = true;
  }
  return conn;
}

std::vector<std::vector<bool>> CapConvLayer::aide_connectivity() const {
  const auto C = spec_.channels, d1 = spec_.in_dim, d2 = spec_.out_dim;
  std::vector<std::vector<bool>> conn(static_cast<std::size_t>(C),
                                      std::vector<bool>(static_cast<std::size_t>(C), false));
  if (spec_.interaction == Interaction::master_only) return conn;
  const auto M = aide_mask.to_vector();
  const auto kk = aide_mask.size(2) * aide_mask.size(3);
  for (std::int64_t o = 0; o < C * d2; ++o)
    for (std::int64_t i = 0; i < C * d1; ++i)
      for (std::int64_t t = 0; t < kk; ++t)
        if (M[static_cast<std::size_t>((o * C * d1 + i) * kk + t)] != 0.0)
          conn[static_cast<std::size_t>(o / d2)][static_cast<std::size_t>(i / d1)] = true;
  return conn;
}

bool master_aide_partition_holds(const CapConvLayer& layer) {
  const auto m = layer.master_connectivity();
  const auto a = layer.aide_connectivity();
  const bool has_aide = layer.spec().interaction != Interaction::master_only;
  for (std::size_t j = 0; j < m.size(); ++j)
    for (std::size_t i = 0; i < m[j].size(); ++i) {
      if (m[j][i] && a[j][i]) return false;
      // Without an aide branch only the master's own channel is expected.
      if (has_aide && !(m[j][i] || a[j][i])) return false;
      if (!has_aide && m[j][i] != (i == j)) return false;
    }
  return true;
}

EncapModule::EncapModule(const ModuleSpec& spec, Rng& rng, DType dt) : spec_(spec) {
  if (spec.type2_count < 0) throw ConfigError("module needs a nonnegative Type II count");
  CapConvSpec s1{spec.channels, spec.in_dim, spec.out_dim, CapConvType::I, spec.stride, 1,
                 spec.interaction, spec.aide};
  type1 = CapConvLayer(s1, rng, dt);
  CapConvSpec s2{spec.channels, spec.out_dim, spec.out_dim, CapConvType::II, 1, 1,
                 spec.interaction, spec.aide};
  for (std::int64_t n = 0; n < spec.type2_count; ++n) type2.emplace_back(s2, rng, dt);
  if (spec.skip == SkipMode::type_I || spec.skip == SkipMode::both)
    projection = Conv2d::make(rng, spec.channels * spec.in_dim, spec.channels * spec.out_dim, 1,
                              {spec.stride, 0, spec.channels}, false, dt);
}

ModuleOutput EncapModule::forward(const Tensor& u, bool training) const {
  ModuleOutput out;
  auto x = type1.forward(u, training);
  if (projection) {
    auto p = projection->forward(u);
    if (p.shape() != x.shape())
      throw ConfigError("Type I skip projection " + shape_str(p.shape()) + " vs output " +
                        shape_str(x.shape()));
    x = x + p;
  }
  out.type1_out = x;
  const bool skip2 = spec_.skip == SkipMode::type_II || spec_.skip == SkipMode::both;
  for (const auto& layer : type2) {
    auto y = layer.forward(x, training);
    x = skip2 ? y + x : y;
  }
  out.out = x;
  return out;
}

void EncapModule::collect(ParamList& out, const std::string& prefix) const {
  type1.collect(out, prefix + ".type1");
  for (std::size_t n = 0; n < type2.size(); ++n)
    type2[n].collect(out, prefix + ".type2_" + std::to_string(n));
  if (projection) projection->collect(out, prefix + ".skip_proj");
}

}  // namespace encap
