#include <doctest.h>

#include "encap/capconv.hpp"
#include "encap/capsule.hpp"
#include "encap/gradcheck.hpp"
#include "test_support.hpp"

using namespace encap;
using testing_support::max_abs_diff;
using testing_support::randn;

namespace {

CapConvSpec small_spec(Interaction inter, CapConvType type = CapConvType::I) {
  CapConvSpec s;
  s.channels = 3;
  s.in_dim = 2;
  s.out_dim = type == CapConvType::I ? 4 : 2;
  s.type = type;
  s.interaction = inter;
  return s;
}

// Zeroes capsule channel c (d components) of a grid.
Tensor zero_channel(const Tensor& u, std::int64_t c, std::int64_t d) {
  auto out = u.clone();
  const auto B = u.size(0), H = u.size(2), W = u.size(3);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t k = 0; k < d; ++k)
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) out.set({b, c * d + k, y, x}, 0.0);
  return out;
}

Tensor channel_slice(const Tensor& t, std::int64_t c, std::int64_t d) { return narrow(t, 1, c * d, d); }

}  // namespace

TEST_CASE("capConv layer string parsing and validation") {
  CHECK(parse_interaction("v3") == Interaction::v3);
  CHECK(parse_interaction("master_only") == Interaction::master_only);
  CHECK_THROWS_AS(parse_interaction("v4"), ConfigError);
  CHECK_THROWS_AS(parse_skip_mode("sideways"), ConfigError);
  CHECK(parse_skip_mode("both") == SkipMode::both);
  auto s = small_spec(Interaction::v3, CapConvType::II);
  s.out_dim = 3;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = small_spec(Interaction::v3, CapConvType::II);
  s.stride = 2;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK(small_spec(Interaction::v3).master_kernel() == 3);
  CHECK(small_spec(Interaction::v3, CapConvType::II).master_kernel() == 1);
}

TEST_CASE("master branch with identity kernels is the identity") {
  Rng rng(1);
  auto spec = small_spec(Interaction::master_only, CapConvType::II);
  CapConvLayer layer(spec, rng, DType::f64);
  layer.master.weight = Tensor::zeros(layer.master.weight.shape());
  for (std::int64_t o = 0; o < 6; ++o) layer.master.weight.set({o, o % 2, 0, 0}, 1.0);
  auto u = randn(rng, {2, 6, 4, 4});
  CHECK(max_abs_diff(layer.branches(u).master, u) == 0.0);
}

TEST_CASE("master output channel depends only on its own input channel") {
  Rng rng(2);
  CapConvLayer layer(small_spec(Interaction::v3), rng, DType::f64);
  auto u = randn(rng, {2, 6, 5, 5});
  const auto base = layer.branches(u).master;
  for (std::int64_t g = 0; g < 3; ++g)
    for (std::int64_t other = 0; other < 3; ++other) {
      if (other == g) continue;
      auto changed = layer.branches(zero_channel(u, other, 2)).master;
      CHECK(max_abs_diff(channel_slice(changed, g, 4), channel_slice(base, g, 4)) == 0.0);
    }
}

TEST_CASE("master branch equals the grouped convolution") {
  Rng rng(3);
  CapConvLayer layer(small_spec(Interaction::v1), rng, DType::f64);
  auto u = randn(rng, {2, 6, 5, 5});
  auto ref = conv2d(u, layer.master.weight, {.stride = 1, .pad = 1, .groups = 3});
  CHECK(max_abs_diff(layer.branches(u).master, ref) == 0.0);
}

TEST_CASE("aide branch ignores the same-index channel") {
  Rng rng(4);
  CapConvLayer layer(small_spec(Interaction::v3), rng, DType::f64);
  auto u = randn(rng, {2, 6, 5, 5});
  const auto base = layer.branches(u).aide;
  for (std::int64_t g = 0; g < 3; ++g) {
    auto changed = layer.branches(zero_channel(u, g, 2)).aide;
    CHECK(max_abs_diff(channel_slice(changed, g, 4), channel_slice(base, g, 4)) == 0.0);
  }
}

TEST_CASE("aide branch equals a masked full convolution") {
  Rng rng(5);
  auto spec = small_spec(Interaction::v3);
  spec.aide_kernel = 3;
  CapConvLayer layer(spec, rng, DType::f64);
  // Perturb the stored weight so the built-in mask has to do the work.
  layer.aide.weight = randn(rng, layer.aide.weight.shape());
  auto w = layer.aide.weight.clone();
  for (std::int64_t o = 0; o < 12; ++o)
    for (std::int64_t i = 0; i < 6; ++i)
      if (o / 4 == i / 2)
        for (std::int64_t y = 0; y < 3; ++y)
          for (std::int64_t x = 0; x < 3; ++x) w.set({o, i, y, x}, 0.0);
  auto u = randn(rng, {2, 6, 5, 5});
  auto ref = conv2d(u, w, {.stride = 1, .pad = 1, .groups = 1});
  CHECK(max_abs_diff(layer.branches(u).aide, ref) == 0.0);
}

TEST_CASE("single capsule channel has an empty aide") {
  Rng rng(6);
  CapConvSpec s{.channels = 1, .in_dim = 2, .out_dim = 3, .type = CapConvType::I};
  CapConvLayer layer(s, rng, DType::f64);
  auto br = layer.branches(randn(rng, {2, 2, 4, 4}));
  for (double x : br.aide.to_vector()) CHECK(x == 0.0);
  CHECK(master_aide_partition_holds(layer));
}

TEST_CASE("zero coefficient weights give m1 = m2 = 0.5") {
  Rng rng(7);
  for (auto inter : {Interaction::v1, Interaction::v2, Interaction::v3}) {
    CapConvLayer layer(small_spec(inter), rng, DType::f64);
    for (Conv2d* c : {&layer.coef_a, &layer.coef_b}) {
      if (!c->weight.defined()) continue;
      c->weight = Tensor::zeros(c->weight.shape());
      c->bias = Tensor::zeros(c->bias.shape());
    }
    auto br = layer.branches(randn(rng, {2, 6, 4, 4}));
    CHECK(br.m1.shape() == Shape{2, 3, 1, 16});
    for (double x : br.m1.to_vector()) CHECK(x == 0.5);
    for (double x : br.m2.to_vector()) CHECK(x == 0.5);
  }
}

TEST_CASE("master-only layer has no aide and unit master weight") {
  Rng rng(8);
  CapConvLayer layer(small_spec(Interaction::master_only), rng, DType::f64);
  auto u = randn(rng, {2, 6, 4, 4});
  auto br = layer.branches(u);
  CHECK(!br.aide.defined());
  CHECK(max_abs_diff(layer.combine(br), br.master) == 0.0);
}

TEST_CASE("v3 coefficients follow a batch permutation") {
  Rng rng(9);
  CapConvLayer layer(small_spec(Interaction::v3), rng, DType::f64);
  auto u = randn(rng, {4, 6, 4, 4});
  auto perm = concat({narrow(u, 0, 2, 1), narrow(u, 0, 0, 1), narrow(u, 0, 3, 1), narrow(u, 0, 1, 1)}, 0);
  auto a = layer.branches(u), b = layer.branches(perm);
  const std::int64_t order[] = {2, 0, 3, 1};
  for (std::int64_t k = 0; k < 4; ++k) {
    CHECK(max_abs_diff(narrow(b.m1, 0, k, 1), narrow(a.m1, 0, order[k], 1)) == 0.0);
    CHECK(max_abs_diff(narrow(b.m2, 0, k, 1), narrow(a.m2, 0, order[k], 1)) == 0.0);
  }
}

TEST_CASE("master-only layer with identity master is squash(relu(bn(u)))") {
  Rng rng(10);
  CapConvLayer layer(small_spec(Interaction::master_only, CapConvType::II), rng, DType::f64);
  layer.master.weight = Tensor::zeros(layer.master.weight.shape());
  for (std::int64_t o = 0; o < 6; ++o) layer.master.weight.set({o, o % 2, 0, 0}, 1.0);
  auto u = randn(rng, {3, 6, 4, 4});
  BatchNorm ref_bn = BatchNorm::make(6, DType::f64);
  auto ref = squash_grid(relu(ref_bn.forward(u, true)), 2);
  CHECK(max_abs_diff(layer.forward(u, true), ref) == 0.0);
}

TEST_CASE("silenced aide reduces to the master-only layer") {
  Rng rng(11);
  auto spec = small_spec(Interaction::v3);
  CapConvLayer full(spec, rng, DType::f64);
  auto mspec = spec;
  mspec.interaction = Interaction::master_only;
  CapConvLayer plain(mspec, rng, DType::f64);
  plain.master.weight = full.master.weight;
  full.aide.weight = Tensor::zeros(full.aide.weight.shape());
  full.coef_a.weight = Tensor::zeros(full.coef_a.weight.shape());
  std::vector<double> bias;
  for (std::int64_t c = 0; c < 3; ++c) {
    bias.push_back(40.0);   // m1 -> 1
    bias.push_back(-40.0);  // m2 -> 0
  }
  full.coef_a.bias = Tensor::from(bias, {6});
  auto u = randn(rng, {2, 6, 4, 4});
  CHECK(max_abs_diff(full.forward(u, true), plain.forward(u, true)) == 0.0);
}

TEST_CASE("capConv output norms stay below one") {
  Rng rng(12);
  CapConvLayer layer(small_spec(Interaction::v3), rng, DType::f64);
  auto out = layer.forward(randn(rng, {2, 6, 4, 4}, 3.0), true);
  for (double n : capsule_norms(grid_to_capsules(out, 4)).to_vector()) CHECK(n < 1.0);
}

TEST_CASE("stride-2 Type I halves the grid") {
  Rng rng(13);
  auto spec = small_spec(Interaction::v3);
  spec.stride = 2;
  CapConvLayer layer(spec, rng, DType::f64);
  CHECK(layer.forward(randn(rng, {2, 6, 8, 8}), true).shape() == Shape{2, 12, 4, 4});
}

TEST_CASE("channel partition holds for every variant") {
  Rng rng(14);
  for (auto inter : {Interaction::master_only, Interaction::v1, Interaction::v2, Interaction::v3})
    for (auto type : {CapConvType::I, CapConvType::II}) {
      CapConvLayer layer(small_spec(inter, type), rng, DType::f32);
      CHECK(master_aide_partition_holds(layer));
    }
  auto s = small_spec(Interaction::v3);
  s.aide = AideMode::include;
  CapConvLayer overlapping(s, rng, DType::f32);
  CHECK_FALSE(master_aide_partition_holds(overlapping));
}

TEST_CASE("capConv layer gradient with BN, ReLU and squash") {
  Rng rng(15);
  for (auto inter : {Interaction::v1, Interaction::v2, Interaction::v3}) {
    auto spec = small_spec(inter);
    spec.aide_kernel = 3;
    CapConvLayer layer(spec, rng, DType::f64);
    auto u = randn(rng, {2, 6, 4, 4});
    auto w = randn(rng, {2, 12, 4, 4});
    std::vector<Tensor> params{u, layer.master.weight, layer.aide.weight, layer.coef_a.weight,
                               layer.coef_a.bias, layer.bn.gamma, layer.bn.beta};
    std::vector<std::string> names{"u", "master", "aide", "coef_a.w", "coef_a.b", "gamma", "beta"};
    if (layer.coef_b.weight.defined()) {
      params.push_back(layer.coef_b.weight);
      names.push_back("coef_b.w");
    }
    auto r = gradcheck([&] { return sum(layer.forward(u, true) * w); }, params, names);
    INFO(to_string(inter), " worst ", r.worst);
    CHECK(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("module depth bookkeeping") {
  Rng rng(16);
  std::int64_t depth = 2;
  for (int m = 0; m < 4; ++m) {
    EncapModule mod({.channels = 2, .in_dim = 2, .out_dim = 2, .stride = 1, .type2_count = 3}, rng,
                    DType::f32);
    depth += mod.depth();
  }
  CHECK(depth == 18);
}

TEST_CASE("module without skips is a plain cascade") {
  Rng rng(17);
  EncapModule mod({.channels = 2, .in_dim = 2, .out_dim = 3, .stride = 2, .type2_count = 2}, rng,
                  DType::f64);
  auto u = randn(rng, {2, 4, 8, 8});
  auto out = mod.forward(u, true);
  CHECK(out.out.shape() == Shape{2, 6, 4, 4});
  auto ref = mod.type2[1].forward(mod.type2[0].forward(mod.type1.forward(u, true), true), true);
  CHECK(max_abs_diff(out.out, ref) == 0.0);
}

TEST_CASE("zeroed Type II residual passes the projected input through") {
  Rng rng(18);
  EncapModule mod({.channels = 2, .in_dim = 2, .out_dim = 3, .stride = 2, .type2_count = 2,
                   .skip = SkipMode::both},
                  rng, DType::f64);
  for (auto& layer : mod.type2) {
    layer.master.weight = Tensor::zeros(layer.master.weight.shape());
    layer.aide.weight = Tensor::zeros(layer.aide.weight.shape());
  }
  auto u = randn(rng, {2, 4, 8, 8});
  auto out = mod.forward(u, true);
  auto ref = mod.type1.forward(u, true) + mod.projection->forward(u);
  CHECK(max_abs_diff(out.type1_out, ref) == 0.0);
  CHECK(max_abs_diff(out.out, ref) == 0.0);
}
