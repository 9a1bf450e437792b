#include "encap/grad_suite.hpp"

#include <chrono>
#include <cmath>
#include <functional>

#include "encap/gradcheck.hpp"
#include "encap/model.hpp"

namespace encap {

namespace {

Tensor randn(Rng& rng, const Shape& shape, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(v), shape);
}

Tensor randu(Rng& rng, const Shape& shape, double lo, double hi) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(v), shape);
}

GradcheckReport check_squash() {
  Rng rng(101);
  auto x = randn(rng, {3, 5});
  auto w = randn(rng, {3, 5});
  return gradcheck([&] { return sum(squash(x, 1) * w); }, {x}, {"x"});
}

GradcheckReport check_capfc() {
  Rng rng(102);
  auto in = randn(rng, {2, 6, 4}, 0.5);
  auto w = randn(rng, {4, 6, 3}, 0.5);
  auto m = randn(rng, {2, 3, 4});
  return gradcheck([&] { return sum(capfc(in, w) * m); }, {in, w}, {"in", "w"});
}

GradcheckReport check_margin() {
  Rng rng(103);
  auto v = randn(rng, {3, 5, 4}, 0.3);
  return gradcheck([&] { return margin_loss(v, {0, 3, 4}); }, {v}, {"v"});
}

GradcheckReport check_capconv() {
  Rng rng(104);
  CapConvSpec spec;
  spec.channels = 3;
  spec.in_dim = 2;
  spec.out_dim = 4;
  spec.aide_kernel = 3;
  CapConvLayer layer(spec, rng, DType::f64);
  auto u = randn(rng, {2, 6, 4, 4});
  auto w = randn(rng, {2, 12, 4, 4});
  return gradcheck([&] { return sum(layer.forward(u, true) * w); },
                   {u, layer.master.weight, layer.aide.weight, layer.coef_a.weight,
                    layer.coef_a.bias, layer.bn.gamma, layer.bn.beta},
                   {"u", "master", "aide", "coef.w", "coef.b", "gamma", "beta"});
}

GradcheckReport check_dynamic() {
  Rng rng(105);
  auto vh = randn(rng, {2, 4, 3, 3});
  auto w = randn(rng, {2, 3, 3});
  return gradcheck([&] { return sum(dynamic_routing(vh, {.iterations = 3}) * w); }, {vh},
                   {"v_hat"});
}

GradcheckReport check_em() {
  Rng rng(106);
  auto vh = randn(rng, {2, 4, 3, 2});
  auto a_in = randu(rng, {2, 4}, 0.2, 0.9);
  auto bv = randn(rng, {3}, 0.1);
  auto ba = randn(rng, {3}, 0.1);
  auto wm = randn(rng, {2, 3, 2});
  auto wa = randn(rng, {2, 3});
  return gradcheck(
      [&] {
        auto out = em_routing(vh, a_in, bv, ba, {.iterations = 3});
        return sum(out.mean * wm) + sum(out.activation * wa);
      },
      {vh, a_in, bv, ba}, {"v_hat", "a_in", "beta_v", "beta_a"});
}

GradcheckReport check_generator() {
  Rng rng(107);
  auto g = Generator::make(rng, 2, 3, 2, 3, 2, DType::f64);
  auto v = randn(rng, {2, 6, 3, 3});
  auto w = randn(rng, {2, 6, 6, 6});
  return gradcheck([&] { return sum(g.forward(v, true) * w); },
                   {v, g.deconv.weight, g.bn.gamma, g.bn.beta}, {"v", "deconv", "gamma", "beta"});
}

GradcheckReport check_extractor() {
  Rng rng(108);
  auto e = Extractor::make(rng, 8, DType::f64);
  auto x = randn(rng, {3, 8, 8, 8});
  auto w = randn(rng, {3, 4});
  return gradcheck([&] { return sum(e.forward(x, true) * w); },
                   {x, e.first.conv.weight, e.second.conv.weight, e.first.bn.gamma,
                    e.second.bn.beta},
                   {"x", "conv1", "conv2", "gamma1", "beta2"});
}

// The stop-gradient path returns the coupling P as dL/dQ. P is the exact
// derivative of the converged entropic objective <Q,P> + eps sum P log P, so
// that objective is the finite-difference reference.
GradcheckReport check_ot_stop_gradient() {
  Rng rng(109);
  const std::int64_t n = 4;
  const double eps = 0.5, h = 1e-5;
  const int iters = 400;
  std::vector<double> q(static_cast<std::size_t>(n * n));
  for (auto& x : q) x = rng.uniform(0.0, 2.0);
  auto Q = Tensor::from(q, {n, n});
  Q.set_requires_grad(true);
  ot_loss(Q, {.eps = eps, .iters = iters}).backward();
  const auto g = Q.grad().to_vector();
  auto objective = [&](const std::vector<double>& qq) {
    const auto c = sinkhorn(qq, n, n, eps, iters);
    double s = 0;
    for (std::size_t i = 0; i < qq.size(); ++i) s += qq[i] * c.P[i] + eps * c.P[i] * std::log(c.P[i]);
    return s;
  };
  double num = 0, gn = 0, fn = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    auto qp = q, qm = q;
    qp[i] += h;
    qm[i] -= h;
    const double fd = (objective(qp) - objective(qm)) / (2 * h);
    num += (fd - g[i]) * (fd - g[i]);
    gn += g[i] * g[i];
    fn += fd * fd;
  }
  GradcheckReport r;
  r.max_rel_err = std::sqrt(num) / std::max(std::sqrt(gn), std::sqrt(fn));
  r.worst = "Q";
  return r;
}

// Two EncapNet modules with both transport units, margin + lambda * OT.
// The finite-difference reference needs a loss whose backward is its true
// derivative, so the transport plan is differentiated through its iterates.
GradcheckReport check_toy_net() {
  const std::string text =
      "[network]\nfamily = encapnet\nin_channels = 1\nin_size = 6\nn_classes = 3\ndtype = f64\n"
      "caps_channels = 2\ncaps_dim = 4\nclass_dim = 4\n"
      "[stem]\nlayers = 8:3:1:1\n"
      "[module1]\nout_dim = 4\nstride = 1\ntype2 = 1\nskip = both\not = A+B\n"
      "[module2]\nout_dim = 4\nstride = 2\not = A\n"
      "[regularizer]\nkind = ot\nlambda = 10\neps = 0.5\niters = 5\nstop_gradient = false\n";
  const auto cfg = parse_config(text);
  const auto net = Network::build(cfg, 110);
  Rng rng(111);
  auto x = randu(rng, {4, 1, 6, 6}, 0.0, 1.0);
  const std::vector<int> labels{0, 1, 2, 1};
  std::vector<Tensor> params;
  std::vector<std::string> names;
  for (const auto& p : net.params())
    if (p.trainable) {
      params.push_back(p.tensor);
      names.push_back(p.name);
    }
  GradcheckOptions opts;
  opts.max_probes = 12;
  return gradcheck(
      [&] {
        auto fr = net.forward(x, {.training = true, .regularize = true});
        return total_loss(fr.class_caps, labels, fr.module_ot, cfg.reg.lambda, cfg.margin);
      },
      params, names, opts);
}

struct Entry {
  const char* name;
  std::function<GradcheckReport()> run;
};

const std::vector<Entry>& entries() {
  static const std::vector<Entry> all{
      {"squash", check_squash},
      {"capfc", check_capfc},
      {"margin", check_margin},
      {"capconv", check_capconv},
      {"dynamic_routing", check_dynamic},
      {"em_routing", check_em},
      {"generator", check_generator},
      {"extractor", check_extractor},
      {"ot_loss_stop_gradient", check_ot_stop_gradient},
      {"toy_net_total_loss", check_toy_net},
  };
  return all;
}

}  // namespace

std::vector<std::string> gradient_suite_names() {
  std::vector<std::string> out;
  for (const auto& e : entries()) out.emplace_back(e.name);
  return out;
}

std::vector<GradSuiteResult> run_gradient_suite(const std::string& only, double tol) {
  std::vector<GradSuiteResult> out;
  for (const auto& e : entries()) {
    if (!only.empty() && only != e.name) continue;
    const auto t0 = std::chrono::steady_clock::now();
    const auto rep = e.run();
    GradSuiteResult r;
    r.name = e.name;
    r.rel_err = rep.max_rel_err;
    r.worst = rep.worst;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.ok = std::isfinite(r.rel_err) && r.rel_err < tol;
    out.push_back(r);
  }
  if (!only.empty() && out.empty()) throw ConfigError("unknown gradient check '" + only + "'");
  return out;
}

}  // namespace encap
