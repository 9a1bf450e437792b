#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "encap/grad_suite.hpp"
#include "encap/train.hpp"
#include "test_support.hpp"

using namespace encap;
namespace fs = std::filesystem;

namespace {

std::string config_dir() {
  const char* d = std::getenv("ENCAP_CONFIG_DIR");
  return d ? d : "configs";
}

const char* kTiny =
    "[network]\nfamily = encapnet\nin_channels = 1\nin_size = 12\nn_classes = 4\ndtype = f64\n"
    "caps_channels = 2\ncaps_dim = 4\nclass_dim = 4\n"
    "[stem]\nlayers = 4:3:1:1 8:3:2:1\n"
    "[module1]\nout_dim = 4\nstride = 1\not = A\n"
    "[regularizer]\nkind = none\neps = 0.5\niters = 10\n"
    "[train]\nlr = 0.01\nmax_epoch = 3\nbatch = 10\naugment = false\nseed = 5\n";

Dataset tiny_data(std::uint64_t seed, int per_class = 10) {
  SyntheticSpec s;
  s.n_classes = 4;
  s.per_class = per_class;
  s.size = 12;
  s.seed = seed;
  return synth_generate(s);
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "encap_test_model";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

TEST_CASE("total loss composition") {
  auto v = Tensor::from({0.95, 0.05, 0.0, 0.0, 0.0, 0.0, 0.05, 0.95}, {2, 2, 2});
  const std::vector<int> labels{0, 1};
  const auto margin = margin_loss(v, labels);
  CHECK(margin.item() == 0.0);
  CHECK(total_loss(v, labels, {Tensor::scalar(0.5)}, 0.0).item() == margin.item());
  const auto t = total_loss(Tensor::scalar(0.0), {Tensor::scalar(0.1), Tensor::scalar(0.2)}, 10.0);
  CHECK(t.item() == doctest::Approx(3.0).epsilon(1e-12));
  // Modules without a transport unit contribute nothing.
  CHECK(total_loss(Tensor::scalar(0.25), {Tensor{}, Tensor::scalar(0.1)}, 10.0).item() ==
        doctest::Approx(1.25).epsilon(1e-12));
}

TEST_CASE("Adam with zero gradient applies only weight decay") {
  auto p = Tensor::from({1.0, -2.0, 0.5}, {3});
  p.set_requires_grad(true);
  Adam opt({p}, {.weight_decay = 0.1});
  opt.step(0.01);
  const auto v = p.to_vector();
  CHECK(v[0] == doctest::Approx(1.0 - 0.01 * 0.1 * 1.0).epsilon(1e-15));
  CHECK(v[1] == doctest::Approx(-2.0 + 0.01 * 0.1 * 2.0).epsilon(1e-15));
  CHECK(v[2] == doctest::Approx(0.5 - 0.01 * 0.1 * 0.5).epsilon(1e-15));
}

TEST_CASE("Adam under a constant gradient moves by lr per step") {
  auto p = Tensor::from({0.0, 0.0}, {2});
  p.set_requires_grad(true);
  Adam opt({p}, {.weight_decay = 0.0});
  const double lr = 1e-3;
  std::vector<double> prev = p.to_vector();
  for (int step = 0; step < 200; ++step) {
    sum(p * Tensor::from({3.0, -0.25}, {2})).backward();
    opt.step(lr);
    const auto cur = p.to_vector();
    // Bias-corrected moments equal g and g^2 exactly, so each step is lr * g / (|g| + eps).
    CHECK(cur[0] - prev[0] == doctest::Approx(-lr * 3.0 / (3.0 + 1e-8)).epsilon(1e-9));
    CHECK(cur[1] - prev[1] == doctest::Approx(lr * 0.25 / (0.25 + 1e-8)).epsilon(1e-9));
    prev = cur;
  }
  CHECK(opt.steps() == 200);
}

TEST_CASE("Adam minimises a scalar quadratic within 500 steps") {
  auto p = Tensor::from({-4.0}, {1});
  p.set_requires_grad(true);
  Adam opt({p}, {.weight_decay = 0.0});
  for (int step = 0; step < 500; ++step) {
    square(p - 3.0).backward();
    opt.step(step < 300 ? 0.1 : 0.01);
  }
  CHECK(std::abs(p.item() - 3.0) < 1e-2);
}

TEST_CASE("scaled schedule") {
  TrainConfig t;
  t.lr = 1e-3;
  const auto s = make_schedule(t, 1.0 / 30);
  CHECK(s.epochs == 20);
  CHECK(s.milestones == std::vector<std::int64_t>{7, 10, 13});
  CHECK(s.lr_at(0) == 1e-3);
  CHECK(s.lr_at(7) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.lr_at(19) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(make_schedule(t, 1.0).epochs == 600);
  const auto one = make_schedule(t, 1.0 / 600);
  CHECK(one.epochs == 1);
  CHECK(one.lr_at(0) == 1e-3);
  CHECK_THROWS_AS(make_schedule(t, 0.0), ConfigError);
}

TEST_CASE("config parsing and overrides") {
  const auto cfg = parse_config(kTiny);
  CHECK(cfg.family == Family::encapnet);
  CHECK(cfg.stem.size() == 2);
  CHECK(cfg.stem[1].stride == 2);
  CHECK(cfg.modules.size() == 1);
  CHECK(cfg.modules[0].ot_a);
  CHECK_FALSE(cfg.modules[0].ot_b);
  CHECK(cfg.train.batch == 10);
  CHECK(cfg.train.weight_decay == 5e-4);
  const auto o = override_config(cfg, {"regularizer.kind=ot", "train.seed=9"});
  CHECK(o.reg.kind == Regularizer::ot);
  CHECK(o.train.seed == 9);
  CHECK(parse_config(o.text).reg.kind == Regularizer::ot);
  CHECK_THROWS_AS(override_config(cfg, {"nokey"}), ConfigError);
  CHECK_THROWS_AS(parse_config("[network]\nfamily = transformer\n[stem]\nlayers = 4:3:1:1\n"),
                  ConfigError);
  CHECK_THROWS_AS(parse_config("[network]\nfamily = encapnet\n"), ConfigError);
  CHECK_THROWS_AS(parse_config(std::string(kTiny) + "[module2]\nstride = 2\n"), ConfigError);
  CHECK_THROWS_AS(override_config(cfg, {"train.batch=0"}), ConfigError);
  CHECK_THROWS_AS(override_config(cfg, {"regularizer.lambda=-1"}), ConfigError);
}

TEST_CASE("inconsistent capsule shapes are rejected") {
  const auto cfg = parse_config(kTiny);
  CHECK_NOTHROW(Network::build(cfg, 0));
  CHECK_THROWS_AS(Network::build(override_config(cfg, {"network.caps_dim=3"}), 0), ConfigError);
  CHECK_THROWS_AS(Network::build(override_config(cfg, {"network.class_dim=8"}), 0), ConfigError);
  // OT-B needs Type II layers behind the skip source.
  CHECK_THROWS_AS(Network::build(override_config(cfg, {"module1.ot=B"}), 0), ConfigError);
  // A stride-2 module on a 7x7 grid cannot be generated back by a stride-2 deconvolution.
  auto odd = parse_config(
      "[network]\nfamily = encapnet\nin_size = 7\ncaps_channels = 2\ncaps_dim = 4\nclass_dim = 4\n"
      "[stem]\nlayers = 8:3:1:1\n[module1]\nout_dim = 4\nstride = 2\not = A\n");
  CHECK_THROWS_AS(Network::build(odd, 0), ConfigError);
  odd = override_config(odd, {"module1.ot=none"});
  CHECK_NOTHROW(Network::build(odd, 0));
}

TEST_CASE("depth formulas hold for every shipped config") {
  int seen = 0;
  for (const auto& entry : fs::directory_iterator(config_dir())) {
    if (entry.path().extension() != ".ini") continue;
    const auto cfg = load_config(entry.path().string());
    const auto net = Network::build(cfg, 0);
    INFO(entry.path().filename().string());
    CHECK(net.depth() == Network::depth_formula(cfg));
    for (const auto* layer : net.capconv_layers()) CHECK(master_aide_partition_holds(*layer));
    ++seen;
  }
  CHECK(seen >= 6);
  const auto v1 = Network::build(load_config(config_dir() + "/encapnet_v1.ini"), 0);
  CHECK(v1.depth() == 18);
  const auto rn = Network::build(load_config(config_dir() + "/resnet18.ini"), 0);
  CHECK(rn.depth() == 18);
}

TEST_CASE("depth formula across generated module stacks") {
  for (int modules = 1; modules <= 3; ++modules)
    for (int n = 0; n <= 3; ++n) {
      std::ostringstream os;
      os << "[network]\nfamily = encapnet\nin_size = 8\ncaps_channels = 2\ncaps_dim = 4\n"
         << "class_dim = 4\n[stem]\nlayers = 8:3:1:1\n";
      for (int m = 1; m <= modules; ++m)
        os << "[module" << m << "]\nout_dim = 4\ntype2 = " << n << "\nskip = both\not = none\n";
      const auto cfg = parse_config(os.str());
      const auto net = Network::build(cfg, 1);
      CHECK(net.depth() == 2 + modules * (n + 1));
      CHECK(net.depth() == Network::depth_formula(cfg));
    }
}

TEST_CASE("six-layer family shares stem shapes and produces 10 x 16 class capsules") {
  const auto enc = Network::build(load_config(config_dir() + "/mnist_encapnet6.ini"), 0);
  const auto van = Network::build(load_config(config_dir() + "/mnist_vanilla6.ini"), 0);
  const auto cap = Network::build(load_config(config_dir() + "/mnist_capnet6_dynamic.ini"), 0);
  CHECK(enc.depth() == 6);
  CHECK(van.depth() == 6);
  CHECK(cap.depth() == 6);
  auto shape_of = [](const Network& n, const std::string& name) {
    for (const auto& p : n.params())
      if (p.name == name) return p.tensor.shape();
    return Shape{};
  };
  for (int i = 1; i <= 3; ++i) {
    const auto name = "stem" + std::to_string(i) + ".conv.weight";
    CHECK(shape_of(enc, name) == shape_of(van, name));
    CHECK(shape_of(enc, name) == shape_of(cap, name));
  }
  // The plain fifth layer emits the same blob as the capConv layer: 4 x 16 channels on 7 x 7.
  CHECK(shape_of(van, "conv5.conv.weight")[0] == 4 * 16);
  Rng rng(3);
  auto x = testing_support::randu(rng, {2, 1, 28, 28}, 0, 1).to(DType::f32);
  NoGradGuard ng;
  CHECK(enc.forward(x, {}).class_caps.shape() == Shape{2, 10, 16});
  CHECK(cap.forward(x, {}).class_caps.shape() == Shape{2, 10, 16});
  CHECK(van.forward(x, {}).class_caps.shape() == Shape{2, 10, 1});
  const auto em = Network::build(load_config(config_dir() + "/mnist_capnet6_em.ini"), 0);
  const auto out = em.forward(x, {}).class_caps;
  CHECK(out.shape() == Shape{2, 10, 16});
  for (double n : capsule_norms(out).to_vector()) {
    CHECK(n > 0.0);
    CHECK(n < 1.0);
  }
}

TEST_CASE("parameter counts") {
  CHECK(Network().trainable_count() == 0);
  CHECK(Network().layer_table().empty());
  const auto cfg = parse_config(kTiny);
  const auto net = Network::build(cfg, 0);
  std::int64_t sum_rows = 0;
  for (const auto& r : net.layer_table()) sum_rows += r.params;
  CHECK(sum_rows == net.trainable_count());
  std::int64_t direct = 0, masks = 0;
  for (const auto& p : net.params()) {
    if (p.trainable) direct += p.tensor.numel();
    if (p.name.find("mask") != std::string::npos) {
      CHECK_FALSE(p.trainable);
      ++masks;
    }
  }
  CHECK(direct == net.trainable_count());
  CHECK(masks == 1);
}

TEST_CASE("complexity of the CapNet comparison shape") {
  const auto net = Network::build(load_config(config_dir() + "/capnet_table1.ini"), 0);
  const auto r = capnet_complexity(net.capnet_hidden_shape(), net.capnet_grid_size());
  CHECK(r.kernel_channels == 1048576);
  CHECK(r.capnet_mapping == 8388608);
  CHECK(r.capnet_routing == 4194304);
  CHECK(r.mapping_factor() == 1024);
  CHECK(r.routing_factor() == 256);
  const auto n2 = net.capnet_hidden_shape().out_caps;
  CHECK(r.mapping_factor() == n2 / 2);
  const auto S = net.capnet_grid_size();
  CHECK(r.routing_factor() == S * S * S * S / net.capnet_hidden_shape().out_dim);

  const auto from_cfg = capnet_complexity(net.config());
  CHECK(from_cfg.capnet_mapping == r.capnet_mapping);
  CHECK(from_cfg.master_aide_mapping == r.master_aide_mapping);
  CHECK(from_cfg.capnet_routing == r.capnet_routing);
  CHECK(from_cfg.master_aide_routing == r.master_aide_routing);
  CHECK_THROWS_AS(capnet_complexity(load_config(config_dir() + "/encapnet_v1.ini")), ConfigError);
}

TEST_CASE("error rate and evaluation") {
  CHECK(error_rate({0, 1, 2, 3}, {0, 1, 2, 3}) == 0.0);
  const std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const double e = error_rate(std::vector<int>(10, 4), labels);
  CHECK(e == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(e + (1 - e) == 1.0);

  // A plain CNN whose classifier ignores its input and always scores class 2.
  auto cfg = parse_config(
      "[network]\nfamily = vanilla_cnn\nin_size = 12\nn_classes = 4\ndtype = f64\n"
      "vanilla_channels = 4\n[stem]\nlayers = 4:3:1:1\n");
  auto net = Network::build(cfg, 0);
  for (auto& p : net.params()) {
    if (p.name == "fc.weight") p.tensor.assign(std::vector<double>(p.tensor.numel(), 0.0));
    if (p.name == "fc.bias") p.tensor.assign({-5.0, -5.0, 5.0, -5.0});
  }
  const auto ds = tiny_data(1);
  const auto r = evaluate(net, ds, 7);
  CHECK(r.samples == 40);
  CHECK(r.error == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("evaluation is pure") {
  const auto net = Network::build(parse_config(kTiny), 2);
  const auto ds = tiny_data(2);
  const auto a = evaluate(net, ds, 16);
  const auto b = evaluate(net, ds, 16);
  CHECK(a.error == b.error);
  CHECK(a.margin == b.margin);
}

TEST_CASE("zero learning rate leaves the epoch loss unchanged") {
  auto cfg = override_config(parse_config(kTiny), {"train.lr=0", "train.batch=40"});
  auto net = Network::build(cfg, 3);
  const auto ds = tiny_data(3);
  const auto s = train(net, ds, ds, {});
  double first = 0;
  for (const auto& row : s.rows) {
    if (row.split != "train") continue;
    if (row.epoch == 0) first = row.loss;
    // One full batch per epoch: only the order of summation inside BN differs.
    CHECK(row.loss == doctest::Approx(first).epsilon(1e-12));
  }
}

TEST_CASE("metrics schema and offline loss recomputation") {
  const auto ds = tiny_data(4);
  for (const bool reg : {false, true}) {
    auto cfg = parse_config(kTiny);
    if (reg) cfg = override_config(cfg, {"regularizer.kind=ot"});
    auto net = Network::build(cfg, 4);
    const auto csv = scratch(reg ? "reg.csv" : "plain.csv");
    TrainOptions opts;
    opts.metrics_out = csv.string();
    train(net, ds, ds, opts);
    const auto lines = read_lines(csv);
    REQUIRE(lines.size() == 1 + 2 * 3);
    CHECK(lines[0] == "epoch,split,loss,error,ot_m1,ot_m2,ot_m3,ot_m4,lr,wallclock,margin");
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto f = split_csv(lines[i]);
      REQUIRE(f.size() == 11);
      const bool train_row = f[1] == "train";
      if (!reg || !train_row) {
        CHECK(f[4].empty());
        continue;
      }
      CHECK_FALSE(f[4].empty());
      CHECK(f[5].empty());
      const double loss = std::stod(f[2]), ot = std::stod(f[4]), margin = std::stod(f[10]);
      CHECK(std::abs(loss - (margin + cfg.reg.lambda * ot)) < 1e-9);
    }
  }
}

TEST_CASE("seed-identical runs reproduce epoch metrics") {
  const auto ds = tiny_data(5);
  auto cfg = override_config(parse_config(kTiny), {"train.augment=true", "regularizer.kind=ot"});
  std::vector<MetricsRow> rows[2];
  for (auto& r : rows) {
    auto net = Network::build(cfg, cfg.train.seed);
    r = train(net, ds, ds, {}).rows;
  }
  REQUIRE(rows[0].size() == rows[1].size());
  for (std::size_t i = 0; i < rows[0].size(); ++i) {
    auto a = rows[0][i], b = rows[1][i];
    a.wallclock = b.wallclock = 0;
    CHECK(metrics_line(a, 4) == metrics_line(b, 4));
  }
}

TEST_CASE("checkpoint round trip") {
  const auto ds = tiny_data(6);
  auto cfg = parse_config(kTiny);
  auto net = Network::build(cfg, 6);
  const auto dir = scratch("snapshots");
  TrainOptions opts;
  opts.snapshot_dir = dir.string();
  opts.checkpoint_out = scratch("best.ckpt").string();
  train(net, ds, ds, opts);
  CHECK(fs::exists(dir / "init.ckpt"));
  CHECK(fs::exists(dir / "epoch_2.ckpt"));

  const auto path = dir / "epoch_2.ckpt";
  const auto ck = load_checkpoint(path.string());
  CHECK(ck.meta.epoch == 2);
  const auto a = net.params(), b = ck.net.params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].tensor.to_vector() == b[i].tensor.to_vector());
  }
  CHECK(evaluate(ck.net, ds).error == evaluate(net, ds).error);
  CHECK(evaluate(ck.net, ds).margin == evaluate(net, ds).margin);

  // Corrupt copies.
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto bad = scratch("bad.ckpt");
  {
    std::ofstream out(bad, std::ios::binary);
    auto b2 = bytes;
    b2[0] = 'X';
    out << b2;
  }
  CHECK_THROWS_AS(load_checkpoint(bad.string()), FormatError);
  {
    std::ofstream out(bad, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 3);
  }
  CHECK_THROWS_AS(load_checkpoint(bad.string()), LengthError);
}

TEST_CASE("non-finite loss aborts with the first offending op") {
  auto net = Network::build(parse_config(kTiny), 7);
  for (auto& p : net.params())
    if (p.name == "capfc.weight") p.tensor.set({0, 0, 0}, std::nan(""));
  const auto ds = tiny_data(7);
  try {
    train(net, ds, ds, {});
    FAIL("training should have aborted");
  } catch (const NumericError& e) {
    CHECK(e.op() == "bmm");  // the capFC product is the first op to see the NaN weight
  }
}

TEST_CASE("two-module toy network passes the total-loss gradient check") {
  const auto r = run_gradient_suite("toy_net_total_loss");
  REQUIRE(r.size() == 1);
  CHECK(r[0].rel_err < 1e-4);
  CHECK_THROWS_AS(run_gradient_suite("nope"), ConfigError);
}
