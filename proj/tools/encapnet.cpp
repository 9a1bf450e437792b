// Command-line front end: training, evaluation, gradient checks, transport
// benchmarks, parameter tables and routing histograms.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <malloc.h>

#include "encap/grad_suite.hpp"
#include "encap/train.hpp"

using namespace encap;

namespace {

struct DataPair {
  Dataset train, test;
};

DataPair load_data(const std::string& dir, const NetworkConfig& cfg, bool synthetic) {
  if (synthetic) {
    SyntheticSpec s;
    s.size = static_cast<int>(cfg.in_size);
    s.n_classes = static_cast<int>(cfg.n_classes);
    s.per_class = 200;
    s.seed = cfg.train.seed;
    auto train = synth_generate(s);
    s.per_class = 50;
    s.seed = cfg.train.seed + 1;
    auto test = synth_generate(s);
    return {std::move(train), std::move(test)};
  }
  return {load_mnist_split(dir, "train", cfg.train.train_limit),
          load_mnist_split(dir, "t10k", cfg.train.test_limit)};
}

int cmd_train(const std::string& config, const std::string& data_dir, std::optional<std::uint64_t> seed,
              double scale, const std::string& metrics, const std::string& checkpoint,
              const std::string& snapshots, const std::vector<std::string>& sets, bool synthetic,
              bool quiet) {
  auto sets_all = sets;
  if (seed) sets_all.push_back("train.seed=" + std::to_string(*seed));
  const auto cfg = override_config(load_config(config), sets_all);
  const auto data = load_data(data_dir, cfg, synthetic);
  auto net = Network::build(cfg, cfg.train.seed);
  TrainOptions opts;
  opts.scale = scale;
  opts.metrics_out = metrics;
  opts.checkpoint_out = checkpoint;
  opts.snapshot_dir = snapshots;
  opts.data_dir = synthetic ? "" : data_dir;
  opts.verbose = !quiet;
  const auto s = train(net, data.train, data.test, opts);
  std::printf("epochs %lld  final test error %.4f  best test error %.4f\n",
              static_cast<long long>(s.epochs), s.final_test_error, s.best_test_error);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir_override) {
  const auto ck = load_checkpoint(checkpoint);
  const auto dir = data_dir_override.empty() ? ck.meta.data_dir : data_dir_override;
  if (dir.empty()) throw InputError("checkpoint has no data directory; pass --data-dir");
  const auto test = load_mnist_split(dir, "t10k", ck.net.config().train.test_limit);
  const auto r = evaluate(ck.net, test);
  std::printf("samples %lld  error %.4f  accuracy %.4f  margin loss %.6f\n",
              static_cast<long long>(r.samples), r.error, 1.0 - r.error, r.margin);
  return 0;
}

int cmd_gradcheck(const std::string& module) {
  bool all_ok = true;
  for (const auto& r : run_gradient_suite(module)) {
    std::printf("%-24s rel_err %.3e  %-5s (%.2f s, worst %s)\n", r.name.c_str(), r.rel_err,
                r.ok ? "PASS" : "FAIL", r.seconds, r.worst.c_str());
    all_ok = all_ok && r.ok;
  }
  return all_ok ? 0 : 1;
}

int cmd_ot_bench(std::int64_t n, double eps, int iters, int trials, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> q(static_cast<std::size_t>(n * n));
    for (auto& x : q) x = rng.uniform(0.0, 1.0);
    auto Q = Tensor::from(q, {n, n});
    const double ot = ot_loss(Q, {.eps = eps, .iters = iters}).item();
    const double bf = brute_force_ot(q, n);
    const auto c = sinkhorn(q, n, n, eps, iters);
    double dr = 0, dc = 0;
    for (double s : c.row_sums()) dr = std::max(dr, std::abs(s - 1.0 / n));
    for (double s : c.col_sums()) dc = std::max(dc, std::abs(s - 1.0 / n));
    const double gap = std::abs(ot - bf);
    worst = std::max(worst, gap);
    std::printf("trial %d  sinkhorn %.6f  brute force %.6f  |diff| %.2e  row dev %.1e  col dev %.1e\n",
                t, ot, bf, gap, dr, dc);
  }
  std::printf("worst |diff| %.3e\n", worst);
  return 0;
}

int cmd_param_count(const std::string& config) {
  const auto cfg = load_config(config);
  const auto net = Network::build(cfg, 0);
  std::printf("%-28s %14s\n", "layer", "params");
  std::int64_t total = 0, inference = 0;
  for (const auto& row : net.layer_table()) {
    std::printf("%-28s %14lld%s\n", row.name.c_str(), static_cast<long long>(row.params),
                row.counts_depth ? "" : "  (training only)");
    total += row.params;
    if (row.counts_depth) inference += row.params;
  }
  std::printf("%-28s %14lld\n%-28s %14lld\n", "total (inference)", static_cast<long long>(inference),
              "total (with OT units)", static_cast<long long>(total));
  std::printf("depth %lld  (formula %lld)\n", static_cast<long long>(net.depth()),
              static_cast<long long>(Network::depth_formula(cfg)));
  if (cfg.family == Family::capnet_dynamic || cfg.family == Family::capnet_em) {
    const auto rep = capnet_complexity(net.capnet_hidden_shape(), net.capnet_grid_size());
    std::printf("transform kernel output channels %lld\n", static_cast<long long>(rep.kernel_channels));
    std::printf("mapping entries: capnet %lld vs master/aide %lld (x%lld)\n",
                static_cast<long long>(rep.capnet_mapping),
                static_cast<long long>(rep.master_aide_mapping),
                static_cast<long long>(rep.mapping_factor()));
    std::printf("routing entries: capnet %lld vs master/aide %lld (x%lld)\n",
                static_cast<long long>(rep.capnet_routing),
                static_cast<long long>(rep.master_aide_routing),
                static_cast<long long>(rep.routing_factor()));
  }
  return 0;
}

int cmd_routing_hist(const std::string& checkpoint, const std::string& out,
                     const std::string& data_dir_override, std::int64_t samples, int bins) {
  const auto ck = load_checkpoint(checkpoint);
  const auto fam = ck.net.config().family;
  if (fam != Family::capnet_dynamic && fam != Family::capnet_em)
    throw ConfigError("routing-hist needs a CapNet checkpoint");
  const auto dir = data_dir_override.empty() ? ck.meta.data_dir : data_dir_override;
  if (dir.empty()) throw InputError("checkpoint has no data directory; pass --data-dir");
  const auto test = load_mnist_split(dir, "t10k", samples);
  write_histogram_csv(out, network_routing_histogram(ck.net, test, samples, bins));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Routing temporaries are tens of MB each; keep them on the heap instead of
  // paying an mmap/munmap and fresh page faults per op.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Capsule networks with master/aide routing and Sinkhorn regularization"};
  app.require_subcommand(1);

  std::string config, data_dir = "data/mnist", metrics, checkpoint, snapshots, out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  double scale = 1.0;
  bool synthetic = false, quiet = false;

  auto* tr = app.add_subcommand("train", "train a network from a config file");
  tr->add_option("--config", config, "network/training config")->required()->check(CLI::ExistingFile);
  tr->add_option("--data-dir", data_dir, "directory with MNIST IDX files");
  tr->add_option("--seed", seed, "overrides train.seed");
  tr->add_option("--scale", scale, "multiplies max_epoch and the decay schedule");
  tr->add_option("--metrics-out", metrics, "per-epoch metrics CSV");
  tr->add_option("--checkpoint", checkpoint, "where to keep the best checkpoint");
  tr->add_option("--snapshot-dir", snapshots, "save init and per-epoch checkpoints here");
  tr->add_option("--set", sets, "config override section.key=value (repeatable)");
  tr->add_flag("--synthetic", synthetic, "train on generated bar images instead of MNIST");
  tr->add_flag("--quiet", quiet, "no per-epoch progress on stderr");

  auto* ev = app.add_subcommand("eval", "test error of a checkpoint");
  ev->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  std::string dir_override;
  ev->add_option("--data-dir", dir_override, "defaults to the directory stored in the checkpoint");

  std::string module;
  auto* gc = app.add_subcommand("gradcheck", "central-difference gradient suite at 64-bit");
  gc->add_option("--module", module, "one of the suite entries")
      ->check(CLI::IsMember(gradient_suite_names()));

  std::int64_t n = 3;
  double eps = 0.01;
  int iters = 200, trials = 5;
  std::uint64_t bench_seed = 0;
  auto* ot = app.add_subcommand("ot-bench", "Sinkhorn transport vs brute-force optimum");
  ot->add_option("--n", n, "problem size")->check(CLI::Range(1, 6));
  ot->add_option("--eps", eps, "entropic regularization")->check(CLI::PositiveNumber);
  ot->add_option("--iters", iters, "Sinkhorn iterations")->check(CLI::Range(1, 1000000));
  ot->add_option("--trials", trials, "random cost matrices");
  ot->add_option("--seed", bench_seed);

  auto* pc = app.add_subcommand("param-count", "per-layer parameter table and depth");
  pc->add_option("--config", config)->required()->check(CLI::ExistingFile);

  std::int64_t samples = 128;
  int bins = 20;
  auto* rh = app.add_subcommand("routing-hist", "cos(v, v_hat) histogram of a CapNet checkpoint");
  rh->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  rh->add_option("--out", out, "CSV path")->required();
  rh->add_option("--data-dir", dir_override, "defaults to the directory stored in the checkpoint");
  rh->add_option("--samples", samples, "test images to route");
  rh->add_option("--bins", bins);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*tr) return cmd_train(config, data_dir, seed, scale, metrics, checkpoint, snapshots, sets,
                              synthetic, quiet);
    if (*ev) return cmd_eval(checkpoint, dir_override);
    if (*gc) return cmd_gradcheck(module);
    if (*ot) return cmd_ot_bench(n, eps, iters, trials, bench_seed);
    if (*pc) return cmd_param_count(config);
    if (*rh) return cmd_routing_hist(checkpoint, out, dir_override, samples, bins);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure in op '%s': %s\n", e.op().c_str(), e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
