#include "encap/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace encap {

Adam::Adam(std::vector<Tensor> params, AdamArgs args) : params_(std::move(params)), args_(args) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1 - std::pow(args_.beta1, static_cast<double>(t_));
  const double bc2 = 1 - std::pow(args_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    const auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    dispatch(p.dtype(), [&]<class T>() {
      auto w = p.data<T>();
      std::span<const T> gs;
      if (g.defined()) gs = g.data<T>();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = gs.empty() ? 0.0 : static_cast<double>(gs[i]);
        m[i] = args_.beta1 * m[i] + (1 - args_.beta1) * gi;
        v[i] = args_.beta2 * v[i] + (1 - args_.beta2) * gi * gi;
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        double x = static_cast<double>(w[i]);
        x -= lr * (mh / (std::sqrt(vh) + args_.eps) + args_.weight_decay * x);
        w[i] = static_cast<T>(x);
      }
    });
    p.zero_grad();
  }
}

std::vector<Tensor> trainable(const ParamList& ps) {
  std::vector<Tensor> out;
  for (const auto& p : ps)
    if (p.trainable) out.push_back(p.tensor);
  return out;
}

double Schedule::lr_at(std::int64_t epoch) const {
  double lr = base_lr;
  for (auto m : milestones)
    if (epoch >= m) lr *= decay;
  return lr;
}

Schedule make_schedule(const TrainConfig& t, double scale) {
  if (!(scale > 0)) throw ConfigError("scale must be positive");
  Schedule s;
  s.epochs = std::max<std::int64_t>(1, std::llround(t.max_epoch * scale));
  // A milestone that rounds to 0 would decay before any training.
  for (auto m : t.schedule) s.milestones.push_back(std::max<std::int64_t>(1, std::llround(m * scale)));
  s.base_lr = t.lr;
  s.decay = t.decay;
  return s;
}

double error_rate(const std::vector<int>& pred, const std::vector<int>& labels) {
  if (pred.size() != labels.size()) throw ShapeError("error_rate: length mismatch");
  if (pred.empty()) return 0.0;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != labels[i];
  return static_cast<double>(wrong) / static_cast<double>(pred.size());
}

EvalResult evaluate(const Network& net, const Dataset& ds, std::int64_t batch) {
  NoGradGuard ng;
  const auto& cfg = net.config();
  Batcher b(ds, batch, 0, false, false, cfg.dtype);
  b.begin_epoch(0);
  EvalResult r;
  std::int64_t wrong = 0;
  double margin = 0;
  for (std::int64_t k = 0; k < b.num_batches(); ++k) {
    const auto bt = b.batch(k);
    const auto fr = net.forward(bt.images, {});
    margin += margin_loss(fr.class_caps, bt.labels, cfg.margin).item();
    wrong += std::llround(error_rate(predict(fr.class_caps), bt.labels) *
                          static_cast<double>(bt.labels.size()));
  }
  r.samples = ds.size();
  r.error = r.samples ? static_cast<double>(wrong) / static_cast<double>(r.samples) : 0.0;
  r.margin = b.num_batches() ? margin / static_cast<double>(b.num_batches()) : 0.0;
  return r;
}

namespace {

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

bool finite_params(const std::vector<Tensor>& ps) {
  for (const auto& p : ps) {
    const bool ok = dispatch(p.dtype(), [&]<class T>() {
      for (auto x : p.data<T>())
        if (!std::isfinite(x)) return false;
      return true;
    });
    if (!ok) return false;
  }
  return true;
}

bool finite_grads(const std::vector<Tensor>& ps) {
  std::vector<Tensor> gs;
  for (const auto& p : ps)
    if (auto g = p.grad(); g.defined()) gs.push_back(g);
  return finite_params(gs);
}

}  // namespace

std::string metrics_header(std::size_t ot_columns) {
  std::string h = "epoch,split,loss,error";
  for (std::size_t m = 0; m < ot_columns; ++m) h += ",ot_m" + std::to_string(m + 1);
  return h + ",lr,wallclock,margin";
}

std::string metrics_line(const MetricsRow& row, std::size_t ot_columns) {
  std::string s = std::to_string(row.epoch) + "," + row.split + "," + num(row.loss) + "," +
                  num(row.error);
  for (std::size_t m = 0; m < ot_columns; ++m) {
    s += ",";
    if (m < row.ot.size() && row.ot[m]) s += num(*row.ot[m]);
  }
  return s + "," + num(row.lr) + "," + num(row.wallclock) + "," + num(row.margin);
}

TrainSummary train(Network& net, const Dataset& train_set, const Dataset& test_set,
                   const TrainOptions& opts) {
  const auto& cfg = net.config();
  const auto sched = make_schedule(cfg.train, opts.scale);
  const bool reg = cfg.reg.active() && cfg.family == Family::encapnet;
  const auto n_mod = cfg.modules.size();
  const auto ot_cols = std::max<std::size_t>(4, n_mod);

  auto params = trainable(net.params());
  Adam adam(params, {cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps, cfg.train.weight_decay});
  Batcher batcher(train_set, cfg.train.batch, cfg.train.seed, true, cfg.train.augment, cfg.dtype);

  std::ofstream metrics;
  if (!opts.metrics_out.empty()) {
    metrics.open(opts.metrics_out, std::ios::trunc);
    if (!metrics) throw InputError("cannot write metrics to '" + opts.metrics_out + "'");
    metrics << metrics_header(ot_cols) << "\n";
  }
  auto snapshot = [&](const std::string& name, std::int64_t epoch, double err) {
    if (opts.snapshot_dir.empty()) return;
    std::filesystem::create_directories(opts.snapshot_dir);
    save_checkpoint((std::filesystem::path(opts.snapshot_dir) / name).string(), net,
                    {epoch, err, cfg.train.seed, opts.data_dir});
  };
  snapshot("init.ckpt", -1, 1.0);

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  TrainSummary summary;
  summary.epochs = sched.epochs;
  for (std::int64_t epoch = 0; epoch < sched.epochs; ++epoch) {
    const double lr = sched.lr_at(epoch);
    batcher.begin_epoch(epoch);
    const auto nb = batcher.num_batches();
    double loss_sum = 0, margin_sum = 0;
    std::vector<double> ot_sum(n_mod, 0.0);
    std::vector<bool> ot_seen(n_mod, false);
    std::int64_t wrong = 0, seen = 0;

    for (std::int64_t k = 0; k < nb; ++k) {
      const auto bt = batcher.batch(k);
      auto step = [&] {
        auto fr = net.forward(bt.images, {true, reg, false});
        auto margin = margin_loss(fr.class_caps, bt.labels, cfg.margin);
        auto total = total_loss(margin, fr.module_ot, reg ? cfg.reg.lambda : 0.0);
        return std::tuple{fr, margin, total};
      };
      auto diagnose = [&](const std::string& what) {
        // Replays the batch with every op checked, so the error names the
        // first op that went non-finite.
        for (auto& p : params) p.zero_grad();
        AnomalyGuard guard;
        auto [fr, margin, total] = step();
        total.backward();
        throw NumericError("unknown", what + " at epoch " + std::to_string(epoch) + " batch " +
                                          std::to_string(k) +
                                          " but the anomaly replay stayed finite");
      };
      auto [fr, margin, total] = step();
      const double tv = total.item();
      if (!std::isfinite(tv)) diagnose("non-finite loss");
      total.backward();
      if (!finite_grads(params)) diagnose("non-finite gradient");
      adam.step(lr);
      if (!finite_params(params))
        throw NumericError("adam", "non-finite parameters after the optimizer step at epoch " +
                                       std::to_string(epoch) + " batch " + std::to_string(k));

      loss_sum += tv;
      margin_sum += margin.item();
      for (std::size_t m = 0; m < n_mod; ++m)
        if (fr.module_ot[m].defined()) {
          ot_sum[m] += fr.module_ot[m].item();
          ot_seen[m] = true;
        }
      const auto pred = predict(fr.class_caps);
      for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != bt.labels[i];
      seen += static_cast<std::int64_t>(pred.size());
    }

    MetricsRow tr;
    tr.epoch = epoch;
    tr.split = "train";
    tr.loss = loss_sum / static_cast<double>(nb);
    tr.margin = margin_sum / static_cast<double>(nb);
    tr.error = static_cast<double>(wrong) / static_cast<double>(seen);
    tr.ot.resize(n_mod);
    for (std::size_t m = 0; m < n_mod; ++m)
      if (ot_seen[m]) tr.ot[m] = ot_sum[m] / static_cast<double>(nb);
    tr.lr = lr;
    tr.wallclock = elapsed();

    const auto ev = evaluate(net, test_set, 256);
    MetricsRow te;
    te.epoch = epoch;
    te.split = "test";
    te.loss = ev.margin;
    te.margin = ev.margin;
    te.error = ev.error;
    te.lr = lr;
    te.wallclock = elapsed();

    for (const auto* row : {&tr, &te}) {
      summary.rows.push_back(*row);
      if (metrics) metrics << metrics_line(*row, ot_cols) << "\n" << std::flush;
    }
    if (opts.verbose)
      std::cerr << "epoch " << epoch << " lr " << lr << " train loss " << tr.loss << " err "
                << tr.error << " | test err " << te.error << " (" << te.wallclock << " s)\n";

    summary.final_test_error = ev.error;
    if (ev.error < summary.best_test_error || epoch == 0) {
      summary.best_test_error = ev.error;
      if (!opts.checkpoint_out.empty())
        save_checkpoint(opts.checkpoint_out, net, {epoch, ev.error, cfg.train.seed, opts.data_dir});
    }
    snapshot("epoch_" + std::to_string(epoch) + ".ckpt", epoch, ev.error);
    if (opts.on_epoch_end) opts.on_epoch_end(epoch, net);
  }
  return summary;
}

std::vector<HistogramRow> network_routing_histogram(const Network& net, const Dataset& ds,
                                                    std::int64_t samples, int bins) {
  const auto& cfg = net.config();
  if (cfg.family != Family::capnet_dynamic && cfg.family != Family::capnet_em)
    throw ConfigError("routing histograms need a CapNet");
  const auto n = std::min<std::int64_t>(samples, ds.size());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  NoGradGuard ng;
  const auto fr = net.forward(ds.images(idx, cfg.dtype), {.keep_routing = true});
  return routing_histogram(fr.route_vhat, fr.route_v, bins);
}

void write_histogram_csv(const std::string& path, const std::vector<HistogramRow>& rows) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write '" + path + "'");
  os << "bin_low,bin_high,percent,mean_length\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", r.bin_low, r.bin_high, r.percent,
                  r.mean_length);
    os << buf;
  }
}

}  // namespace encap
