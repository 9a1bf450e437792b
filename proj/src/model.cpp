#include "encap/model.hpp"

#include <functional>

namespace encap {

Tensor total_loss(const Tensor& margin, const std::vector<Tensor>& ot, double lambda) {
  Tensor total = margin;
  if (lambda == 0) return total;
  for (const auto& t : ot)
    if (t.defined()) total = total + t * lambda;
  return total;
}

Tensor total_loss(const Tensor& class_caps, const std::vector<int>& labels,
                  const std::vector<Tensor>& ot, double lambda, MarginLossArgs args) {
  return total_loss(margin_loss(class_caps, labels, args), ot, lambda);
}

namespace {

std::int64_t conv_out(std::int64_t n, std::int64_t k, std::int64_t s, std::int64_t p) {
  const auto o = (n + 2 * p - k) / s + 1;
  if (n + 2 * p < k || o < 1) throw ConfigError("layer shrinks the feature map below 1x1");
  return o;
}

std::int64_t count_trainable(const ParamList& ps) {
  std::int64_t n = 0;
  for (const auto& p : ps)
    if (p.trainable) n += p.tensor.numel();
  return n;
}

bool is_capnet(Family f) { return f == Family::capnet_dynamic || f == Family::capnet_em; }

}  // namespace

Network Network::build(const NetworkConfig& cfg, std::uint64_t seed) {
  Network net;
  net.cfg_ = cfg;
  const auto dt = cfg.dtype;
  const Rng root(seed);
  std::uint64_t stream = 1;
  auto next_rng = [&] { return root.split(stream++); };

  std::int64_t C = cfg.in_channels, H = cfg.in_size, W = cfg.in_size;
  for (const auto& s : cfg.stem) {
    auto rng = next_rng();
    net.stem_.push_back(ConvBnRelu::make(rng, C, s.out, s.kernel, s.stride, s.pad, dt));
    C = s.out;
    H = conv_out(H, s.kernel, s.stride, s.pad);
    W = conv_out(W, s.kernel, s.stride, s.pad);
  }
  net.grid_h_ = H;
  net.grid_w_ = W;

  const bool capsule_family = cfg.family == Family::encapnet || is_capnet(cfg.family);
  if (capsule_family && cfg.caps_channels * cfg.caps_dim != C)
    throw ConfigError("stem ends with " + std::to_string(C) + " channels but the capsule grid needs " +
                      std::to_string(cfg.caps_channels) + " x " + std::to_string(cfg.caps_dim));

  switch (cfg.family) {
    case Family::encapnet: {
      if (cfg.modules.empty()) throw ConfigError("encapnet needs at least one module");
      std::int64_t d = cfg.caps_dim;
      const auto Cc = cfg.caps_channels;
      for (std::size_t m = 0; m < cfg.modules.size(); ++m) {
        const auto& mc = cfg.modules[m];
        ModuleSpec spec;
        spec.channels = Cc;
        spec.in_dim = d;
        spec.out_dim = mc.out_dim;
        spec.stride = mc.stride;
        spec.type2_count = mc.type2_count;
        spec.interaction = mc.interaction;
        spec.aide = mc.aide;
        spec.skip = mc.skip;
        auto rng = next_rng();
        net.modules_.emplace_back(spec, rng, dt);
        const auto Ho = conv_out(H, 3, mc.stride, 1), Wo = conv_out(W, 3, mc.stride, 1);
        // Units are built whenever the connectivity asks for them; whether
        // they run is decided by the regularizer at forward time.
        auto rng_a = next_rng();
        auto rng_b = next_rng();
        if (mc.ot_a) {
          if (Ho * mc.stride != H || Wo * mc.stride != W)
            throw ConfigError("module " + std::to_string(m + 1) +
                              ": OT-A generator cannot map a " + std::to_string(Ho) +
                              " grid back onto " + std::to_string(H));
          net.ot_a_.push_back(
              AgreementUnit::make(rng_a, Cc, mc.out_dim, Cc, d, mc.stride, dt));
        } else {
          net.ot_a_.emplace_back();
        }
        if (mc.ot_b) {
          if (mc.type2_count == 0)
            throw ConfigError("module " + std::to_string(m + 1) +
                              ": OT-B needs Type II layers behind the skip source");
          net.ot_b_.push_back(AgreementUnit::make(rng_b, Cc, mc.out_dim, Cc, mc.out_dim, 1, dt));
        } else {
          net.ot_b_.emplace_back();
        }
        d = mc.out_dim;
        H = Ho;
        W = Wo;
      }
      if (cfg.class_dim != d)
        throw ConfigError("capFC keeps the capsule dimension: class_dim " +
                          std::to_string(cfg.class_dim) + " vs last module " + std::to_string(d));
      const auto n_in = Cc * H * W;
      auto rng = next_rng();
      net.capfc_w_ = he_normal(rng, {d, n_in, cfg.n_classes}, n_in, dt);
      break;
    }
    case Family::capnet_dynamic:
    case Family::capnet_em: {
      if (cfg.capnet.hidden_channels < 1 || cfg.capnet.hidden_dim < 1)
        throw ConfigError("capnet.hidden_channels and hidden_dim must be positive");
      if (cfg.capnet.iterations < 1) throw ConfigError("routing iterations must be >= 1");
      net.hidden_shape_ = {cfg.caps_channels, cfg.caps_dim, cfg.capnet.hidden_channels * H * W,
                           cfg.capnet.hidden_dim};
      net.class_shape_ = {cfg.capnet.hidden_channels, cfg.capnet.hidden_dim, cfg.n_classes,
                          cfg.class_dim};
      auto r1 = next_rng();
      net.map_hidden_ = he_normal(r1, capnet_kernel_shape(net.hidden_shape_), cfg.caps_dim, dt);
      auto r2 = next_rng();
      net.map_class_ =
          he_normal(r2, capnet_kernel_shape(net.class_shape_), cfg.capnet.hidden_dim, dt);
      if (cfg.family == Family::capnet_em) {
        auto r3 = next_rng();
        net.act_conv_ = Conv2d::make(r3, cfg.caps_channels * cfg.caps_dim, cfg.caps_channels, 1,
                                     Conv2dArgs{1, 0, cfg.caps_channels}, true, dt);
        net.beta_v_hidden_ = Tensor::zeros({net.hidden_shape_.out_caps}, dt);
        net.beta_a_hidden_ = Tensor::zeros({net.hidden_shape_.out_caps}, dt);
        net.beta_v_class_ = Tensor::zeros({cfg.n_classes}, dt);
        net.beta_a_class_ = Tensor::zeros({cfg.n_classes}, dt);
        for (auto* t : {&net.beta_v_hidden_, &net.beta_a_hidden_, &net.beta_v_class_,
                        &net.beta_a_class_})
          t->set_requires_grad(true);
      }
      break;
    }
    case Family::vanilla_cnn: {
      if (cfg.vanilla_channels < 1) throw ConfigError("network.vanilla_channels must be positive");
      auto rng = next_rng();
      net.conv5_ = ConvBnRelu::make(rng, C, cfg.vanilla_channels, 3, 1, 1, dt);
      auto rf = next_rng();
      net.fc_ = Linear::make(rf, cfg.vanilla_channels, cfg.n_classes, dt);
      break;
    }
    case Family::resnet: {
      const auto& r = cfg.resnet;
      if (r.blocks.empty() || r.blocks.size() != r.widths.size() ||
          r.blocks.size() != r.strides.size())
        throw ConfigError("resnet.blocks, widths and strides must be non-empty and equally long");
      for (std::size_t s = 0; s < r.blocks.size(); ++s) {
        if (r.blocks[s] < 1) throw ConfigError("every resnet stage needs at least one block");
        for (std::int64_t b = 0; b < r.blocks[s]; ++b) {
          const auto stride = b == 0 ? r.strides[s] : 1;
          auto rng = next_rng();
          net.blocks_.push_back(ResBlock::make(rng, C, r.widths[s], stride, dt));
          C = r.widths[s];
          H = conv_out(H, 3, stride, 1);
          W = conv_out(W, 3, stride, 1);
        }
      }
      auto rf = next_rng();
      net.fc_ = Linear::make(rf, C, cfg.n_classes, dt);
      break;
    }
  }
  for (auto& p : net.params())
    if (p.trainable) p.tensor.set_requires_grad(true);
  return net;
}

Tensor Network::forward_stem(const Tensor& x, bool training) const {
  if (x.dim() != 4 || x.size(1) != cfg_.in_channels || x.size(2) != cfg_.in_size ||
      x.size(3) != cfg_.in_size)
    throw ShapeError("network expects [B, " + std::to_string(cfg_.in_channels) + ", " +
                     std::to_string(cfg_.in_size) + ", " + std::to_string(cfg_.in_size) +
                     "], got " + shape_str(x.shape()));
  Tensor h = x;
  for (const auto& layer : stem_) h = layer.forward(h, training);
  return h;
}

ForwardResult Network::forward(const Tensor& x, ForwardOptions opts) const {
  ForwardResult res;
  const auto B = x.size(0);
  auto h = forward_stem(x, opts.training);
  switch (cfg_.family) {
    case Family::encapnet: {
      const bool reg = opts.regularize && cfg_.reg.active();
      auto u = squash_grid(h, cfg_.caps_dim);
      for (std::size_t m = 0; m < modules_.size(); ++m) {
        auto out = modules_[m].forward(u, opts.training);
        Tensor ot;
        if (reg && ot_a_[m])
          ot = ot_a_[m]->loss(out.out, u, cfg_.reg.kind, cfg_.reg.ot, opts.training);
        if (reg && ot_b_[m]) {
          auto b = ot_b_[m]->loss(out.out, out.type1_out, cfg_.reg.kind, cfg_.reg.ot,
                                  opts.training);
          ot = ot.defined() ? ot + b : b;
        }
        res.module_ot.push_back(ot);
        u = out.out;
      }
      res.class_caps = capfc(grid_to_capsules(u, cfg_.modules.back().out_dim), capfc_w_);
      break;
    }
    case Family::capnet_dynamic:
    case Family::capnet_em: {
      auto u = squash_grid(h, cfg_.caps_dim);
      auto vh1 = capnet_map(u, map_hidden_, hidden_shape_);
      const auto C2 = cfg_.capnet.hidden_channels;
      if (cfg_.family == Family::capnet_dynamic) {
        const DynamicRoutingArgs args{cfg_.capnet.iterations, cfg_.capnet.softmax_over_i};
        auto v1 = dynamic_routing(vh1, args);
        auto grid = capsules_to_grid(v1, C2, grid_h_, grid_w_);
        auto vh2 = capnet_map(grid, map_class_, class_shape_);
        res.class_caps = dynamic_routing(vh2, args);
        if (opts.keep_routing) {
          res.route_vhat = vh2.detach();
          res.route_v = res.class_caps.detach();
        }
      } else {
        auto a0 = reshape(sigmoid(act_conv_.forward(u)), {B, hidden_shape_.in_channels * grid_h_ * grid_w_});
        auto r1 = em_routing(vh1, a0, beta_v_hidden_, beta_a_hidden_, cfg_.capnet.em);
        auto grid = capsules_to_grid(r1.mean, C2, grid_h_, grid_w_);
        auto vh2 = capnet_map(grid, map_class_, class_shape_);
        auto r2 = em_routing(vh2, r1.activation, beta_v_class_, beta_a_class_, cfg_.capnet.em);
        // Class capsules carry the pose direction with the activation as length.
        auto scale = r2.activation / capsule_norms(r2.mean);
        res.class_caps = r2.mean * reshape(scale, {B, cfg_.n_classes, 1});
        if (opts.keep_routing) {
          res.route_vhat = vh2.detach();
          res.route_v = r2.mean.detach();
        }
      }
      break;
    }
    case Family::vanilla_cnn:
    case Family::resnet: {
      if (cfg_.family == Family::vanilla_cnn) {
        h = conv5_.forward(h, opts.training);
      } else {
        for (const auto& b : blocks_) h = b.forward(h, opts.training);
      }
      // Sigmoid scores stand in for capsule lengths so the margin loss applies.
      auto logits = fc_.forward(global_avg_pool(h));
      res.class_caps = reshape(sigmoid(logits), {B, cfg_.n_classes, 1});
      break;
    }
  }
  if (res.module_ot.empty()) res.module_ot.resize(cfg_.modules.size());
  return res;
}

std::vector<Network::Entry> Network::entries() const {
  std::vector<Entry> out;
  if (stem_.empty()) return out;  // default-constructed, nothing built
  for (std::size_t i = 0; i < stem_.size(); ++i)
    out.push_back({"stem" + std::to_string(i + 1), true,
                   [this, i](ParamList& ps, const std::string& p) { stem_[i].collect(ps, p); }});
  switch (cfg_.family) {
    case Family::encapnet:
      for (std::size_t m = 0; m < modules_.size(); ++m) {
        const auto base = "module" + std::to_string(m + 1);
        out.push_back({base + ".type1", true, [this, m](ParamList& ps, const std::string& p) {
                         modules_[m].type1.collect(ps, p);
                         if (modules_[m].projection) modules_[m].projection->collect(ps, p + ".skip_proj");
                       }});
        for (std::size_t n = 0; n < modules_[m].type2.size(); ++n)
          out.push_back({base + ".type2_" + std::to_string(n + 1), true,
                         [this, m, n](ParamList& ps, const std::string& p) {
                           modules_[m].type2[n].collect(ps, p);
                         }});
        if (ot_a_[m])
          out.push_back({base + ".ot_a", false, [this, m](ParamList& ps, const std::string& p) {
                           ot_a_[m]->collect(ps, p);
                         }});
        if (ot_b_[m])
          out.push_back({base + ".ot_b", false, [this, m](ParamList& ps, const std::string& p) {
                           ot_b_[m]->collect(ps, p);
                         }});
      }
      out.push_back({"capfc", true, [this](ParamList& ps, const std::string& p) {
                       ps.push_back({p + ".weight", capfc_w_, true});
                     }});
      break;
    case Family::capnet_dynamic:
    case Family::capnet_em:
      out.push_back({"capsule_hidden", true, [this](ParamList& ps, const std::string& p) {
                       ps.push_back({p + ".map", map_hidden_, true});
                       if (act_conv_.weight.defined()) {
                         act_conv_.collect(ps, p + ".activation");
                         ps.push_back({p + ".beta_v", beta_v_hidden_, true});
                         ps.push_back({p + ".beta_a", beta_a_hidden_, true});
                       }
                     }});
      out.push_back({"capsule_class", true, [this](ParamList& ps, const std::string& p) {
                       ps.push_back({p + ".map", map_class_, true});
                       if (beta_v_class_.defined()) {
                         ps.push_back({p + ".beta_v", beta_v_class_, true});
                         ps.push_back({p + ".beta_a", beta_a_class_, true});
                       }
                     }});
      break;
    case Family::vanilla_cnn:
      out.push_back({"conv5", true,
                     [this](ParamList& ps, const std::string& p) { conv5_.collect(ps, p); }});
      out.push_back({"fc", true, [this](ParamList& ps, const std::string& p) { fc_.collect(ps, p); }});
      break;
    case Family::resnet:
      for (std::size_t b = 0; b < blocks_.size(); ++b) {
        // Each residual block holds two weight layers.
        const auto name = "block" + std::to_string(b + 1);
        out.push_back({name + ".a", true, [this, b](ParamList& ps, const std::string& p) {
                         blocks_[b].first.collect(ps, p);
                         if (blocks_[b].project) {
                           blocks_[b].proj.collect(ps, p + ".proj");
                           blocks_[b].proj_bn.collect(ps, p + ".proj_bn");
                         }
                       }});
        out.push_back({name + ".b", true, [this, b](ParamList& ps, const std::string& p) {
                         blocks_[b].second.collect(ps, p);
                         blocks_[b].bn2.collect(ps, p + ".bn");
                       }});
      }
      out.push_back({"fc", true, [this](ParamList& ps, const std::string& p) { fc_.collect(ps, p); }});
      break;
  }
  return out;
}

ParamList Network::params() const {
  ParamList ps;
  for (const auto& e : entries()) e.collect(ps, e.name);
  return ps;
}

std::vector<LayerCount> Network::layer_table() const {
  std::vector<LayerCount> out;
  for (const auto& e : entries()) {
    ParamList ps;
    e.collect(ps, e.name);
    out.push_back({e.name, count_trainable(ps), e.counts_depth});
  }
  return out;
}

std::int64_t Network::trainable_count() const { return count_trainable(params()); }

std::int64_t Network::depth() const {
  std::int64_t d = 0;
  for (const auto& e : entries()) d += e.counts_depth ? 1 : 0;
  return d;
}

std::int64_t Network::depth_formula(const NetworkConfig& cfg) {
  const auto n_stem = static_cast<std::int64_t>(cfg.stem.size());
  switch (cfg.family) {
    case Family::encapnet: {
      std::int64_t d = n_stem + 1;
      for (const auto& m : cfg.modules) d += m.type2_count + 1;
      return d;
    }
    case Family::capnet_dynamic:
    case Family::capnet_em:
    case Family::vanilla_cnn:
      return n_stem + 2;
    case Family::resnet: {
      std::int64_t d = n_stem + 1;
      for (auto n : cfg.resnet.blocks) d += 2 * n;
      return d;
    }
  }
  return 0;
}

std::vector<const CapConvLayer*> Network::capconv_layers() const {
  std::vector<const CapConvLayer*> out;
  for (const auto& m : modules_) {
    out.push_back(&m.type1);
    for (const auto& l : m.type2) out.push_back(&l);
  }
  return out;
}

ComplexityReport capnet_complexity(const CapnetShape& shape, std::int64_t grid) {
  const auto ks = capnet_kernel_shape(shape);
  ComplexityReport r;
  r.kernel_channels = ks[0];
  r.capnet_mapping = shape_numel(ks);
  r.master_aide_mapping = 2 * shape.in_channels * shape.in_dim * shape.out_dim;
  const auto n1 = shape.in_channels * grid * grid;
  r.capnet_routing = n1 * shape.out_caps;
  const auto c2 = shape.out_caps / (grid * grid);
  r.master_aide_routing = shape.in_channels * c2 * shape.out_dim;
  return r;
}

ComplexityReport capnet_complexity(const NetworkConfig& cfg) {
  if (!is_capnet(cfg.family)) throw ConfigError("complexity accounting needs a CapNet config");
  std::int64_t H = cfg.in_size, W = cfg.in_size;
  for (const auto& s : cfg.stem) {
    H = conv_out(H, s.kernel, s.stride, s.pad);
    W = conv_out(W, s.kernel, s.stride, s.pad);
  }
  if (H != W) throw ConfigError("complexity accounting needs a square grid");
  return capnet_complexity({cfg.caps_channels, cfg.caps_dim, cfg.capnet.hidden_channels * H * W,
                            cfg.capnet.hidden_dim},
                           H);
}

}  // namespace encap
