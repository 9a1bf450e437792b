#include "encap/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <sstream>

namespace encap {

namespace pt = boost::property_tree;

Family parse_family(const std::string& s) {
  if (s == "encapnet") return Family::encapnet;
  if (s == "capnet_dynamic") return Family::capnet_dynamic;
  if (s == "capnet_em") return Family::capnet_em;
  if (s == "vanilla_cnn") return Family::vanilla_cnn;
  if (s == "resnet") return Family::resnet;
  throw ConfigError("unknown network family '" + s + "'");
}

const char* to_string(Family f) {
  switch (f) {
    case Family::encapnet: return "encapnet";
    case Family::capnet_dynamic: return "capnet_dynamic";
    case Family::capnet_em: return "capnet_em";
    case Family::vanilla_cnn: return "vanilla_cnn";
    case Family::resnet: return "resnet";
  }
  return "?";
}

namespace {

std::vector<std::string> tokens(const std::string& s, const std::string& seps) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (seps.find(c) != std::string::npos) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

template <class T>
T get(const pt::ptree& tree, const std::string& key, T fallback) {
  try {
    return tree.get<T>(key, fallback);
  } catch (const pt::ptree_bad_data&) {
    throw ConfigError("bad value for '" + key + "'");
  }
}

template <class T>
T require(const pt::ptree& tree, const std::string& key) {
  try {
    return tree.get<T>(key);
  } catch (const pt::ptree_bad_path&) {
    throw ConfigError("missing required key '" + key + "'");
  } catch (const pt::ptree_bad_data&) {
    throw ConfigError("bad value for '" + key + "'");
  }
}

bool get_bool(const pt::ptree& tree, const std::string& key, bool fallback) {
  const auto v = tree.get_optional<std::string>(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError("bad boolean for '" + key + "': " + *v);
}

std::vector<std::int64_t> int_list(const std::string& s, const std::string& key) {
  std::vector<std::int64_t> out;
  for (const auto& t : tokens(s, ", ")) {
    try {
      out.push_back(std::stoll(t));
    } catch (const std::exception&) {
      throw ConfigError("bad integer list for '" + key + "'");
    }
  }
  return out;
}

std::vector<double> real_list(const std::string& s, const std::string& key) {
  std::vector<double> out;
  for (const auto& t : tokens(s, ", ")) {
    try {
      out.push_back(std::stod(t));
    } catch (const std::exception&) {
      throw ConfigError("bad number list for '" + key + "'");
    }
  }
  return out;
}

pt::ptree read_tree(const std::string& text) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return tree;
}

}  // namespace

NetworkConfig parse_config(const std::string& text) {
  const auto tree = read_tree(text);
  NetworkConfig cfg;
  cfg.text = text;

  cfg.family = parse_family(require<std::string>(tree, "network.family"));
  cfg.in_channels = get<std::int64_t>(tree, "network.in_channels", 1);
  cfg.in_size = get<std::int64_t>(tree, "network.in_size", 28);
  cfg.n_classes = get<std::int64_t>(tree, "network.n_classes", 10);
  const auto dt = get<std::string>(tree, "network.dtype", "f32");
  if (dt == "f32") cfg.dtype = DType::f32;
  else if (dt == "f64") cfg.dtype = DType::f64;
  else throw ConfigError("dtype must be f32 or f64, got '" + dt + "'");
  cfg.caps_channels = get<std::int64_t>(tree, "network.caps_channels", 0);
  cfg.caps_dim = get<std::int64_t>(tree, "network.caps_dim", 1);
  cfg.class_dim = get<std::int64_t>(tree, "network.class_dim", 16);
  cfg.vanilla_channels = get<std::int64_t>(tree, "network.vanilla_channels", 0);
  if (cfg.in_channels < 1 || cfg.in_size < 1 || cfg.n_classes < 2)
    throw ConfigError("network input extents must be positive and n_classes >= 2");

  for (const auto& spec : tokens(get<std::string>(tree, "stem.layers", ""), " ,")) {
    const auto f = tokens(spec, ":");
    if (f.size() != 4) throw ConfigError("stem layer '" + spec + "' must be out:kernel:stride:pad");
    StemLayerConfig s;
    try {
      s.out = std::stoll(f[0]);
      s.kernel = std::stoll(f[1]);
      s.stride = std::stoll(f[2]);
      s.pad = std::stoll(f[3]);
    } catch (const std::exception&) {
      throw ConfigError("stem layer '" + spec + "' must be out:kernel:stride:pad");
    }
    if (s.out < 1 || s.kernel < 1 || s.stride < 1 || s.pad < 0)
      throw ConfigError("stem layer '" + spec + "' has non-positive extents");
    cfg.stem.push_back(s);
  }
  if (cfg.stem.empty()) throw ConfigError("stem.layers must list at least one layer");

  for (int m = 1;; ++m) {
    const auto sec = tree.get_child_optional("module" + std::to_string(m));
    if (!sec) break;
    const auto key = [&](const char* k) { return "module" + std::to_string(m) + "." + k; };
    ModuleConfig mc;
    mc.out_dim = require<std::int64_t>(tree, key("out_dim"));
    mc.stride = get<std::int64_t>(tree, key("stride"), 1);
    mc.type2_count = get<std::int64_t>(tree, key("type2"), 0);
    mc.interaction = parse_interaction(get<std::string>(tree, key("interaction"), "v3"));
    mc.aide = parse_aide_mode(get<std::string>(tree, key("aide"), "exclude"));
    mc.skip = parse_skip_mode(get<std::string>(tree, key("skip"), "none"));
    const auto ot = get<std::string>(tree, key("ot"), "A");
    if (ot == "none") mc.ot_a = mc.ot_b = false;
    else if (ot == "A") mc.ot_a = true, mc.ot_b = false;
    else if (ot == "B") mc.ot_a = false, mc.ot_b = true;
    else if (ot == "A+B") mc.ot_a = mc.ot_b = true;
    else throw ConfigError("module ot connectivity must be none, A, B or A+B, got '" + ot + "'");
    if (mc.type2_count < 0) throw ConfigError("type2 count must be >= 0");
    cfg.modules.push_back(mc);
  }

  cfg.capnet.hidden_channels = get<std::int64_t>(tree, "capnet.hidden_channels", 0);
  cfg.capnet.hidden_dim = get<std::int64_t>(tree, "capnet.hidden_dim", 16);
  cfg.capnet.iterations = get<int>(tree, "capnet.iterations", 3);
  const auto over = get<std::string>(tree, "capnet.softmax_over", "i");
  if (over != "i" && over != "j") throw ConfigError("capnet.softmax_over must be i or j");
  cfg.capnet.softmax_over_i = over == "i";
  cfg.capnet.em.iterations = cfg.capnet.iterations;
  cfg.capnet.em.var_floor = get<double>(tree, "capnet.em_var_floor", 1e-6);
  cfg.capnet.em.norm_eps = get<double>(tree, "capnet.em_norm_eps", 1e-6);

  cfg.resnet.blocks = int_list(get<std::string>(tree, "resnet.blocks", ""), "resnet.blocks");
  cfg.resnet.widths = int_list(get<std::string>(tree, "resnet.widths", ""), "resnet.widths");
  cfg.resnet.strides = int_list(get<std::string>(tree, "resnet.strides", ""), "resnet.strides");

  cfg.reg.kind = parse_regularizer(get<std::string>(tree, "regularizer.kind", "none"));
  cfg.reg.lambda = get<double>(tree, "regularizer.lambda", 10.0);
  cfg.reg.ot.eps = get<double>(tree, "regularizer.eps", 0.1);
  cfg.reg.ot.iters = get<int>(tree, "regularizer.iters", 10);
  cfg.reg.ot.stop_gradient = get_bool(tree, "regularizer.stop_gradient", true);
  cfg.reg.ot.cost = parse_cost_kind(get<std::string>(tree, "regularizer.cost", "cosine"));
  cfg.reg.ot.debiased = get_bool(tree, "regularizer.debiased", true);
  if (cfg.reg.lambda < 0) throw ConfigError("regularizer.lambda must be >= 0");
  if (cfg.reg.ot.eps <= 0 || cfg.reg.ot.iters < 1)
    throw ConfigError("regularizer eps must be > 0 and iters >= 1");

  cfg.margin.m_pos = get<double>(tree, "margin.m_pos", 0.9);
  cfg.margin.m_neg = get<double>(tree, "margin.m_neg", 0.1);
  cfg.margin.lambda_down = get<double>(tree, "margin.lambda_down", 0.5);

  auto& t = cfg.train;
  t.lr = get<double>(tree, "train.lr", 1e-4);
  if (const auto s = tree.get_optional<std::string>("train.schedule"))
    t.schedule = real_list(*s, "train.schedule");
  t.decay = get<double>(tree, "train.decay", 0.1);
  t.max_epoch = get<double>(tree, "train.max_epoch", 600);
  t.beta1 = get<double>(tree, "train.beta1", 0.9);
  t.beta2 = get<double>(tree, "train.beta2", 0.999);
  t.adam_eps = get<double>(tree, "train.adam_eps", 1e-8);
  t.weight_decay = get<double>(tree, "train.weight_decay", 5e-4);
  t.batch = get<std::int64_t>(tree, "train.batch", 128);
  t.augment = get_bool(tree, "train.augment", true);
  t.train_limit = get<std::int64_t>(tree, "train.train_limit", 0);
  t.test_limit = get<std::int64_t>(tree, "train.test_limit", 0);
  t.seed = get<std::uint64_t>(tree, "train.seed", 0);
  if (t.batch < 1) throw ConfigError("train.batch must be >= 1");
  if (t.lr < 0 || t.max_epoch <= 0) throw ConfigError("train.lr must be >= 0 and max_epoch > 0");
  return cfg;
}

NetworkConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

NetworkConfig override_config(const NetworkConfig& cfg, const std::vector<std::string>& sets) {
  if (sets.empty()) return cfg;
  auto tree = read_tree(cfg.text);
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || s.find('.') > eq)
      throw ConfigError("override must look like section.key=value, got '" + s + "'");
    tree.put(s.substr(0, eq), s.substr(eq + 1));
  }
  std::ostringstream os;
  pt::write_ini(os, tree);
  return parse_config(os.str());
}

}  // namespace encap
