#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "privpart/attack.hpp"
#include "privpart/common.hpp"
#include "privpart/defense.hpp"
#include "privpart/nn.hpp"

namespace privpart {

// Raw sectioned key/value text, before any schema is applied. Ordered maps
// keep the canonical dump stable.
struct RawConfig {
  std::map<std::string, std::map<std::string, std::string>> sections;
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

}  // namespace detail

// Parses the sectioned key = value format: [section] headers, # comments,
// optionally double-quoted values. Duplicate keys and keys outside any
// section are rejected.
inline RawConfig parse_config_text(const std::string& text) {
  RawConfig raw;
  std::istringstream in(text);
  std::string line, section;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = "config line " + std::to_string(lineno) + ": ";
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError(where + "unterminated section header");
      section = detail::trim(t.substr(1, t.size() - 2));
      if (section.empty()) throw ConfigError(where + "empty section name");
      raw.sections.try_emplace(section);
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where + "expected key = value, got '" + t + "'");
    if (section.empty())
      throw ConfigError(where + "key outside any [section]");
    const std::string key = detail::trim(t.substr(0, eq));
    std::string value = detail::trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "empty key");
    if (!value.empty() && value.front() == '"') {
      const size_t close = value.find('"', 1);
      if (close == std::string::npos)
        throw ConfigError(where + "unterminated string");
      value = value.substr(1, close - 1);
    } else {
      const size_t hash = value.find('#');
      if (hash != std::string::npos)
        value = detail::trim(value.substr(0, hash));
    }
    if (!raw.sections[section].emplace(key, value).second)
      throw ConfigError(where + "duplicate key '" + section + "." + key + "'");
  }
  return raw;
}

inline RawConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

// Applies one --set override of the form section.key=value.
inline void apply_override(RawConfig& raw, const std::string& spec) {
  const size_t eq = spec.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--set expects section.key=value, got '" + spec + "'");
  const std::string path = detail::trim(spec.substr(0, eq));
  const size_t dot = path.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == path.size())
    throw ConfigError("--set expects section.key=value, got '" + spec + "'");
  raw.sections[path.substr(0, dot)][path.substr(dot + 1)] =
      detail::trim(spec.substr(eq + 1));
}

// Layer DSL: dense:N[:act] conv2d:C:K:S:P[:act] deconv2d:C:K:S:P[:act]
// conv1d:K:S:P[:act] maxpool2d:K:S dropout:P flatten
inline LayerSpec parse_layer(const std::string& token) {
  const std::vector<std::string> f = detail::split_list(token, ':');
  if (f.empty()) throw ConfigError("empty layer token");
  const std::string bad = "layer '" + token + "': ";
  auto num = [&](size_t i) -> size_t {
    try {
      return std::stoul(f.at(i));
    } catch (const std::exception&) {
      throw ConfigError(bad + "field " + std::to_string(i) +
                        " must be an integer");
    }
  };
  auto rate = [&](size_t i) -> double {
    try {
      return std::stod(f.at(i));
    } catch (const std::exception&) {
      throw ConfigError(bad + "field " + std::to_string(i) +
                        " must be a number");
    }
  };
  auto act = [&](size_t i) -> Activation {
    if (i >= f.size()) return Activation::none;
    if (f[i] == "none") return Activation::none;
    if (f[i] == "relu") return Activation::relu;
    if (f[i] == "sigmoid") return Activation::sigmoid;
    if (f[i] == "tanh") return Activation::tanh;
    throw ConfigError(bad + "unknown activation '" + f[i] +
                      "' (want none|relu|sigmoid|tanh)");
  };
  auto arity = [&](size_t lo, size_t hi) {
    if (f.size() < lo || f.size() > hi)
      throw ConfigError(bad + "wrong number of fields");
  };
  if (f[0] == "dense") {
    arity(2, 3);
    return LayerSpec::dense(num(1), act(2));
  }
  if (f[0] == "conv2d") {
    arity(5, 6);
    return LayerSpec::conv2d(num(1), num(2), num(3), num(4), act(5));
  }
  if (f[0] == "deconv2d") {
    arity(5, 6);
    return LayerSpec::deconv2d(num(1), num(2), num(3), num(4), act(5));
  }
  if (f[0] == "conv1d") {
    arity(4, 5);
    return LayerSpec::conv1d(num(1), num(2), num(3), act(4));
  }
  if (f[0] == "maxpool2d") {
    arity(3, 3);
    return LayerSpec::maxpool2d(num(1), num(2));
  }
  if (f[0] == "dropout") {
    arity(2, 2);
    const double p = rate(1);
    if (p < 0.0 || p >= 1.0)
      throw ConfigError(bad + "dropout rate must be in [0,1)");
    return LayerSpec::dropout(p);
  }
  if (f[0] == "flatten") {
    arity(1, 1);
    return LayerSpec::flatten();
  }
  throw ConfigError(bad + "unknown layer kind '" + f[0] + "'");
}

inline std::vector<LayerSpec> parse_layers(const std::string& csv) {
  std::vector<LayerSpec> out;
  for (const std::string& token : detail::split_list(csv, ','))
    out.push_back(parse_layer(token));
  if (out.empty()) throw ConfigError("layer list is empty");
  return out;
}

// Optimizer DSL: adam:LR or sgd:LR[:MOMENTUM]
inline OptimizerConfig parse_optimizer(const std::string& s,
                                       const std::string& field) {
  const std::vector<std::string> f = detail::split_list(s, ':');
  const std::string bad = field + ": ";
  auto lr = [&](size_t i) -> double {
    double v = 0.0;
    try {
      v = std::stod(f.at(i));
    } catch (const std::exception&) {
      throw ConfigError(bad + "bad number in '" + s + "'");
    }
    return v;
  };
  if (f.empty()) throw ConfigError(bad + "empty optimizer spec");
  if (f[0] == "adam") {
    if (f.size() != 2) throw ConfigError(bad + "want adam:LR");
    return OptimizerConfig::adam(lr(1));
  }
  if (f[0] == "sgd") {
    if (f.size() != 2 && f.size() != 3)
      throw ConfigError(bad + "want sgd:LR[:MOMENTUM]");
    return OptimizerConfig::sgd(lr(1), f.size() == 3 ? lr(2) : 0.0);
  }
  throw ConfigError(bad + "unknown optimizer '" + f[0] +
                    "' (want adam|sgd)");
}

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | mnist
  std::string path;                  // idx directory when source = mnist
  size_t classes = 10;
  size_t per_class = 100;
  size_t side = 28;
  double split = 0.8;  // train share of the train/test split
  uint64_t seed = 1;
};

struct ModelConfig {
  std::string layers =
      "dense:800:relu, dropout:0.1, dense:800:relu, dropout:0.1, "
      "dense:800:relu, dropout:0.1, dense:10:none";
};

struct PartitionConfig {
  size_t cut = 2;
};

struct DefenseConfig {
  double lambda = 0.0;
  std::string metric = "one_minus_ssim";  // one_minus_ssim | mse
  size_t defenders = 0;                   // 0 trains without defenders
  std::string defender_arch;  // pipe-separated layer lists; empty = catalog
  size_t defender_steps = 1;
  size_t epochs = 10;
  size_t batch_size = 32;
  std::string model_opt = "adam:1e-4";
  std::string defender_opt = "adam:1e-3";
  double val_fraction = 0.1;
  uint64_t seed = 1;
};

struct AttackConfig {
  std::string attackers = "all";  // all | comma-separated catalog names
  size_t epochs = 10;
  size_t batch_size = 32;
  uint64_t seed = 5;
};

struct DpConfig {
  size_t b = 2;
  size_t m = 1;
  std::string epsilons = "0.1, 0.5, 1, 5, 1e6";
  double range = 1.0;
  uint64_t seed = 9;
};

struct RuntimeConfig {
  std::string host = "127.0.0.1";
  uint16_t port = 7707;
  size_t max_concurrent = 4;
  size_t payload_cap_mb = 64;
  int timeout_ms = 10000;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  PartitionConfig partition;
  DefenseConfig defense;
  AttackConfig attack;
  DpConfig dp;
  RuntimeConfig runtime;

  std::vector<LayerSpec> model_layers() const {
    return parse_layers(model.layers);
  }
  Distance defense_metric() const {
    return defense.metric == "mse" ? Distance::mse : Distance::one_minus_ssim;
  }
  std::vector<double> dp_epsilons() const {
    std::vector<double> out;
    for (const std::string& tok : detail::split_list(dp.epsilons, ',')) {
      try {
        out.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ConfigError("dp.epsilons: bad number '" + tok + "'");
      }
    }
    if (out.empty()) throw ConfigError("dp.epsilons: empty grid");
    return out;
  }

  TrainingPlan training_plan() const {
    TrainingPlan plan;
    plan.lambda = defense.lambda;
    plan.epochs = defense.epochs;
    plan.batch_size = defense.batch_size;
    plan.model_opt = parse_optimizer(defense.model_opt, "defense.model_opt");
    plan.metric = defense_metric();
    plan.defender_steps = defense.defender_steps;
    plan.seed = defense.seed;
    plan.val_fraction = defense.val_fraction;
    return plan;
  }

  std::string canonical() const;
  uint64_t hash() const;
};

namespace detail {

class FieldReader {
 public:
  FieldReader(const RawConfig& raw, const std::string& section)
      : section_(section) {
    auto it = raw.sections.find(section);
    if (it != raw.sections.end()) kv_ = &it->second;
  }

  // Unread keys left in the section afterwards are schema violations.
  std::vector<std::string> unread() const {
    std::vector<std::string> out;
    if (!kv_) return out;
    for (const auto& [k, v] : *kv_)
      if (!read_.count(k)) out.push_back(section_ + "." + k);
    return out;
  }

  void str(const char* key, std::string& into) {
    if (const std::string* v = get(key)) into = *v;
  }
  void num(const char* key, double& into, double lo, double hi) {
    if (const std::string* v = get(key)) {
      try {
        into = std::stod(*v);
      } catch (const std::exception&) {
        throw ConfigError(path(key) + ": expected a number, got '" + *v + "'");
      }
      if (into < lo || into > hi)
        throw ConfigError(path(key) + ": " + *v + " outside [" +
                          std::to_string(lo) + ", " + std::to_string(hi) +
                          "]");
    }
  }
  void integer(const char* key, size_t& into, size_t lo, size_t hi) {
    if (const std::string* v = get(key)) {
      try {
        const long long parsed = std::stoll(*v);
        if (parsed < 0) throw std::out_of_range("negative");
        into = static_cast<size_t>(parsed);
      } catch (const std::exception&) {
        throw ConfigError(path(key) + ": expected a non-negative integer, "
                          "got '" + *v + "'");
      }
      if (into < lo || into > hi)
        throw ConfigError(path(key) + ": " + *v + " outside [" +
                          std::to_string(lo) + ", " + std::to_string(hi) +
                          "]");
    }
  }
  void seed(const char* key, uint64_t& into) {
    if (const std::string* v = get(key)) {
      try {
        into = std::stoull(*v);
      } catch (const std::exception&) {
        throw ConfigError(path(key) + ": expected an unsigned integer, "
                          "got '" + *v + "'");
      }
    }
  }
  void choice(const char* key, std::string& into,
              const std::vector<std::string>& allowed) {
    if (const std::string* v = get(key)) {
      for (const std::string& a : allowed)
        if (*v == a) {
          into = *v;
          return;
        }
      std::string want;
      for (const std::string& a : allowed) want += (want.empty() ? "" : "|") + a;
      throw ConfigError(path(key) + ": '" + *v + "' is not one of " + want);
    }
  }

 private:
  const std::string* get(const char* key) {
    read_.insert(key);
    if (!kv_) return nullptr;
    auto it = kv_->find(key);
    return it == kv_->end() ? nullptr : &it->second;
  }
  std::string path(const char* key) const { return section_ + "." + key; }

  std::string section_;
  const std::map<std::string, std::string>* kv_ = nullptr;
  std::set<std::string> read_;
};

}  // namespace detail

// Applies the schema: every known key is typed and range-checked, anything
// left over is rejected with its full path.
inline ExperimentConfig make_experiment_config(const RawConfig& raw) {
  static const std::vector<std::string> known_sections = {
      "dataset", "model", "partition", "defense", "attack", "dp", "runtime"};
  for (const auto& [name, kv] : raw.sections) {
    bool ok = false;
    for (const std::string& s : known_sections) ok = ok || s == name;
    if (!ok) throw ConfigError("config: unknown section [" + name + "]");
  }

  ExperimentConfig cfg;
  std::vector<std::string> leftovers;
  auto finish = [&leftovers](detail::FieldReader& r) {
    for (std::string& k : r.unread()) leftovers.push_back(std::move(k));
  };

  {
    detail::FieldReader r(raw, "dataset");
    r.choice("source", cfg.dataset.source, {"synthetic", "mnist"});
    r.str("path", cfg.dataset.path);
    r.integer("classes", cfg.dataset.classes, 2, 10);
    r.integer("per_class", cfg.dataset.per_class, 1, 1000000);
    r.integer("side", cfg.dataset.side, 8, 4096);
    r.num("split", cfg.dataset.split, 0.0, 1.0);
    if (cfg.dataset.split <= 0.0 || cfg.dataset.split >= 1.0)
      throw ConfigError("dataset.split: must be strictly inside (0,1)");
    r.seed("seed", cfg.dataset.seed);
    finish(r);
  }
  {
    detail::FieldReader r(raw, "model");
    r.str("layers", cfg.model.layers);
    finish(r);
  }
  {
    detail::FieldReader r(raw, "partition");
    r.integer("cut", cfg.partition.cut, 1, 1000);
    finish(r);
  }
  {
    detail::FieldReader r(raw, "defense");
    r.num("lambda", cfg.defense.lambda, 0.0, 1e12);
    r.choice("metric", cfg.defense.metric, {"one_minus_ssim", "mse"});
    r.integer("defenders", cfg.defense.defenders, 0, 64);
    r.str("defender_arch", cfg.defense.defender_arch);
    r.integer("defender_steps", cfg.defense.defender_steps, 1, 1000);
    r.integer("epochs", cfg.defense.epochs, 1, 100000);
    r.integer("batch_size", cfg.defense.batch_size, 1, 100000);
    r.str("model_opt", cfg.defense.model_opt);
    r.str("defender_opt", cfg.defense.defender_opt);
    r.num("val_fraction", cfg.defense.val_fraction, 0.0, 0.999);
    r.seed("seed", cfg.defense.seed);
    finish(r);
  }
  {
    detail::FieldReader r(raw, "attack");
    r.str("attackers", cfg.attack.attackers);
    r.integer("epochs", cfg.attack.epochs, 1, 100000);
    r.integer("batch_size", cfg.attack.batch_size, 1, 100000);
    r.seed("seed", cfg.attack.seed);
    finish(r);
  }
  {
    detail::FieldReader r(raw, "dp");
    r.integer("b", cfg.dp.b, 1, 4096);
    r.integer("m", cfg.dp.m, 1, 1000000);
    r.str("epsilons", cfg.dp.epsilons);
    r.num("range", cfg.dp.range, 1e-12, 1e12);
    r.seed("seed", cfg.dp.seed);
    finish(r);
  }
  {
    detail::FieldReader r(raw, "runtime");
    r.str("host", cfg.runtime.host);
    size_t port = cfg.runtime.port;
    r.integer("port", port, 0, 65535);
    cfg.runtime.port = static_cast<uint16_t>(port);
    r.integer("max_concurrent", cfg.runtime.max_concurrent, 1, 4096);
    r.integer("payload_cap_mb", cfg.runtime.payload_cap_mb, 1, 65536);
    size_t timeout = static_cast<size_t>(cfg.runtime.timeout_ms);
    r.integer("timeout_ms", timeout, 1, 3600000);
    cfg.runtime.timeout_ms = static_cast<int>(timeout);
    finish(r);
  }
  if (!leftovers.empty()) {
    std::string msg = "config: unknown key";
    if (leftovers.size() > 1) msg += "s";
    for (size_t i = 0; i < leftovers.size(); ++i)
      msg += (i ? ", " : " ") + leftovers[i];
    throw ConfigError(msg);
  }

  // Eagerly validate the embedded DSLs so bad strings fail at load time
  // with their field path, not mid-run.
  try {
    cfg.model_layers();
  } catch (const ConfigError& e) {
    throw ConfigError("model.layers: " + std::string(e.what()));
  }
  parse_optimizer(cfg.defense.model_opt, "defense.model_opt");
  parse_optimizer(cfg.defense.defender_opt, "defense.defender_opt");
  cfg.dp_epsilons();
  if (cfg.dataset.source == "mnist" && cfg.dataset.path.empty())
    throw ConfigError("dataset.path: required when dataset.source = mnist");
  return cfg;
}

inline ExperimentConfig load_experiment_config(
    const std::string& path, const std::vector<std::string>& overrides = {}) {
  RawConfig raw = load_config_file(path);
  for (const std::string& o : overrides) apply_override(raw, o);
  return make_experiment_config(raw);
}

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

// Stable dump of every effective field; the reproducibility hash is taken
// over these bytes, so defaulted and explicit-but-equal configs agree.
inline std::string ExperimentConfig::canonical() const {
  std::ostringstream os;
  os << "dataset.source=" << dataset.source << '\n'
     << "dataset.path=" << dataset.path << '\n'
     << "dataset.classes=" << dataset.classes << '\n'
     << "dataset.per_class=" << dataset.per_class << '\n'
     << "dataset.side=" << dataset.side << '\n'
     << "dataset.split=" << detail::fmt_double(dataset.split) << '\n'
     << "dataset.seed=" << dataset.seed << '\n'
     << "model.layers=" << model.layers << '\n'
     << "partition.cut=" << partition.cut << '\n'
     << "defense.lambda=" << detail::fmt_double(defense.lambda) << '\n'
     << "defense.metric=" << defense.metric << '\n'
     << "defense.defenders=" << defense.defenders << '\n'
     << "defense.defender_arch=" << defense.defender_arch << '\n'
     << "defense.defender_steps=" << defense.defender_steps << '\n'
     << "defense.epochs=" << defense.epochs << '\n'
     << "defense.batch_size=" << defense.batch_size << '\n'
     << "defense.model_opt=" << defense.model_opt << '\n'
     << "defense.defender_opt=" << defense.defender_opt << '\n'
     << "defense.val_fraction=" << detail::fmt_double(defense.val_fraction)
     << '\n'
     << "defense.seed=" << defense.seed << '\n'
     << "attack.attackers=" << attack.attackers << '\n'
     << "attack.epochs=" << attack.epochs << '\n'
     << "attack.batch_size=" << attack.batch_size << '\n'
     << "attack.seed=" << attack.seed << '\n'
     << "dp.b=" << dp.b << '\n'
     << "dp.m=" << dp.m << '\n'
     << "dp.epsilons=" << dp.epsilons << '\n'
     << "dp.range=" << detail::fmt_double(dp.range) << '\n'
     << "dp.seed=" << dp.seed << '\n'
     << "runtime.host=" << runtime.host << '\n'
     << "runtime.port=" << runtime.port << '\n'
     << "runtime.max_concurrent=" << runtime.max_concurrent << '\n'
     << "runtime.payload_cap_mb=" << runtime.payload_cap_mb << '\n'
     << "runtime.timeout_ms=" << runtime.timeout_ms << '\n';
  return os.str();
}

inline uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t ExperimentConfig::hash() const { return fnv1a64(canonical()); }

inline std::string hash_hex(uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

// Defender suite for training: either the explicit pipe-separated arch list
// or, by default, architectures cycled from the attacker catalog, since the
// defenders' job is to simulate the attackers the deployment will face.
inline std::vector<DefenderSpec> build_defender_suite(
    const DefenseConfig& d, size_t image_numel, size_t hidden_dim) {
  std::vector<DefenderSpec> out;
  if (d.defenders == 0) return out;
  const OptimizerConfig opt =
      parse_optimizer(d.defender_opt, "defense.defender_opt");
  if (!d.defender_arch.empty()) {
    const std::vector<std::string> archs =
        detail::split_list(d.defender_arch, '|');
    if (archs.size() != d.defenders)
      throw ConfigError("defense.defender_arch: " +
                        std::to_string(archs.size()) + " archs for " +
                        std::to_string(d.defenders) + " defenders");
    for (size_t j = 0; j < archs.size(); ++j) {
      DefenderSpec spec;
      spec.name = "d" + std::to_string(j);
      spec.layers = parse_layers(archs[j]);
      spec.opt = opt;
      out.push_back(std::move(spec));
    }
    return out;
  }
  const std::vector<AttackerSpec> catalog =
      builtin_catalog(image_numel, hidden_dim);
  for (size_t j = 0; j < d.defenders; ++j) {
    const AttackerSpec& a = catalog[j % catalog.size()];
    DefenderSpec spec;
    spec.name = "d" + std::to_string(j) + ":" + a.name;
    spec.layers = a.layers;
    spec.opt = opt;
    out.push_back(std::move(spec));
  }
  return out;
}

// Attacker selection: "all" or a comma list of catalog names.
inline std::vector<AttackerSpec> select_attackers(
    const AttackConfig& a, const std::vector<AttackerSpec>& catalog) {
  std::vector<AttackerSpec> out;
  if (a.attackers == "all") {
    out = catalog;
  } else {
    for (const std::string& name : detail::split_list(a.attackers, ',')) {
      bool found = false;
      for (const AttackerSpec& spec : catalog)
        if (spec.name == name) {
          out.push_back(spec);
          found = true;
          break;
        }
      if (!found) {
        std::string names;
        for (const AttackerSpec& spec : catalog)
          names += (names.empty() ? "" : ", ") + spec.name;
        throw ConfigError("attack.attackers: unknown attacker '" + name +
                          "' (catalog: " + names + ")");
      }
    }
  }
  if (out.empty()) throw ConfigError("attack.attackers: empty selection");
  for (AttackerSpec& spec : out) {
    spec.epochs = a.epochs;
  }
  return out;
}

}  // namespace privpart
