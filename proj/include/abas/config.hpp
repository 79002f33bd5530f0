#pragma once

// Run configuration: an INI file with one section per subsystem. Unknown
// sections and keys are errors, and so are referenced paths that do not
// exist.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "abas/bohb.hpp"
#include "abas/losses.hpp"
#include "abas/network.hpp"
#include "abas/synthdata.hpp"

namespace abas {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  // Either all of source/target are set (CSV files written by make-pair) or
  // the pair is generated from `generate`.
  std::string source;
  std::string target;
  std::string target_labels;  // optional, evaluation only
  PairSpec generate;

  bool from_files() const noexcept { return !source.empty(); }
};

struct RunConfig {
  DataConfig data;
  AdvMode mode = AdvMode::dann;
  DannForm dann_form = DannForm::log;
  std::size_t hidden_dim = 64;
  std::size_t feature_dim = 32;
  TrainSchedule schedule;
  SearchSpace space;
  SearchOptions bohb;
  int snapshot_every = 0;
  double divergence_margin = 0.05;
  std::string ems_regressor;
  std::string output_dir = ".";
  std::uint64_t seed = 0;

  void validate() const {
    space.validate();
    try {
      bohb.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (!(schedule.mu0 > 0.0)) throw ConfigError("schedule.mu0 must be positive");
    if (schedule.batch_size == 0) throw ConfigError("schedule.batch_size must be positive");
    if (hidden_dim == 0 || feature_dim == 0) throw ConfigError("network dimensions must be positive");
    if (snapshot_every < 0) throw ConfigError("trainer.snapshot_every must be >= 0");
    if (data.from_files() != !data.target.empty()) throw ConfigError("data.source and data.target go together");
    if (!data.target_labels.empty() && !data.from_files())
      throw ConfigError("data.target_labels needs data.source and data.target");
  }
};

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto b = tok.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok.substr(b), &used);
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a comma-separated integer list");
    }
    if (tok.find_first_not_of(" \t", b + used) != std::string::npos)
      throw ConfigError(key + ": expected a comma-separated integer list");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

template <class T>
T get_as(const boost::property_tree::ptree& sec, const std::string& key, const std::string& section) {
  try {
    return sec.get<T>(key);
  } catch (const boost::property_tree::ptree_error&) {
    throw ConfigError(section + "." + key + ": bad value '" + sec.get<std::string>(key) + "'");
  }
}

inline void require_path(const std::string& p, const std::string& key, const std::filesystem::path& base) {
  if (p.empty()) return;
  if (!std::filesystem::exists(base / p)) throw ConfigError(key + ": path does not exist: " + (base / p).string());
}

}  // namespace detail

/// Keys accepted per section.
inline const std::map<std::string, std::set<std::string>>& config_schema() {
  static const std::map<std::string, std::set<std::string>> s = {
      {"data",
       {"source", "target", "target_labels", "classes", "dims", "n_source", "n_target", "cluster_std", "class_sep",
        "rotation_deg", "translation", "prior_skew", "seed"}},
      {"network", {"mode", "dann_form", "hidden_dim", "feature_dim"}},
      {"schedule",
       {"mu0", "alpha", "beta", "gamma", "momentum", "weight_decay", "batch_size", "head_lr_multiplier",
        "head_weight_decay"}},
      {"space", {"lambda_low", "lambda_high", "dropout_max", "n_fc_layers", "fc_h", "fc_b"}},
      {"bohb",
       {"min_budget", "max_budget", "eta", "rounds", "parallelism", "good_quantile", "min_points", "random_fraction",
        "num_candidates", "bandwidth_factor", "min_bandwidth"}},
      {"trainer", {"snapshot_every", "divergence_margin"}},
      {"ems", {"regressor"}},
      {"run", {"seed", "output_dir"}},
  };
  return s;
}

/// Relative paths resolve against `base` (the config file's directory).
inline RunConfig parse_config(std::istream& is, const std::filesystem::path& base = ".") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  const auto& schema = config_schema();
  for (const auto& [name, sec] : tree) {
    if (sec.empty() && !sec.data().empty()) throw ConfigError("config: key '" + name + "' outside any section");
    auto it = schema.find(name);
    if (it == schema.end()) throw ConfigError("config: unknown section [" + name + "]");
    for (const auto& [key, unused] : sec)
      if (!it->second.count(key)) throw ConfigError("config: unknown key '" + key + "' in [" + name + "]");
  }

  RunConfig c;
  auto section = [&](const char* name) -> const pt::ptree* {
    auto it = tree.find(name);
    return it == tree.not_found() ? nullptr : &it->second;
  };
  auto set = [&](const pt::ptree* sec, const char* section_name, const char* key, auto& field) {
    if (!sec || !sec->count(key)) return;
    field = detail::get_as<std::decay_t<decltype(field)>>(*sec, key, section_name);
  };

  if (const auto* d = section("data")) {
    set(d, "data", "source", c.data.source);
    set(d, "data", "target", c.data.target);
    set(d, "data", "target_labels", c.data.target_labels);
    PairSpec& g = c.data.generate;
    set(d, "data", "classes", g.n_classes);
    set(d, "data", "dims", g.dims);
    set(d, "data", "n_source", g.n_source);
    set(d, "data", "n_target", g.n_target);
    set(d, "data", "cluster_std", g.cluster_std);
    set(d, "data", "class_sep", g.class_sep);
    set(d, "data", "rotation_deg", g.shift.rotation_deg);
    set(d, "data", "translation", g.shift.translation);
    set(d, "data", "prior_skew", g.shift.prior_skew);
    set(d, "data", "seed", g.seed);
  }
  if (const auto* n = section("network")) {
    if (n->count("mode")) {
      try {
        c.mode = parse_adv_mode(n->get<std::string>("mode"));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("network.mode: ") + e.what());
      }
    }
    if (n->count("dann_form")) {
      const std::string f = n->get<std::string>("dann_form");
      if (f == "log")
        c.dann_form = DannForm::log;
      else if (f == "reciprocal")
        c.dann_form = DannForm::reciprocal;
      else
        throw ConfigError("network.dann_form: expected 'log' or 'reciprocal'");
    }
    set(n, "network", "hidden_dim", c.hidden_dim);
    set(n, "network", "feature_dim", c.feature_dim);
  }
  if (const auto* s = section("schedule")) {
    TrainSchedule& t = c.schedule;
    set(s, "schedule", "mu0", t.mu0);
    set(s, "schedule", "alpha", t.alpha);
    set(s, "schedule", "beta", t.beta);
    set(s, "schedule", "gamma", t.gamma);
    set(s, "schedule", "momentum", t.momentum);
    set(s, "schedule", "weight_decay", t.weight_decay);
    set(s, "schedule", "batch_size", t.batch_size);
    set(s, "schedule", "head_lr_multiplier", t.head_lr_multiplier);
    set(s, "schedule", "head_weight_decay", t.head_weight_decay);
  }
  if (const auto* s = section("space")) {
    set(s, "space", "lambda_low", c.space.lambda_low);
    set(s, "space", "lambda_high", c.space.lambda_high);
    set(s, "space", "dropout_max", c.space.dropout_max);
    if (s->count("n_fc_layers")) c.space.n_fc_layers = detail::parse_int_list(s->get<std::string>("n_fc_layers"), "space.n_fc_layers");
    if (s->count("fc_h")) c.space.fc_h = detail::parse_int_list(s->get<std::string>("fc_h"), "space.fc_h");
    if (s->count("fc_b")) c.space.fc_b = detail::parse_int_list(s->get<std::string>("fc_b"), "space.fc_b");
  }
  if (const auto* b = section("bohb")) {
    SearchOptions& o = c.bohb;
    set(b, "bohb", "min_budget", o.min_budget);
    set(b, "bohb", "max_budget", o.max_budget);
    set(b, "bohb", "eta", o.eta);
    set(b, "bohb", "rounds", o.rounds);
    set(b, "bohb", "parallelism", o.parallelism);
    set(b, "bohb", "good_quantile", o.surrogate.good_quantile);
    set(b, "bohb", "min_points", o.surrogate.min_points);
    set(b, "bohb", "random_fraction", o.surrogate.random_fraction);
    set(b, "bohb", "num_candidates", o.surrogate.num_candidates);
    set(b, "bohb", "bandwidth_factor", o.surrogate.bandwidth_factor);
    set(b, "bohb", "min_bandwidth", o.surrogate.min_bandwidth);
  }
  if (const auto* t = section("trainer")) {
    set(t, "trainer", "snapshot_every", c.snapshot_every);
    set(t, "trainer", "divergence_margin", c.divergence_margin);
  }
  if (const auto* e = section("ems")) set(e, "ems", "regressor", c.ems_regressor);
  if (const auto* r = section("run")) {
    set(r, "run", "seed", c.seed);
    set(r, "run", "output_dir", c.output_dir);
  }
  c.bohb.seed = c.seed;

  detail::require_path(c.data.source, "data.source", base);
  detail::require_path(c.data.target, "data.target", base);
  detail::require_path(c.data.target_labels, "data.target_labels", base);
  detail::require_path(c.ems_regressor, "ems.regressor", base);
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.data.source);
  resolve(c.data.target);
  resolve(c.data.target_labels);
  resolve(c.ems_regressor);
  resolve(c.output_dir);

  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  return parse_config(is, std::filesystem::path(path).parent_path());
}

}  // namespace abas
