#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "asea/train.hpp"

namespace asea {

/// Everything a command needs besides file paths.
struct RunConfig {
  AseaConfig model;
  TrainSpec train;
  std::string graph_file;       // custom skeleton graph (JSON)
  std::size_t frames = 0;       // resample clips to this length; 0 keeps them
  double train_fraction = 0.8;  // stratified split for train/ablate
  std::uint64_t split_seed = 1;
  std::size_t folds = 5;
  std::set<std::string> explicit_keys;

  bool is_set(const std::string& key) const { return explicit_keys.count(key) > 0; }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("invalid value for '" + key + "': '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("invalid boolean for '" + key + "': '" + v + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  if (out.empty()) throw ConfigError("'" + key + "' needs at least one value");
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
  using S = std::size_t;
  static const std::map<std::string, Setter> table = {
      {"skeleton", [](RunConfig& c, const std::string&, const std::string& v) { c.model.skeleton = parse_skeleton_kind(v); }},
      {"graph_file", [](RunConfig& c, const std::string&, const std::string& v) { c.graph_file = v; }},
      {"widths", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.widths = parse_size_list(k, v); }},
      {"reduction", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.reduction = parse_number<S>(k, v); }},
      {"double_tconv", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.double_tconv = parse_bool(k, v); }},
      {"alpha_refine_init",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.model.alpha_refine_init = parse_number<double>(k, v); }},
      {"gamma", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.gamma = parse_number<double>(k, v); }},
      {"alpha_init", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.alpha_init = parse_number<double>(k, v); }},
      {"alpha_target",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.model.alpha_target = parse_number<double>(k, v); }},
      {"lambda", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.lambda = parse_number<double>(k, v); }},
      {"beta_scale", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.beta_scale = parse_number<double>(k, v); }},
      {"attn_dim", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.attn_dim = parse_number<S>(k, v); }},
      {"num_classes", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.num_classes = parse_number<S>(k, v); }},
      {"strategy", [](RunConfig& c, const std::string&, const std::string& v) { c.model.strategy = parse_strategy(v); }},
      {"use_ea", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.use_ea = parse_bool(k, v); }},
      {"training_mask", [](RunConfig& c, const std::string&, const std::string& v) { c.model.training_mask = parse_mask_mode(v); }},
      {"optimizer", [](RunConfig& c, const std::string&, const std::string& v) { c.train.optimizer = parse_optimizer(v); }},
      {"lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.lr = parse_number<double>(k, v); }},
      {"weight_decay", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.weight_decay = parse_number<double>(k, v); }},
      {"momentum", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.momentum = parse_number<double>(k, v); }},
      {"epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.epochs = parse_number<S>(k, v); }},
      {"batch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.batch_size = parse_number<S>(k, v); }},
      {"schedule", [](RunConfig& c, const std::string&, const std::string& v) { c.train.schedule = parse_schedule(v); }},
      {"step_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.step_size = parse_number<S>(k, v); }},
      {"step_gamma", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.step_gamma = parse_number<double>(k, v); }},
      {"max_steps", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.max_steps = parse_number<S>(k, v); }},
      {"seed",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.train.seed = parse_number<std::uint64_t>(k, v);
         c.model.seed = c.train.seed;
       }},
      {"frames", [](RunConfig& c, const std::string& k, const std::string& v) { c.frames = parse_number<S>(k, v); }},
      {"train_fraction",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train_fraction = parse_number<double>(k, v); }},
      {"split_seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.split_seed = parse_number<std::uint64_t>(k, v); }},
      {"folds", [](RunConfig& c, const std::string& k, const std::string& v) { c.folds = parse_number<S>(k, v); }},
  };
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::setters()) keys.push_back(k);
  return keys;
}

inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto it = detail::setters().find(key);
  if (it == detail::setters().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, key, value);
  cfg.explicit_keys.insert(key);
}

/// `key = value` lines; '#' starts a comment; blank lines are ignored.
inline void apply_config_text(RunConfig& cfg, std::istream& in, const std::string& source = "<config>") {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = detail::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value, got '" + body + "'");
    }
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    try {
      apply_setting(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  apply_config_text(cfg, in, path.string());
}

/// Fills in the custom graph and validates the combination.
inline void finalize_config(RunConfig& cfg) {
  if (cfg.model.skeleton == SkeletonKind::Custom) {
    if (cfg.graph_file.empty()) throw ConfigError("skeleton 'custom' needs graph_file");
    cfg.model.custom_graph = graph_to_json(load_graph_file(cfg.graph_file));
  }
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
  if (cfg.folds < 2) throw ConfigError("folds must be at least 2");
  cfg.model.validate();
  cfg.train.validate();
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  return {{"model", config_to_json(cfg.model)},
          {"train", spec_to_json(cfg.train)},
          {"data",
           {{"frames", cfg.frames},
            {"train_fraction", cfg.train_fraction},
            {"split_seed", cfg.split_seed},
            {"folds", cfg.folds},
            {"graph_file", cfg.graph_file}}}};
}

}  // namespace asea
