#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "csamoe/errors.hpp"
#include "csamoe/moe.hpp"
#include "csamoe/training.hpp"

// Run configuration file: one `key = value` per line, `#` starts a comment.
//
//   data                 dataset root (required for train)
//   out                  output directory                      [runs]
//   preset               tiny | full                           [full]
//   variant              csa_moe | resnet_moe | resnet18       [csa_moe]
//   drop_expert          none | tumor | boundary               [none]
//   epochs               training epochs                       [30]
//   batch_size           samples per batch                     [32]
//   lr                   initial learning rate                 [5e-5]
//   weight_decay         L2 coefficient                        [0]
//   lr_factor            plateau reduction factor              [0.5]
//   patience             plateau patience in epochs            [3]
//   min_lr               learning-rate floor                   [1e-6]
//   seed                 split seed and base of run seeds      [42]
//   runs                 independent repeated runs             [1]
//   augment              true | false                          [true]
//   workers              data-loading threads                  [4]
//   log_alpha            write per-batch stage weights         [false]
//   log_channel_weights  write per-batch channel weights       [false]

namespace csamoe {

class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};

struct CliConfig {
  TrainConfig train;
  std::string data;
  std::string out = "runs";
  std::size_t runs = 1;

  CliConfig() { train.preset = Preset::full; }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (...) {
  }
  throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); }))
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(std::stoull(v));
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

}  // namespace detail

inline void set_drop_expert(TrainConfig& t, const std::string& v) {
  t.drop_tumor = t.drop_boundary = false;
  if (v == "tumor") t.drop_tumor = true;
  else if (v == "boundary") t.drop_boundary = true;
  else if (v != "none") throw ConfigError("drop_expert must be none, tumor or boundary, got '" + v + "'");
}

inline void apply_config_key(CliConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  auto& t = c.train;
  try {
    if (key == "data") c.data = v;
    else if (key == "out") c.out = v;
    else if (key == "preset") t.preset = parse_preset(v);
    else if (key == "variant") t.variant = parse_variant(v);
    else if (key == "drop_expert") set_drop_expert(t, v);
    else if (key == "epochs") t.epochs = parse_count(key, v);
    else if (key == "batch_size") t.batch_size = parse_count(key, v);
    else if (key == "lr") t.lr = parse_double(key, v);
    else if (key == "weight_decay") t.weight_decay = parse_double(key, v);
    else if (key == "lr_factor") t.lr_factor = parse_double(key, v);
    else if (key == "patience") t.patience = parse_count(key, v);
    else if (key == "min_lr") t.min_lr = parse_double(key, v);
    else if (key == "seed") t.seed = parse_count(key, v);
    else if (key == "runs") c.runs = parse_count(key, v);
    else if (key == "augment") t.augment = parse_bool(key, v);
    else if (key == "workers") t.workers = std::max<std::size_t>(1, parse_count(key, v));
    else if (key == "log_alpha") t.log_alpha = parse_bool(key, v);
    else if (key == "log_channel_weights") t.log_channel_weights = parse_bool(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  } catch (const ConfigError&) {
    throw;
  } catch (const UsageError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

inline CliConfig parse_config(const std::string& text) {
  CliConfig c;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    apply_config_key(c, key, value);
  }
  if (c.runs == 0) throw ConfigError("runs must be at least 1");
  try {
    c.train.validate();
  } catch (const UsageError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline CliConfig read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace csamoe
