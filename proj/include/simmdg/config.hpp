#pragma once

// Flat "dotted.key = value" configuration. One key table drives parsing,
// overrides, validation messages and the fully-resolved echo.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "simmdg/errors.hpp"
#include "simmdg/harness.hpp"

namespace simmdg {

/// Everything a CLI run needs: the experiment plus analysis knobs.
struct RunConfig {
  ExperimentConfig exp;
  double infogap_high_bits = 1.0;
  double infogap_low_bits = 0.0;
  std::size_t infogap_random_joints = 50;
  std::size_t probe_epochs = 30;
};

namespace config_detail {

inline std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  s.erase(s.find_last_not_of(" \t\r") + 1);
  return s;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::size_t>(std::stoull(v));
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::string num(double d) {
  std::ostringstream os;
  os << std::setprecision(17) << d;
  return os.str();
}

inline std::vector<std::size_t> size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& t : split_list(v)) out.push_back(to_size(key, t));
  return out;
}

inline std::vector<double> double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& t : split_list(v)) out.push_back(to_double(key, t));
  return out;
}

struct Key {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define SIMMDG_SIZE_KEY(NAME, FIELD)                                                   \
  Key {                                                                                \
    NAME, [](const RunConfig& c) { return std::to_string(c.FIELD); },                  \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_size(NAME, v); }         \
  }
#define SIMMDG_DOUBLE_KEY(NAME, FIELD)                                                 \
  Key {                                                                                \
    NAME, [](const RunConfig& c) { return num(c.FIELD); },                             \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_double(NAME, v); }       \
  }
#define SIMMDG_BOOL_KEY(NAME, FIELD)                                                   \
  Key {                                                                                \
    NAME, [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); },  \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_bool(NAME, v); }         \
  }

inline const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      SIMMDG_SIZE_KEY("data.num_classes", exp.data.num_classes),
      SIMMDG_SIZE_KEY("data.num_domains", exp.data.num_domains),
      SIMMDG_SIZE_KEY("data.num_modalities", exp.data.num_modalities),
      SIMMDG_SIZE_KEY("data.shared_dim", exp.data.shared_dim),
      Key{"data.specific_dims", [](const RunConfig& c) { return join(c.exp.data.specific_dims); },
          [](RunConfig& c, const std::string& v) { c.exp.data.specific_dims = size_list("data.specific_dims", v); }},
      Key{"data.obs_dims", [](const RunConfig& c) { return join(c.exp.data.obs_dims); },
          [](RunConfig& c, const std::string& v) { c.exp.data.obs_dims = size_list("data.obs_dims", v); }},
      Key{"data.shared_fraction", [](const RunConfig& c) { return join(c.exp.data.shared_fraction); },
          [](RunConfig& c, const std::string& v) {
            c.exp.data.shared_fraction = double_list("data.shared_fraction", v);
          }},
      SIMMDG_DOUBLE_KEY("data.latent_sigma", exp.data.latent_sigma),
      SIMMDG_DOUBLE_KEY("data.shift_scale", exp.data.domain_shift_scale),
      SIMMDG_DOUBLE_KEY("data.rotation_strength", exp.data.rotation_strength),
      SIMMDG_DOUBLE_KEY("data.offset_strength", exp.data.offset_strength),
      SIMMDG_DOUBLE_KEY("data.specific_shift", exp.data.specific_shift),
      SIMMDG_DOUBLE_KEY("data.noise_sigma", exp.data.noise_sigma),
      SIMMDG_SIZE_KEY("data.samples_per_domain", exp.samples_per_domain),
      Key{"data.modality_names", [](const RunConfig& c) { return join(c.exp.modality_names); },
          [](RunConfig& c, const std::string& v) { c.exp.modality_names = split_list(v); }},
      SIMMDG_SIZE_KEY("model.embed_dim", exp.model.embed_dim),
      SIMMDG_SIZE_KEY("model.encoder_hidden", exp.model.encoder_hidden),
      SIMMDG_SIZE_KEY("model.proj_hidden", exp.model.proj_hidden),
      SIMMDG_SIZE_KEY("model.proj_dim", exp.model.proj_dim),
      SIMMDG_SIZE_KEY("model.trans_hidden", exp.model.trans_hidden),
      SIMMDG_DOUBLE_KEY("loss.alpha_con", exp.weights.alpha_con),
      SIMMDG_DOUBLE_KEY("loss.alpha_dis", exp.weights.alpha_dis),
      SIMMDG_DOUBLE_KEY("loss.alpha_trans", exp.weights.alpha_trans),
      SIMMDG_DOUBLE_KEY("loss.tau", exp.tau),
      Key{"loss.distance", [](const RunConfig& c) { return std::string(to_string(c.exp.distance)); },
          [](RunConfig& c, const std::string& v) { c.exp.distance = parse_distance_kind(v); }},
      SIMMDG_DOUBLE_KEY("optim.lr", exp.optim.lr),
      SIMMDG_DOUBLE_KEY("optim.beta1", exp.optim.beta1),
      SIMMDG_DOUBLE_KEY("optim.beta2", exp.optim.beta2),
      SIMMDG_DOUBLE_KEY("optim.epsilon", exp.optim.eps),
      SIMMDG_SIZE_KEY("train.batch_size", exp.batch_size),
      SIMMDG_SIZE_KEY("train.epochs", exp.epochs),
      SIMMDG_DOUBLE_KEY("train.val_fraction", exp.val_fraction),
      SIMMDG_SIZE_KEY("train.finetune_epochs", exp.finetune_epochs),
      SIMMDG_BOOL_KEY("toggles.cl", exp.model.toggles.cl),
      SIMMDG_BOOL_KEY("toggles.fs", exp.model.toggles.fs),
      SIMMDG_BOOL_KEY("toggles.dl", exp.model.toggles.dl),
      SIMMDG_BOOL_KEY("toggles.ct", exp.model.toggles.ct),
      Key{"protocol.kind", [](const RunConfig& c) { return std::string(to_string(c.exp.protocol)); },
          [](RunConfig& c, const std::string& v) {
            if (v == "multi-source") c.exp.protocol = Protocol::multi_source;
            else if (v == "single-source") c.exp.protocol = Protocol::single_source;
            else throw ConfigError("protocol.kind: expected multi-source or single-source, got '" + v + "'");
          }},
      Key{"protocol.sources", [](const RunConfig& c) { return join(c.exp.sources); },
          [](RunConfig& c, const std::string& v) { c.exp.sources = size_list("protocol.sources", v); }},
      Key{"protocol.targets", [](const RunConfig& c) { return join(c.exp.targets); },
          [](RunConfig& c, const std::string& v) { c.exp.targets = size_list("protocol.targets", v); }},
      Key{"seed", [](const RunConfig& c) { return std::to_string(c.exp.seed); },
          [](RunConfig& c, const std::string& v) { c.exp.seed = to_size("seed", v); }},
      SIMMDG_DOUBLE_KEY("infogap.high_bits", infogap_high_bits),
      SIMMDG_DOUBLE_KEY("infogap.low_bits", infogap_low_bits),
      SIMMDG_SIZE_KEY("infogap.random_joints", infogap_random_joints),
      SIMMDG_SIZE_KEY("probe.epochs", probe_epochs),
  };
  return table;
}

#undef SIMMDG_SIZE_KEY
#undef SIMMDG_DOUBLE_KEY
#undef SIMMDG_BOOL_KEY

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : config_detail::keys()) out.push_back(k.name);
  return out;
}

/// Sets one key; unknown keys raise a ConfigError listing every valid key.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_detail::keys()) {
    if (k.name == key) {
      k.set(cfg, config_detail::trim(value));
      return;
    }
  }
  std::string valid;
  for (const auto& k : config_detail::keys()) valid += "\n  " + k.name;
  throw ConfigError("unknown config key '" + key + "'; valid keys:" + valid);
}

/// Applies "KEY=VALUE".
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not KEY=VALUE");
  set_config_value(cfg, config_detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

/// Reads "key = value" lines; '#' starts a comment.
inline void apply_config_text(RunConfig& cfg, std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_override(cfg, line);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  apply_config_text(cfg, in);
}

/// Every key with its resolved value, in table order.
inline void write_config_echo(std::ostream& os, const RunConfig& cfg) {
  for (const auto& k : config_detail::keys()) os << k.name << " = " << k.get(cfg) << '\n';
}

enum class Profile { desk, paper };

inline Profile parse_profile(const std::string& s) {
  if (s == "desk") return Profile::desk;
  if (s == "paper") return Profile::paper;
  throw ConfigError("unknown profile '" + s + "' (desk, paper)");
}

/// Desk profile: toy sizes that train in seconds on one core.
inline RunConfig desk_profile() {
  RunConfig c;
  c.exp.optim.lr = 1e-3;
  c.exp.sync();
  return c;
}

/// Published hyperparameters: tau 0.1, alpha (3.0, 0.7, 0.1), Adam lr 1e-4,
/// batch 16, 15 epochs, projection output 128, hidden width 2048, backbone
/// feature widths 2304 (video), 512 (audio), 2048 (flow).
inline RunConfig paper_profile() {
  RunConfig c;
  auto& e = c.exp;
  e.tau = 0.1;
  e.weights = {3.0, 0.7, 0.1};
  e.optim.lr = 1e-4;
  e.batch_size = 16;
  e.epochs = 15;
  e.model.proj_dim = 128;
  e.model.encoder_hidden = 2048;
  e.model.proj_hidden = 2048;
  e.model.trans_hidden = 2048;
  e.model.embed_dim = 512;
  e.data.obs_dims = {2304, 512, 2048};
  e.sync();
  return c;
}

inline RunConfig profile_config(Profile p) { return p == Profile::paper ? paper_profile() : desk_profile(); }

}  // namespace simmdg
