#ifndef TBA_CONFIG_HPP
#define TBA_CONFIG_HPP

// Experiment configuration: a structured text file of `[section]` headers and
// `key = value` lines, overridable with `section.key=value` strings.
//
//   [data]        classes dim per_class separation seed train_csv test_csv
//   [model]       hidden activation q_bits epochs learning_rate momentum weight_decay
//                 batch_size checkpoint
//   [attack]      lambda1 lambda2 k margin_rule aux_size mode goals_per_trial
//   [solver]      step_size inner_rounds max_iters patience rho_init rho_growth rho_cap
//                 constraint_tol trace
//   [experiment]  trials seed grid output_dir
//   [defense]     ft_samples ft_iters ft_lr greedy_budget

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "tba/data.hpp"
#include "tba/errors.hpp"
#include "tba/model.hpp"
#include "tba/objective.hpp"
#include "tba/solver.hpp"

namespace tba {

struct DefenseConfig {
  std::size_t ft_samples = 128;
  std::size_t ft_iters = 50;
  double ft_lr = 0.05;
  std::size_t greedy_budget = 64;
};

struct ExperimentConfig {
  BlobSpec blobs{.classes = 4, .dim = 16, .per_class = 250, .separation = 5.0, .seed = 1};
  std::string train_csv;
  std::string test_csv;

  Architecture arch;
  TrainOptions train;
  std::size_t epochs = 30;
  std::string checkpoint;  // load the victim instead of training one

  double lambda1 = 1.0;
  double lambda2 = 30.0;
  double k = 3.0;
  MarginRule margin_rule = MarginRule::others_only;
  std::size_t aux_size = 128;
  AttackMode mode = AttackMode::single_target;
  std::size_t goals_per_trial = 2;

  SolverConfig solver;

  std::size_t trials = 10;
  std::uint64_t seed = 1;
  bool grid = false;
  std::string output_dir = "tba_out";

  DefenseConfig defense;

  bool uses_csv() const { return !train_csv.empty() || !test_csv.empty(); }

  void validate() const {
    if (trials < 1) throw ConfigError("config: experiment.trials must be >= 1");
    if (aux_size < 1) throw ConfigError("config: attack.aux_size must be >= 1");
    if (lambda1 < 0.0 || lambda2 < 0.0 || k < 0.0) throw ConfigError("config: lambda1, lambda2, k must be >= 0");
    if (uses_csv() && (train_csv.empty() || test_csv.empty())) {
      throw ConfigError("config: data.train_csv and data.test_csv must be given together");
    }
    if (mode == AttackMode::multi_target && goals_per_trial < 1) {
      throw ConfigError("config: attack.goals_per_trial must be >= 1");
    }
    if (train.q_bits != 4 && train.q_bits != 8) throw ConfigError("config: model.q_bits must be 4 or 8");
    arch.validate();
    solver.validate();
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string &key, const std::string &v) {
  std::istringstream is(v);
  T out{};
  if (!(is >> out) || !(is >> std::ws).eof()) throw ConfigError("config: bad value for " + key + ": '" + v + "'");
  if constexpr (std::is_unsigned_v<T>) {
    if (!v.empty() && v[0] == '-') throw ConfigError("config: " + key + " must be nonnegative");
  }
  return out;
}

inline bool parse_bool(const std::string &key, const std::string &v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: bad boolean for " + key + ": '" + v + "'");
}

struct ConfigKey {
  const char *name;
  bool semantic;  // participates in the config hash
  std::function<void(ExperimentConfig &, const std::string &)> set;
  std::function<std::string(const ExperimentConfig &)> get;
};

#define TBA_NUM_KEY(NAME, FIELD, SEM)                                                                   \
  ConfigKey {                                                                                           \
    NAME, SEM, [](ExperimentConfig &c, const std::string &v) {                                          \
      c.FIELD = parse_number<std::remove_cvref_t<decltype(c.FIELD)>>(NAME, v);                          \
    },                                                                                                  \
        [](const ExperimentConfig &c) {                                                                 \
          if constexpr (std::is_floating_point_v<std::remove_cvref_t<decltype(c.FIELD)>>)               \
            return fmt_double(c.FIELD);                                                                 \
          else                                                                                          \
            return std::to_string(c.FIELD);                                                             \
        }                                                                                               \
  }
#define TBA_STR_KEY(NAME, FIELD, SEM)                                                         \
  ConfigKey {                                                                                 \
    NAME, SEM, [](ExperimentConfig &c, const std::string &v) { c.FIELD = v; },                \
        [](const ExperimentConfig &c) { return c.FIELD; }                                     \
  }
#define TBA_BOOL_KEY(NAME, FIELD, SEM)                                                                         \
  ConfigKey {                                                                                                  \
    NAME, SEM, [](ExperimentConfig &c, const std::string &v) { c.FIELD = parse_bool(NAME, v); },               \
        [](const ExperimentConfig &c) { return std::string(c.FIELD ? "true" : "false"); }                      \
  }

inline const std::vector<ConfigKey> &config_keys() {
  static const std::vector<ConfigKey> keys = {
      TBA_NUM_KEY("data.classes", blobs.classes, true),
      TBA_NUM_KEY("data.dim", blobs.dim, true),
      TBA_NUM_KEY("data.per_class", blobs.per_class, true),
      TBA_NUM_KEY("data.separation", blobs.separation, true),
      TBA_NUM_KEY("data.seed", blobs.seed, true),
      TBA_STR_KEY("data.train_csv", train_csv, true),
      TBA_STR_KEY("data.test_csv", test_csv, true),
      ConfigKey{"model.hidden", true,
                [](ExperimentConfig &c, const std::string &v) {
                  c.arch.hidden.clear();
                  std::istringstream is(v);
                  std::string item;
                  while (std::getline(is, item, ',')) {
                    c.arch.hidden.push_back(parse_number<std::size_t>("model.hidden", trim(item)));
                  }
                },
                [](const ExperimentConfig &c) {
                  std::string out;
                  for (std::size_t i = 0; i < c.arch.hidden.size(); ++i) {
                    out += (i ? "," : "") + std::to_string(c.arch.hidden[i]);
                  }
                  return out;
                }},
      ConfigKey{"model.activation", true,
                [](ExperimentConfig &c, const std::string &v) {
                  if (v == "relu") c.arch.activation = Activation::relu;
                  else if (v == "leaky_relu") c.arch.activation = Activation::leaky_relu;
                  else throw ConfigError("config: model.activation must be relu or leaky_relu");
                },
                [](const ExperimentConfig &c) {
                  return std::string(c.arch.activation == Activation::relu ? "relu" : "leaky_relu");
                }},
      TBA_NUM_KEY("model.q_bits", train.q_bits, true),
      TBA_NUM_KEY("model.epochs", epochs, true),
      TBA_NUM_KEY("model.learning_rate", train.learning_rate, true),
      TBA_NUM_KEY("model.momentum", train.momentum, true),
      TBA_NUM_KEY("model.weight_decay", train.weight_decay, true),
      TBA_NUM_KEY("model.batch_size", train.batch_size, true),
      TBA_STR_KEY("model.checkpoint", checkpoint, true),
      TBA_NUM_KEY("attack.lambda1", lambda1, true),
      TBA_NUM_KEY("attack.lambda2", lambda2, true),
      TBA_NUM_KEY("attack.k", k, true),
      ConfigKey{"attack.margin_rule", true,
                [](ExperimentConfig &c, const std::string &v) {
                  if (v == "others_only") c.margin_rule = MarginRule::others_only;
                  else if (v == "all_rivals") c.margin_rule = MarginRule::all_rivals;
                  else throw ConfigError("config: attack.margin_rule must be others_only or all_rivals");
                },
                [](const ExperimentConfig &c) {
                  return std::string(c.margin_rule == MarginRule::others_only ? "others_only" : "all_rivals");
                }},
      TBA_NUM_KEY("attack.aux_size", aux_size, true),
      ConfigKey{"attack.mode", true,
                [](ExperimentConfig &c, const std::string &v) {
                  if (v == "single") c.mode = AttackMode::single_target;
                  else if (v == "multi") c.mode = AttackMode::multi_target;
                  else throw ConfigError("config: attack.mode must be single or multi");
                },
                [](const ExperimentConfig &c) {
                  return std::string(c.mode == AttackMode::single_target ? "single" : "multi");
                }},
      TBA_NUM_KEY("attack.goals_per_trial", goals_per_trial, true),
      TBA_NUM_KEY("solver.step_size", solver.step_size, true),
      TBA_NUM_KEY("solver.inner_rounds", solver.inner_rounds, true),
      TBA_NUM_KEY("solver.max_iters", solver.max_iters, true),
      TBA_NUM_KEY("solver.patience", solver.patience, true),
      TBA_NUM_KEY("solver.rho_init", solver.rho_init, true),
      TBA_NUM_KEY("solver.rho_growth", solver.rho_growth, true),
      TBA_NUM_KEY("solver.rho_cap", solver.rho_cap, true),
      TBA_NUM_KEY("solver.constraint_tol", solver.constraint_tol, true),
      TBA_BOOL_KEY("solver.trace", solver.record_trace, false),
      TBA_NUM_KEY("experiment.trials", trials, true),
      TBA_NUM_KEY("experiment.seed", seed, true),
      TBA_BOOL_KEY("experiment.grid", grid, true),
      TBA_STR_KEY("experiment.output_dir", output_dir, false),
      TBA_NUM_KEY("defense.ft_samples", defense.ft_samples, true),
      TBA_NUM_KEY("defense.ft_iters", defense.ft_iters, true),
      TBA_NUM_KEY("defense.ft_lr", defense.ft_lr, true),
      TBA_NUM_KEY("defense.greedy_budget", defense.greedy_budget, true),
  };
  return keys;
}

#undef TBA_NUM_KEY
#undef TBA_STR_KEY
#undef TBA_BOOL_KEY

inline const ConfigKey &find_key(const std::string &name) {
  for (const auto &k : config_keys()) {
    if (name == k.name) return k;
  }
  throw ConfigError("config: unknown key '" + name + "'");
}

}  // namespace detail

/// Set one `section.key` to `value`.
inline void set_config_value(ExperimentConfig &cfg, const std::string &key, const std::string &value) {
  detail::find_key(key).set(cfg, detail::trim(value));
}

inline std::string get_config_value(const ExperimentConfig &cfg, const std::string &key) {
  return detail::find_key(key).get(cfg);
}

/// Apply a `section.key=value` override.
inline void apply_override(ExperimentConfig &cfg, const std::string &assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("config: override must look like section.key=value");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline ExperimentConfig parse_config(std::istream &in, ExperimentConfig cfg = {}) {
  std::string line;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config:" + std::to_string(line_no) + ": unterminated section");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config:" + std::to_string(line_no) + ": expected key = value");
    if (section.empty()) throw ConfigError("config:" + std::to_string(line_no) + ": key outside any section");
    const auto key = section + "." + detail::trim(line.substr(0, eq));
    set_config_value(cfg, key, line.substr(eq + 1));
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  return parse_config(in);
}

/// All keys, grouped by section, in the file format.
inline std::string dump_config(const ExperimentConfig &cfg) {
  std::string out;
  std::string section;
  for (const auto &k : detail::config_keys()) {
    const std::string name = k.name;
    const auto dot = name.find('.');
    const auto sec = name.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += name.substr(dot + 1) + " = " + k.get(cfg) + "\n";
  }
  return out;
}

/// Semantic fields only, one `section.key=value` per line.
inline std::string canonical_config(const ExperimentConfig &cfg) {
  std::string out;
  for (const auto &k : detail::config_keys()) {
    if (k.semantic) out += std::string(k.name) + "=" + k.get(cfg) + "\n";
  }
  return out;
}

/// Inverse of canonical_config: apply each `section.key=value` line to `base`.
inline ExperimentConfig config_from_canonical(const std::string &text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!detail::trim(line).empty()) apply_override(base, line);
  }
  return base;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string config_hash(const ExperimentConfig &cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_config(cfg))));
  return buf;
}

}  // namespace tba

#endif  // TBA_CONFIG_HPP
