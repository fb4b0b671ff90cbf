#ifndef TBA_EXPERIMENT_HPP
#define TBA_EXPERIMENT_HPP

// Experiment orchestration: victim preparation, target selection, trial batches,
// sweeps, the greedy comparison and the fine-tuning defense, plus JSON/CSV output.

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "tba/baselines.hpp"
#include "tba/checkpoint.hpp"
#include "tba/config.hpp"
#include "tba/data.hpp"
#include "tba/errors.hpp"
#include "tba/model.hpp"
#include "tba/objective.hpp"
#include "tba/solver.hpp"

namespace tba {

// ---------------------------------------------------------------------------
// Victim and data

struct Victim {
  VictimModel model;
  DataSplit data;  // features cached for both splits
};

inline DataSplit load_data(const ExperimentConfig &cfg, const std::string &dataset_id = {}) {
  DataSplit split;
  if (cfg.uses_csv()) {
    split.train = read_csv(cfg.train_csv);
    split.test = read_csv(cfg.test_csv);
  } else if (!dataset_id.empty()) {
    split = generate_blobs(BlobSpec::parse_id(dataset_id));
  } else {
    split = generate_blobs(cfg.blobs);
  }
  if (split.train.empty() || split.test.empty()) throw DatasetError("load_data: empty split");
  return split;
}

inline Victim victim_from_model(VictimModel model, DataSplit data) {
  model.validate();
  data.train.validate(model.class_count());
  data.test.validate(model.class_count());
  cache_features(model, data.train);
  cache_features(model, data.test);
  return Victim{std::move(model), std::move(data)};
}

/// Load the configured checkpoint, or train a victim on the configured data.
inline Victim prepare_victim(const ExperimentConfig &cfg) {
  if (!cfg.checkpoint.empty()) {
    auto model = load_checkpoint(cfg.checkpoint);
    auto data = load_data(cfg, cfg.uses_csv() ? std::string{} : model.dataset_id);
    return victim_from_model(std::move(model), std::move(data));
  }
  auto data = load_data(cfg);
  Architecture arch = cfg.arch;
  arch.input_dim = data.train.inputs.cols();
  int max_label = 0;
  for (int y : data.train.labels) max_label = std::max(max_label, y);
  arch.classes = cfg.uses_csv() ? static_cast<std::size_t>(max_label) + 1 : cfg.blobs.classes;
  auto trained = train_victim(data.train, arch, cfg.seed, cfg.epochs, cfg.train, &data.test);
  trained.model.dataset_id = cfg.uses_csv() ? "csv:" + cfg.train_csv + "," + cfg.test_csv : cfg.blobs.id();
  return victim_from_model(std::move(trained.model), std::move(data));
}

/// Seeded permutation of training indices: the first `aux_size` form the auxiliary set,
/// the following ones are held out for the fine-tuning defense.
inline std::vector<std::size_t> train_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0x6175785f73657473ull);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

inline Dataset aux_set(const Victim &v, std::size_t aux_size, std::uint64_t seed) {
  if (aux_size > v.data.train.size()) throw ConfigError("aux_size exceeds the training split");
  const auto perm = train_permutation(v.data.train.size(), seed);
  return v.data.train.subset(std::span<const std::size_t>(perm).first(aux_size));
}

// ---------------------------------------------------------------------------
// Targets

struct AttackTarget {
  std::size_t sample = 0;  // index into the test split
  std::size_t source = 0;
  std::size_t target = 0;

  friend bool operator==(const AttackTarget &, const AttackTarget &) = default;
};

struct TargetSelection {
  std::vector<std::vector<AttackTarget>> trials;  // one goal list per trial
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::size_t> correct_indices(const VictimModel &model, const Dataset &test) {
  const Matrix feats = test.features ? *test.features : extract_features(model, test.inputs);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (predict(feats.row(i), model.fc_bits, model.fc_quant) == static_cast<std::size_t>(test.labels[i])) {
      out.push_back(i);
    }
  }
  return out;
}

}  // namespace detail

/// Sample `trials` correctly classified test points without replacement, each with a
/// target class drawn uniformly from the other classes. In grid mode, one sample per
/// ordered (s, t) pair instead; classes without a correctly classified sample are skipped.
inline TargetSelection select_targets(const VictimModel &model, const Dataset &test, std::size_t trials,
                                      std::uint64_t seed, bool grid = false) {
  const std::size_t K = model.class_count();
  std::mt19937_64 rng(seed ^ 0x7461726765747331ull);
  auto eligible = detail::correct_indices(model, test);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  TargetSelection sel;

  if (grid) {
    std::vector<std::vector<std::size_t>> by_class(K);
    for (auto i : eligible) by_class[static_cast<std::size_t>(test.labels[i])].push_back(i);
    for (std::size_t s = 0; s < K; ++s) {
      if (by_class[s].empty()) {
        sel.warnings.push_back("class " + std::to_string(s) + " has no correctly classified test sample; skipped");
        continue;
      }
      std::size_t next = 0;
      for (std::size_t t = 0; t < K; ++t) {
        if (t == s) continue;
        const auto sample = by_class[s][next++ % by_class[s].size()];
        sel.trials.push_back({AttackTarget{sample, s, t}});
      }
    }
    return sel;
  }

  if (trials > eligible.size()) {
    throw ConfigError("select_targets: " + std::to_string(trials) + " trials requested but only " +
                      std::to_string(eligible.size()) + " correctly classified test samples");
  }
  for (std::size_t n = 0; n < trials; ++n) {
    const auto i = eligible[n];
    const auto s = static_cast<std::size_t>(test.labels[i]);
    std::uniform_int_distribution<std::size_t> pick(0, K - 2);
    auto t = pick(rng);
    if (t >= s) ++t;
    sel.trials.push_back({AttackTarget{i, s, t}});
  }
  return sel;
}

/// Multi-goal trials: each trial gets `goals` (s, t) pairs over pairwise disjoint classes
/// and one correctly classified sample per source class.
inline TargetSelection select_goal_sets(const VictimModel &model, const Dataset &test, std::size_t trials,
                                        std::size_t goals, std::uint64_t seed) {
  const std::size_t K = model.class_count();
  if (2 * goals > K) throw ConfigError("select_goal_sets: disjoint class pairs need 2*goals <= classes");
  std::mt19937_64 rng(seed ^ 0x6d756c7469676f6cull);
  std::vector<std::vector<std::size_t>> by_class(K);
  for (auto i : detail::correct_indices(model, test)) by_class[static_cast<std::size_t>(test.labels[i])].push_back(i);
  for (auto &c : by_class) std::shuffle(c.begin(), c.end(), rng);
  std::vector<std::size_t> used(K, 0);

  TargetSelection sel;
  std::vector<std::size_t> classes(K);
  std::iota(classes.begin(), classes.end(), std::size_t{0});
  for (std::size_t n = 0; n < trials; ++n) {
    std::vector<AttackTarget> trial;
    for (std::size_t attempt = 0; attempt < 64 && trial.size() < goals; ++attempt) {
      trial.clear();
      std::shuffle(classes.begin(), classes.end(), rng);
      for (std::size_t g = 0; g < goals; ++g) {
        const auto s = classes[2 * g];
        const auto t = classes[2 * g + 1];
        if (used[s] >= by_class[s].size()) break;
        trial.push_back(AttackTarget{by_class[s][used[s]], s, t});
      }
    }
    if (trial.size() < goals) throw ConfigError("select_goal_sets: not enough correctly classified samples");
    for (const auto &g : trial) ++used[g.source];
    sel.trials.push_back(std::move(trial));
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Reports

struct TrialReport {
  std::size_t trial = 0;
  std::vector<AttackTarget> goals;
  bool success = false;
  std::string error;  // set when the solver diverged
  std::size_t n_flip = 0;
  std::optional<double> acc_released;
  std::optional<double> acc_flipped;
  std::size_t deployment_distance = 0;  // M_o -> M_f
  std::size_t release_distance = 0;     // M_o -> M_r
  std::size_t iterations = 0;
  std::size_t candidate_iteration = 0;
  std::string termination;
  FlipSet released_diff;  // M_o -> M_r
  FlipSet flip_diff;      // M_r -> M_f

  // Not serialised: run-dependent or bulky.
  double wall_seconds = 0.0;
  std::vector<TraceRecord> trace;
};

struct Stat {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 when n < 2
};

inline Stat summarize(const std::vector<double> &xs) {
  Stat s;
  s.n = xs.size();
  if (xs.empty()) return s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

struct BatchAggregates {
  std::size_t trials = 0;
  std::size_t successes = 0;
  std::size_t single_flip_successes = 0;
  double asr = 0.0;
  Stat n_flip;               // successes only
  Stat acc_released;         // successes only
  Stat acc_flipped;          // successes only
  Stat deployment_distance;  // successes only

  friend bool operator==(const BatchAggregates &, const BatchAggregates &) = default;
};

inline bool operator==(const Stat &a, const Stat &b) { return a.n == b.n && a.mean == b.mean && a.std == b.std; }

/// Aggregates are a pure function of the trial records.
inline BatchAggregates compute_aggregates(const std::vector<TrialReport> &trials) {
  BatchAggregates a;
  a.trials = trials.size();
  std::vector<double> nf, ar, af, dd;
  for (const auto &t : trials) {
    if (!t.success) continue;
    ++a.successes;
    if (t.n_flip == 1) ++a.single_flip_successes;
    nf.push_back(static_cast<double>(t.n_flip));
    if (t.acc_released) ar.push_back(*t.acc_released);
    if (t.acc_flipped) af.push_back(*t.acc_flipped);
    dd.push_back(static_cast<double>(t.deployment_distance));
  }
  a.asr = a.trials ? static_cast<double>(a.successes) / static_cast<double>(a.trials) : 0.0;
  a.n_flip = summarize(nf);
  a.acc_released = summarize(ar);
  a.acc_flipped = summarize(af);
  a.deployment_distance = summarize(dd);
  return a;
}

struct BatchReport {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string config;  // canonical form
  std::string dataset_id;
  double acc_original = 0.0;
  std::vector<std::string> warnings;
  std::vector<TrialReport> trials;
  BatchAggregates aggregates;
};

struct BatchTiming {
  std::vector<double> trial_seconds;
  Stat stats;
  double total_seconds = 0.0;
};

// JSON --------------------------------------------------------------------------

namespace detail {

using nlohmann::json;

inline json flips_to_json(const FlipSet &f) {
  json a = json::array();
  for (const auto &c : f.coords) a.push_back({c.row, c.feature, c.bit});
  return a;
}

inline FlipSet flips_from_json(const json &a) {
  FlipSet f;
  for (const auto &c : a) f.coords.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>(), c.at(2).get<std::size_t>()});
  return f;
}

inline json stat_to_json(const Stat &s) { return {{"n", s.n}, {"mean", s.mean}, {"std", s.std}}; }

inline Stat stat_from_json(const json &j) {
  return Stat{j.at("n").get<std::size_t>(), j.at("mean").get<double>(), j.at("std").get<double>()};
}

template <typename T>
json optional_to_json(const std::optional<T> &v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace detail

inline nlohmann::json to_json(const TrialReport &t) {
  nlohmann::json goals = nlohmann::json::array();
  for (const auto &g : t.goals) goals.push_back({{"sample", g.sample}, {"source", g.source}, {"target", g.target}});
  return {{"trial", t.trial},
          {"goals", goals},
          {"success", t.success},
          {"error", t.error},
          {"n_flip", t.n_flip},
          {"acc_released", detail::optional_to_json(t.acc_released)},
          {"acc_flipped", detail::optional_to_json(t.acc_flipped)},
          {"deployment_distance", t.deployment_distance},
          {"release_distance", t.release_distance},
          {"iterations", t.iterations},
          {"candidate_iteration", t.candidate_iteration},
          {"termination", t.termination},
          {"released_diff", detail::flips_to_json(t.released_diff)},
          {"flip_diff", detail::flips_to_json(t.flip_diff)}};
}

inline TrialReport trial_from_json(const nlohmann::json &t) {
  TrialReport tr;
  tr.trial = t.at("trial").get<std::size_t>();
  for (const auto &g : t.at("goals")) {
    tr.goals.push_back(
        {g.at("sample").get<std::size_t>(), g.at("source").get<std::size_t>(), g.at("target").get<std::size_t>()});
  }
  tr.success = t.at("success").get<bool>();
  tr.error = t.at("error").get<std::string>();
  tr.n_flip = t.at("n_flip").get<std::size_t>();
  if (!t.at("acc_released").is_null()) tr.acc_released = t.at("acc_released").get<double>();
  if (!t.at("acc_flipped").is_null()) tr.acc_flipped = t.at("acc_flipped").get<double>();
  tr.deployment_distance = t.at("deployment_distance").get<std::size_t>();
  tr.release_distance = t.at("release_distance").get<std::size_t>();
  tr.iterations = t.at("iterations").get<std::size_t>();
  tr.candidate_iteration = t.at("candidate_iteration").get<std::size_t>();
  tr.termination = t.at("termination").get<std::string>();
  tr.released_diff = detail::flips_from_json(t.at("released_diff"));
  tr.flip_diff = detail::flips_from_json(t.at("flip_diff"));
  return tr;
}

inline nlohmann::json to_json(const BatchReport &r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto &t : r.trials) trials.push_back(to_json(t));
  const auto &a = r.aggregates;
  return {{"config_hash", r.config_hash},
          {"seed", r.seed},
          {"config", r.config},
          {"dataset_id", r.dataset_id},
          {"acc_original", r.acc_original},
          {"warnings", r.warnings},
          {"aggregates",
           {{"trials", a.trials},
            {"successes", a.successes},
            {"single_flip_successes", a.single_flip_successes},
            {"asr", a.asr},
            {"n_flip", detail::stat_to_json(a.n_flip)},
            {"acc_released", detail::stat_to_json(a.acc_released)},
            {"acc_flipped", detail::stat_to_json(a.acc_flipped)},
            {"deployment_distance", detail::stat_to_json(a.deployment_distance)}}},
          {"trials", trials}};
}

inline BatchReport report_from_json(const nlohmann::json &j) {
  BatchReport r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config = j.at("config").get<std::string>();
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.acc_original = j.at("acc_original").get<double>();
  r.warnings = j.at("warnings").get<std::vector<std::string>>();
  for (const auto &t : j.at("trials")) r.trials.push_back(trial_from_json(t));
  const auto &a = j.at("aggregates");
  r.aggregates.trials = a.at("trials").get<std::size_t>();
  r.aggregates.successes = a.at("successes").get<std::size_t>();
  r.aggregates.single_flip_successes = a.at("single_flip_successes").get<std::size_t>();
  r.aggregates.asr = a.at("asr").get<double>();
  r.aggregates.n_flip = detail::stat_from_json(a.at("n_flip"));
  r.aggregates.acc_released = detail::stat_from_json(a.at("acc_released"));
  r.aggregates.acc_flipped = detail::stat_from_json(a.at("acc_flipped"));
  r.aggregates.deployment_distance = detail::stat_from_json(a.at("deployment_distance"));
  return r;
}

inline std::string report_to_string(const BatchReport &r) { return to_json(r).dump(2) + "\n"; }

inline void write_text(const std::string &path, const std::string &text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << text;
  if (!out) throw Error("write failed for " + path);
}

inline BatchReport read_report(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open report " + path);
  try {
    return report_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception &e) {
    throw Error("malformed report " + path + ": " + e.what());
  }
}

// Model reconstruction from a trial record ------------------------------------

inline BitTensor released_bits(const VictimModel &original, const TrialReport &t) {
  return apply_flips(original.fc_bits, t.released_diff);
}

inline BitTensor flipped_bits(const VictimModel &original, const TrialReport &t) {
  return apply_flips(released_bits(original, t), t.flip_diff);
}

/// Independent check of every success: rebuild M_r and M_f from the stored flip sets
/// and run fresh forward passes on each goal sample. Returns the failing trial numbers.
inline std::vector<std::size_t> reverify_report(const BatchReport &r, const VictimModel &original,
                                                const Dataset &test) {
  std::vector<std::size_t> bad;
  for (const auto &t : r.trials) {
    if (!t.success) continue;
    const auto rel = released_bits(original, t);
    const auto fl = apply_flips(rel, t.flip_diff);
    bool ok = t.flip_diff.n_flip() == t.n_flip;
    for (const auto &g : t.goals) {
      const auto x = test.inputs.row(g.sample);
      const auto f = extract_features(original, x);
      ok = ok && predict(std::span<const double>(f), rel, original.fc_quant) == g.source;
      ok = ok && predict(std::span<const double>(f), fl, original.fc_quant) == g.target;
    }
    if (!ok) bad.push_back(t.trial);
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Batches

inline AttackSpec make_attack_spec(const ExperimentConfig &cfg, const Victim &v, const std::vector<AttackTarget> &goals,
                                   const Dataset &aux) {
  AttackSpec spec;
  for (const auto &g : goals) {
    const auto x = v.data.test.inputs.row(g.sample);
    const auto f = v.data.test.features->row(g.sample);
    spec.goals.push_back(AttackGoal{{x.begin(), x.end()}, {f.begin(), f.end()}, g.source, g.target});
  }
  spec.aux = aux;
  spec.lambda1 = cfg.lambda1;
  spec.lambda2 = cfg.lambda2;
  spec.margin = cfg.k;
  spec.margin_rule = cfg.margin_rule;
  spec.mode = cfg.mode;
  return spec;
}

/// One solve for `goals`. A diverged solver yields a failed record; other errors propagate.
inline TrialReport run_trial(const ExperimentConfig &cfg, const Victim &v, const std::vector<AttackTarget> &goals,
                             const Dataset &aux, std::size_t index = 0) {
  TrialReport tr;
  tr.trial = index;
  tr.goals = goals;
  try {
    const auto spec = make_attack_spec(cfg, v, goals, aux);
    const auto res = solve(v.model, spec, cfg.solver, SolveOptions{&v.data.test});
    tr.success = res.success;
    tr.iterations = res.iterations;
    tr.candidate_iteration = res.candidate_iteration;
    tr.termination = to_string(res.reason);
    tr.wall_seconds = res.wall_seconds;
    tr.trace = res.trace;
    if (res.success) {
      tr.n_flip = res.n_flip;
      tr.acc_released = res.acc_released;
      tr.acc_flipped = res.acc_flipped;
      tr.released_diff = flip_difference(v.model.fc_bits, res.released);
      tr.flip_diff = flip_difference(res.released, res.flipped);
      tr.release_distance = tr.released_diff.n_flip();
      tr.deployment_distance = bit_distance(v.model.fc_bits, res.flipped);
    }
  } catch (const SolverDiverged &e) {
    tr.success = false;
    tr.error = e.what();
    tr.termination = "diverged";
    tr.trace = e.trace();
  }
  return tr;
}

/// Run every trial of `targets` against `v`. Trials run on a worker pool (TBA_THREADS
/// caps its size); results land in per-trial slots, so output order never depends on
/// scheduling. A diverged solver marks its trial failed; other errors propagate.
inline BatchReport run_trials(const ExperimentConfig &cfg, const Victim &v, const TargetSelection &targets,
                              BatchTiming *timing = nullptr) {
  cfg.validate();
  const auto aux = aux_set(v, cfg.aux_size, cfg.seed);
  const std::size_t n = targets.trials.size();
  std::vector<TrialReport> slots(n);
  std::vector<std::exception_ptr> errors(n);

  auto run_one = [&](std::size_t i) {
    try {
      slots[i] = run_trial(cfg, v, targets.trials[i], aux, i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  const std::size_t workers = worker_count(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += workers) run_one(i);
      });
    }
  }
  for (auto &e : errors) {
    if (e) std::rethrow_exception(e);
  }

  BatchReport rep;
  rep.config_hash = config_hash(cfg);
  rep.seed = cfg.seed;
  rep.config = canonical_config(cfg);
  rep.dataset_id = v.model.dataset_id;
  rep.acc_original = accuracy(v.model, v.data.test);
  rep.warnings = targets.warnings;
  rep.trials = std::move(slots);
  rep.aggregates = compute_aggregates(rep.trials);
  if (timing) {
    timing->trial_seconds.clear();
    for (const auto &t : rep.trials) timing->trial_seconds.push_back(t.wall_seconds);
    timing->stats = summarize(timing->trial_seconds);
    timing->total_seconds = std::accumulate(timing->trial_seconds.begin(), timing->trial_seconds.end(), 0.0);
  }
  return rep;
}

inline TargetSelection select_for_config(const ExperimentConfig &cfg, const Victim &v) {
  if (cfg.mode == AttackMode::multi_target) {
    return select_goal_sets(v.model, v.data.test, cfg.trials, cfg.goals_per_trial, cfg.seed);
  }
  return select_targets(v.model, v.data.test, cfg.trials, cfg.seed, cfg.grid);
}

inline BatchReport run_batch(const ExperimentConfig &cfg, BatchTiming *timing = nullptr) {
  cfg.validate();
  const auto v = prepare_victim(cfg);
  return run_trials(cfg, v, select_for_config(cfg, v), timing);
}

/// report.json, timing.json and (when tracing) one CSV trace per trial under `dir`.
inline void write_batch_outputs(const std::string &dir, const BatchReport &rep, const BatchTiming *timing = nullptr) {
  write_text(dir + "/report.json", report_to_string(rep));
  if (timing) {
    nlohmann::json j = {{"config_hash", rep.config_hash},
                        {"trial_seconds", timing->trial_seconds},
                        {"mean_seconds", timing->stats.mean},
                        {"std_seconds", timing->stats.std},
                        {"total_seconds", timing->total_seconds}};
    write_text(dir + "/timing.json", j.dump(2) + "\n");
  }
  for (const auto &t : rep.trials) {
    if (t.trace.empty()) continue;
    char name[32];
    std::snprintf(name, sizeof name, "/traces/trial_%04zu.csv", t.trial);
    std::filesystem::create_directories(dir + "/traces");
    write_trace_csv(t.trace, dir + name);
  }
}

// ---------------------------------------------------------------------------
// Sweeps

inline const std::vector<std::string> &sweep_parameters() {
  static const std::vector<std::string> p = {"lambda1", "lambda2", "k", "aux_size"};
  return p;
}

struct SweepRow {
  std::string value;
  BatchReport report;
};

struct SweepResult {
  std::string parameter;
  std::vector<SweepRow> rows;
};

/// One batch per value over a shared victim and target list.
inline SweepResult sweep(const ExperimentConfig &cfg, const Victim &v, const TargetSelection &targets,
                         const std::string &parameter, const std::vector<std::string> &values) {
  if (std::find(sweep_parameters().begin(), sweep_parameters().end(), parameter) == sweep_parameters().end()) {
    throw ConfigError("sweep: parameter must be one of lambda1, lambda2, k, aux_size");
  }
  if (values.empty()) throw ConfigError("sweep: no values");
  SweepResult out;
  out.parameter = parameter;
  for (const auto &val : values) {
    ExperimentConfig c = cfg;
    set_config_value(c, "attack." + parameter, val);
    out.rows.push_back(SweepRow{val, run_trials(c, v, targets)});
  }
  return out;
}

inline SweepResult sweep(const ExperimentConfig &cfg, const std::string &parameter,
                         const std::vector<std::string> &values) {
  cfg.validate();
  const auto v = prepare_victim(cfg);
  return sweep(cfg, v, select_for_config(cfg, v), parameter, values);
}

inline void write_sweep_csv(const SweepResult &s, std::ostream &out) {
  out << "parameter,value,trials,successes,asr,mean_n_flip,std_n_flip,single_flip_successes,"
         "acc_original,mean_acc_released,mean_acc_flipped,mean_deployment_distance,config_hash\n";
  out.precision(10);
  for (const auto &row : s.rows) {
    const auto &a = row.report.aggregates;
    out << s.parameter << ',' << row.value << ',' << a.trials << ',' << a.successes << ',' << a.asr << ','
        << a.n_flip.mean << ',' << a.n_flip.std << ',' << a.single_flip_successes << ','
        << row.report.acc_original << ',' << a.acc_released.mean << ',' << a.acc_flipped.mean << ','
        << a.deployment_distance.mean << ',' << row.report.config_hash << '\n';
  }
}

// ---------------------------------------------------------------------------
// Greedy comparison on M_o versus M_r

struct GreedyPair {
  std::size_t trial = 0;
  bool original_success = false;
  std::size_t original_n_flip = 0;
  bool released_success = false;
  std::size_t released_n_flip = 0;
};

/// For each successful single-goal trial, run greedy_bit_attack against M_o and M_r.
inline std::vector<GreedyPair> greedy_comparison(const ExperimentConfig &cfg, const Victim &v, const BatchReport &rep) {
  GreedyOptions opt;
  opt.budget = cfg.defense.greedy_budget;
  std::vector<GreedyPair> out;
  for (const auto &t : rep.trials) {
    if (!t.success || t.goals.size() != 1) continue;
    const auto &g = t.goals[0];
    const auto x = v.data.test.inputs.row(g.sample);
    const std::vector<double> input(x.begin(), x.end());
    GreedyPair p;
    p.trial = t.trial;
    const auto o = greedy_bit_attack(v.model, input, g.source, g.target, opt);
    p.original_success = o.result.success;
    p.original_n_flip = o.result.n_flip;
    const auto r = greedy_bit_attack(v.model.with_fc(released_bits(v.model, t)), input, g.source, g.target, opt);
    p.released_success = r.result.success;
    p.released_n_flip = r.result.n_flip;
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning defense

/// Fine-tune only the final layer on `data` (features cached) with full-batch gradient
/// descent on cross-entropy. A float shadow copy takes the updates; after each step the
/// layer is re-quantized with the frozen step size.
inline BitTensor finetune_final_layer(const VictimModel &model, const BitTensor &bits, const Dataset &data,
                                      std::size_t iters, double lr) {
  if (!data.features) throw SetupError("finetune_final_layer: features not cached");
  Matrix w = dequantize(bits, model.fc_quant);
  BitTensor cur = bits;
  const std::size_t K = w.rows();
  const std::size_t V = w.cols();
  const double inv = 1.0 / static_cast<double>(data.size());
  for (std::size_t it = 0; it < iters; ++it) {
    const Matrix wq = dequantize(cur, model.fc_quant);
    Matrix grad(K, V);
    std::vector<double> z(K);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto f = data.features->row(i);
      for (std::size_t k = 0; k < K; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < V; ++j) acc += wq(k, j) * f[j];
        z[k] = acc;
      }
      detail::softmax_inplace(z);
      z[static_cast<std::size_t>(data.labels[i])] -= 1.0;
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < V; ++j) grad(k, j) += z[k] * f[j] * inv;
    }
    for (std::size_t i = 0; i < w.values().size(); ++i) w.values()[i] -= lr * grad.values()[i];
    cur = quantize_with_step(w, model.fc_quant);
  }
  return cur;
}

struct DefenseTrial {
  std::size_t trial = 0;
  bool replay_success = false;   // M_f - M_r replayed onto the fine-tuned M_r
  bool reattacked = false;       // fine-tuned M_r still predicts the source class
  bool reattack_success = false;
  std::size_t reattack_n_flip = 0;
  bool original_success = false;  // greedy against M_o
  std::size_t original_n_flip = 0;
  double acc_finetuned = 0.0;
};

struct DefenseReport {
  std::size_t ft_iters = 0;
  std::size_t trials = 0;       // all trials of the batch
  double pre_asr = 0.0;
  double residual_asr = 0.0;
  double reattack_success_rate = 0.0;  // over re-attacked models
  Stat reattack_n_flip;                // successful re-attacks
  Stat original_n_flip;                // successful greedy attacks on M_o
  std::vector<DefenseTrial> details;
};

inline DefenseReport finetune_defense_eval(const ExperimentConfig &cfg, const Victim &v, const BatchReport &rep) {
  const auto &d = cfg.defense;
  const auto perm = train_permutation(v.data.train.size(), cfg.seed);
  if (cfg.aux_size + d.ft_samples > perm.size()) throw ConfigError("defense: not enough held-out training samples");
  const auto ft = v.data.train.subset(std::span<const std::size_t>(perm).subspan(cfg.aux_size, d.ft_samples));
  GreedyOptions gopt;
  gopt.budget = d.greedy_budget;

  DefenseReport out;
  out.ft_iters = d.ft_iters;
  out.trials = rep.trials.size();
  out.pre_asr = rep.aggregates.asr;
  std::size_t replayed = 0;
  std::size_t reattacked = 0;
  std::size_t reattack_ok = 0;
  std::vector<double> re_nf, o_nf;
  for (const auto &t : rep.trials) {
    if (!t.success || t.goals.size() != 1) continue;
    const auto &g = t.goals[0];
    const auto f = v.data.test.features->row(g.sample);
    const auto x = v.data.test.inputs.row(g.sample);
    const std::vector<double> input(x.begin(), x.end());

    DefenseTrial dt;
    dt.trial = t.trial;
    const auto tuned = finetune_final_layer(v.model, released_bits(v.model, t), ft, d.ft_iters, d.ft_lr);
    dt.acc_finetuned = accuracy(*v.data.test.features, v.data.test.labels, tuned, v.model.fc_quant);
    dt.replay_success = predict(f, apply_flips(tuned, t.flip_diff), v.model.fc_quant) == g.target;
    if (dt.replay_success) ++replayed;
    const auto tuned_model = v.model.with_fc(tuned);
    if (predict(f, tuned, v.model.fc_quant) == g.source) {
      dt.reattacked = true;
      ++reattacked;
      const auto r = greedy_bit_attack(tuned_model, input, g.source, g.target, gopt);
      dt.reattack_success = r.result.success;
      dt.reattack_n_flip = r.result.n_flip;
      if (r.result.success) {
        ++reattack_ok;
        re_nf.push_back(static_cast<double>(r.result.n_flip));
      }
    }
    const auto o = greedy_bit_attack(v.model, input, g.source, g.target, gopt);
    dt.original_success = o.result.success;
    dt.original_n_flip = o.result.n_flip;
    if (o.result.success) o_nf.push_back(static_cast<double>(o.result.n_flip));
    out.details.push_back(dt);
  }
  out.residual_asr = out.trials ? static_cast<double>(replayed) / static_cast<double>(out.trials) : 0.0;
  out.reattack_success_rate = reattacked ? static_cast<double>(reattack_ok) / static_cast<double>(reattacked) : 0.0;
  out.reattack_n_flip = summarize(re_nf);
  out.original_n_flip = summarize(o_nf);
  return out;
}

inline nlohmann::json to_json(const DefenseReport &r) {
  nlohmann::json details = nlohmann::json::array();
  for (const auto &d : r.details) {
    details.push_back({{"trial", d.trial},
                       {"replay_success", d.replay_success},
                       {"reattacked", d.reattacked},
                       {"reattack_success", d.reattack_success},
                       {"reattack_n_flip", d.reattack_n_flip},
                       {"original_success", d.original_success},
                       {"original_n_flip", d.original_n_flip},
                       {"acc_finetuned", d.acc_finetuned}});
  }
  return {{"ft_iters", r.ft_iters},
          {"trials", r.trials},
          {"pre_asr", r.pre_asr},
          {"residual_asr", r.residual_asr},
          {"reattack_success_rate", r.reattack_success_rate},
          {"reattack_n_flip", detail::stat_to_json(r.reattack_n_flip)},
          {"original_n_flip", detail::stat_to_json(r.original_n_flip)},
          {"details", details}};
}

}  // namespace tba

#endif  // TBA_EXPERIMENT_HPP
