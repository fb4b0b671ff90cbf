#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"
#include "tba/experiment.hpp"

using namespace tba;
using tba::testing::blob_victim;

namespace {

ExperimentConfig small_config(std::size_t trials = 3) {
  ExperimentConfig c;
  c.trials = trials;
  c.solver.max_iters = 800;
  c.solver.patience = 200;
  return c;
}

class ThreadEnv {
 public:
  explicit ThreadEnv(const char *n) {
    if (const char *old = std::getenv("TBA_THREADS")) saved_ = old;
    ::setenv("TBA_THREADS", n, 1);
  }
  ~ThreadEnv() {
    if (saved_.empty()) ::unsetenv("TBA_THREADS");
    else ::setenv("TBA_THREADS", saved_.c_str(), 1);
  }

 private:
  std::string saved_;
};

TrialReport fake_trial(std::size_t i, bool ok, std::size_t n_flip, double acc_r, double acc_f) {
  TrialReport t;
  t.trial = i;
  t.success = ok;
  t.n_flip = n_flip;
  if (ok) {
    t.acc_released = acc_r;
    t.acc_flipped = acc_f;
    t.deployment_distance = n_flip + 2;
  }
  return t;
}

}  // namespace

// Configuration --------------------------------------------------------------------

TEST(Config, DumpParseRoundTrip) {
  auto cfg = small_config();
  cfg.lambda2 = 12.5;
  cfg.arch.hidden = {16, 8};
  cfg.margin_rule = MarginRule::all_rivals;
  const auto text = dump_config(cfg);
  std::istringstream in(text);
  EXPECT_EQ(dump_config(parse_config(in)), text);
}

TEST(Config, ParsesSectionsAndComments) {
  std::istringstream in("# top\n[attack]\nlambda2 = 7   # inline\nk=1\n\n[solver]\nmax_iters = 90\npatience=10\n");
  const auto cfg = parse_config(in);
  EXPECT_EQ(cfg.lambda2, 7.0);
  EXPECT_EQ(cfg.k, 1.0);
  EXPECT_EQ(cfg.solver.max_iters, 90u);
  EXPECT_EQ(cfg.solver.patience, 10u);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  std::istringstream unknown("[attack]\nlambda3 = 1\n");
  EXPECT_THROW(parse_config(unknown), ConfigError);
  std::istringstream orphan("lambda1 = 1\n");
  EXPECT_THROW(parse_config(orphan), ConfigError);
  ExperimentConfig c;
  EXPECT_THROW(apply_override(c, "attack.lambda1=abc"), ConfigError);
  EXPECT_THROW(apply_override(c, "attack.lambda1"), ConfigError);
  EXPECT_THROW(apply_override(c, "attack.mode=both"), ConfigError);
  c.lambda2 = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, CanonicalFormRoundTrips) {
  auto c = small_config();
  c.k = 5;
  c.mode = AttackMode::multi_target;
  c.arch.hidden = {24};
  const auto back = config_from_canonical(canonical_config(c));
  EXPECT_EQ(canonical_config(back), canonical_config(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, OverrideWins) {
  ExperimentConfig c;
  apply_override(c, "attack.lambda2 = 100");
  apply_override(c, "experiment.trials=4");
  EXPECT_EQ(c.lambda2, 100.0);
  EXPECT_EQ(c.trials, 4u);
  EXPECT_EQ(get_config_value(c, "attack.lambda2"), "100");
}

TEST(Config, HashChangesExactlyWithSemanticKeys) {
  const ExperimentConfig base;
  const auto h0 = config_hash(base);
  const std::vector<std::string> candidates = {"7",    "0.25",  "true",       "false",       "x.csv", "relu",
                                               "leaky_relu", "all_rivals", "multi", "16,8", "somewhere"};
  for (const auto &key : detail::config_keys()) {
    ExperimentConfig c = base;
    const auto before = key.get(base);
    bool changed = false;
    for (const auto &v : candidates) {
      try {
        key.set(c, v);
      } catch (const ConfigError &) {
        continue;
      }
      if (key.get(c) != before) {
        changed = true;
        break;
      }
    }
    ASSERT_TRUE(changed) << key.name;
    EXPECT_EQ(config_hash(c) != h0, key.semantic) << key.name;
  }
}

// Target selection -----------------------------------------------------------------

TEST(Targets, WithoutReplacementAndTargetDiffersFromSource) {
  const auto &v = blob_victim();
  const auto sel = select_targets(v.model, v.data.test, 40, 5);
  ASSERT_EQ(sel.trials.size(), 40u);
  std::set<std::size_t> seen;
  for (const auto &t : sel.trials) {
    ASSERT_EQ(t.size(), 1u);
    const auto &g = t[0];
    EXPECT_TRUE(seen.insert(g.sample).second);
    EXPECT_NE(g.source, g.target);
    EXPECT_LT(g.target, 4u);
    EXPECT_EQ(g.source, static_cast<std::size_t>(v.data.test.labels[g.sample]));
    EXPECT_EQ(predict(v.data.test.features->row(g.sample), v.model.fc_bits, v.model.fc_quant), g.source);
  }
}

TEST(Targets, DeterministicPerSeed) {
  const auto &v = blob_victim();
  EXPECT_EQ(select_targets(v.model, v.data.test, 10, 5).trials, select_targets(v.model, v.data.test, 10, 5).trials);
  EXPECT_NE(select_targets(v.model, v.data.test, 10, 5).trials, select_targets(v.model, v.data.test, 10, 6).trials);
}

TEST(Targets, TargetsRoughlyUniform) {
  const auto &v = blob_victim();
  const auto n = v.data.test.size() * 9 / 10;
  const auto sel = select_targets(v.model, v.data.test, n, 2);
  std::vector<std::size_t> offset(3, 0);
  for (const auto &t : sel.trials) ++offset[(t[0].target + 4 - t[0].source) % 4 - 1];
  for (auto c : offset) EXPECT_NEAR(static_cast<double>(c) / static_cast<double>(n), 1.0 / 3.0, 0.12);
}

TEST(Targets, GridCoversEveryOrderedPair) {
  const auto &v = blob_victim();
  const auto sel = select_targets(v.model, v.data.test, 1, 5, true);
  ASSERT_EQ(sel.trials.size(), 12u);
  std::set<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto &t : sel.trials) pairs.insert({t[0].source, t[0].target});
  EXPECT_EQ(pairs.size(), 12u);
  EXPECT_TRUE(sel.warnings.empty());
}

TEST(Targets, GridSkipsClassWithoutCorrectSample) {
  const auto &v = blob_victim();
  Dataset test = v.data.test;
  // Relabel every class-2 point as class 3: none of them is classified correctly now.
  for (auto &l : test.labels)
    if (l == 2) l = 3;
  const auto sel = select_targets(v.model, test, 1, 5, true);
  ASSERT_EQ(sel.warnings.size(), 1u);
  EXPECT_NE(sel.warnings[0].find("class 2"), std::string::npos);
  EXPECT_EQ(sel.trials.size(), 9u);
  for (const auto &t : sel.trials) EXPECT_NE(t[0].source, 2u);
}

TEST(Targets, TooManyTrialsIsAConfigError) {
  const auto &v = blob_victim();
  EXPECT_THROW(select_targets(v.model, v.data.test, v.data.test.size() + 1, 5), ConfigError);
}

TEST(Targets, GoalSetsUseDisjointClasses) {
  const auto &v = blob_victim();
  const auto sel = select_goal_sets(v.model, v.data.test, 20, 2, 3);
  ASSERT_EQ(sel.trials.size(), 20u);
  for (const auto &t : sel.trials) {
    ASSERT_EQ(t.size(), 2u);
    std::set<std::size_t> classes{t[0].source, t[0].target, t[1].source, t[1].target};
    EXPECT_EQ(classes.size(), 4u);
  }
  EXPECT_THROW(select_goal_sets(v.model, v.data.test, 1, 3, 3), ConfigError);
}

TEST(Aux, DisjointFromFineTuningSet) {
  const auto perm = train_permutation(500, 9);
  std::set<std::size_t> all(perm.begin(), perm.end());
  EXPECT_EQ(all.size(), 500u);
  EXPECT_EQ(*all.rbegin(), 499u);
  const auto &v = blob_victim();
  EXPECT_EQ(aux_set(v, 128, 1).size(), 128u);
  EXPECT_THROW(aux_set(v, v.data.train.size() + 1, 1), ConfigError);
}

// Aggregates -----------------------------------------------------------------------

TEST(Aggregates, HandComputed) {
  const std::vector<TrialReport> trials = {fake_trial(0, true, 1, 0.9, 0.8), fake_trial(1, false, 0, 0, 0),
                                           fake_trial(2, true, 3, 0.7, 0.6), fake_trial(3, true, 1, 0.8, 0.7)};
  const auto a = compute_aggregates(trials);
  EXPECT_EQ(a.trials, 4u);
  EXPECT_EQ(a.successes, 3u);
  EXPECT_EQ(a.single_flip_successes, 2u);
  EXPECT_EQ(a.asr, 0.75);
  EXPECT_EQ(a.n_flip.n, 3u);
  EXPECT_DOUBLE_EQ(a.n_flip.mean, 5.0 / 3.0);
  // Sample standard deviation of {1, 3, 1}.
  EXPECT_DOUBLE_EQ(a.n_flip.std, std::sqrt((2.0 * 4.0 / 9.0 + 16.0 / 9.0) / 2.0));
  EXPECT_DOUBLE_EQ(a.acc_released.mean, 0.8);
  EXPECT_DOUBLE_EQ(a.deployment_distance.mean, 5.0 / 3.0 + 2.0);
}

TEST(Aggregates, FailuresNeverEnterFlipStatistics) {
  std::vector<TrialReport> trials = {fake_trial(0, false, 0, 0, 0), fake_trial(1, false, 0, 0, 0)};
  auto a = compute_aggregates(trials);
  EXPECT_EQ(a.asr, 0.0);
  EXPECT_EQ(a.n_flip.n, 0u);
  trials[0].n_flip = 40;  // stale value on a failed record
  EXPECT_EQ(compute_aggregates(trials), a);
}

TEST(Aggregates, SingleValueHasZeroSpread) {
  const auto a = compute_aggregates({fake_trial(0, true, 2, 0.9, 0.9)});
  EXPECT_EQ(a.n_flip.std, 0.0);
  EXPECT_EQ(a.n_flip.mean, 2.0);
}

// Batches ------------------------------------------------------------------------

namespace {

const BatchReport &shared_batch() {
  static const BatchReport rep = [] {
    const auto cfg = small_config(4);
    return run_trials(cfg, blob_victim(), select_for_config(cfg, blob_victim()));
  }();
  return rep;
}

}  // namespace

TEST(Batch, ReportIsSelfConsistent) {
  const auto &rep = shared_batch();
  EXPECT_EQ(rep.trials.size(), 4u);
  EXPECT_EQ(rep.aggregates, compute_aggregates(rep.trials));
  EXPECT_EQ(rep.config_hash, config_hash(small_config(4)));
  EXPECT_EQ(rep.dataset_id, blob_victim().model.dataset_id);
  EXPECT_GE(rep.aggregates.successes, 1u);
  for (const auto &t : rep.trials) {
    if (!t.success) continue;
    EXPECT_EQ(t.flip_diff.n_flip(), t.n_flip);
    EXPECT_EQ(t.release_distance, t.released_diff.n_flip());
    EXPECT_EQ(t.deployment_distance,
              bit_distance(blob_victim().model.fc_bits, flipped_bits(blob_victim().model, t)));
    EXPECT_GE(t.n_flip, 1u);
  }
  EXPECT_TRUE(reverify_report(rep, blob_victim().model, blob_victim().data.test).empty());
}

TEST(Batch, JsonRoundTrip) {
  const auto &rep = shared_batch();
  const auto text = report_to_string(rep);
  const auto back = report_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(report_to_string(back), text);
  EXPECT_EQ(back.aggregates, rep.aggregates);
  EXPECT_EQ(text.find("wall"), std::string::npos);
}

TEST(Batch, ReverifyCatchesTampering) {
  auto rep = shared_batch();
  std::size_t victim_trial = rep.trials.size();
  for (auto &t : rep.trials) {
    if (t.success) {
      t.flip_diff.coords.clear();
      t.n_flip = 0;
      victim_trial = t.trial;
      break;
    }
  }
  ASSERT_LT(victim_trial, rep.trials.size());
  EXPECT_EQ(reverify_report(rep, blob_victim().model, blob_victim().data.test), std::vector<std::size_t>{victim_trial});
}

TEST(Batch, SameSeedGivesByteIdenticalReports) {
  auto cfg = small_config(1);
  const auto a = report_to_string(run_batch(cfg));
  const auto b = report_to_string(run_batch(cfg));
  EXPECT_EQ(a, b);
}

TEST(Batch, IndependentOfThreadCount) {
  const auto cfg = small_config(3);
  const auto &v = blob_victim();
  const auto targets = select_for_config(cfg, v);
  std::string one, three;
  {
    ThreadEnv env("1");
    one = report_to_string(run_trials(cfg, v, targets));
  }
  {
    ThreadEnv env("3");
    three = report_to_string(run_trials(cfg, v, targets));
  }
  EXPECT_EQ(one, three);
}

TEST(Batch, NoAttackWeightMeansNoSuccess) {
  auto cfg = small_config(4);
  cfg.lambda1 = 0.0;
  cfg.solver.max_iters = 400;
  const auto rep = run_trials(cfg, blob_victim(), select_for_config(cfg, blob_victim()));
  EXPECT_EQ(rep.aggregates.successes, 0u);
}

TEST(Batch, DivergenceIsRecordedNotFatal) {
  auto cfg = small_config(2);
  cfg.solver.step_size = 50.0;
  cfg.solver.rho_cap = 1e8;
  const auto rep = run_trials(cfg, blob_victim(), select_for_config(cfg, blob_victim()));
  ASSERT_EQ(rep.trials.size(), 2u);
  for (const auto &t : rep.trials) {
    EXPECT_FALSE(t.success);
    EXPECT_EQ(t.termination, "diverged");
    EXPECT_FALSE(t.error.empty());
  }
  EXPECT_EQ(rep.aggregates.asr, 0.0);
}

TEST(Batch, OutputsOnDisk) {
  const auto dir = std::filesystem::temp_directory_path() / "tba_harness_outputs";
  std::filesystem::remove_all(dir);
  auto cfg = small_config(1);
  cfg.solver.record_trace = true;
  BatchTiming timing;
  const auto rep = run_trials(cfg, blob_victim(), select_for_config(cfg, blob_victim()), &timing);
  write_batch_outputs(dir.string(), rep, &timing);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "timing.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "traces" / "trial_0000.csv"));
  EXPECT_EQ(report_to_string(read_report((dir / "report.json").string())), report_to_string(rep));
  EXPECT_EQ(timing.trial_seconds.size(), 1u);
  std::filesystem::remove_all(dir);
}

// Sweeps ---------------------------------------------------------------------------

TEST(Sweep, SingleValueMatchesBatch) {
  auto cfg = small_config(2);
  const auto &v = blob_victim();
  const auto targets = select_for_config(cfg, v);
  const auto s = sweep(cfg, v, targets, "lambda2", {"30"});
  ASSERT_EQ(s.rows.size(), 1u);
  EXPECT_EQ(report_to_string(s.rows[0].report), report_to_string(run_trials(cfg, v, targets)));
}

TEST(Sweep, CsvHasOneRowPerValue) {
  auto cfg = small_config(1);
  const auto &v = blob_victim();
  const auto s = sweep(cfg, v, select_for_config(cfg, v), "k", {"0", "5"});
  std::ostringstream out;
  write_sweep_csv(s, out);
  std::istringstream in(out.str());
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 3u);
  EXPECT_EQ(out.str().substr(0, 16), "parameter,value,");
  EXPECT_NE(s.rows[0].report.config_hash, s.rows[1].report.config_hash);
  EXPECT_THROW(sweep(cfg, v, select_for_config(cfg, v), "eta", {"1"}), ConfigError);
}

// Greedy comparison and defense -----------------------------------------------------

TEST(Defense, ZeroIterationsLeavesEveryAttackInPlace) {
  auto cfg = small_config(4);
  cfg.defense.ft_iters = 0;
  const auto d = finetune_defense_eval(cfg, blob_victim(), shared_batch());
  EXPECT_DOUBLE_EQ(d.residual_asr, d.pre_asr);
  EXPECT_EQ(d.trials, shared_batch().trials.size());
}

TEST(Defense, FineTuningKeepsStepAndAccuracy) {
  const auto &v = blob_victim();
  const auto perm = train_permutation(v.data.train.size(), 1);
  const auto ft = v.data.train.subset(std::span<const std::size_t>(perm).subspan(128, 128));
  const auto tuned = finetune_final_layer(v.model, v.model.fc_bits, ft, 50, 0.05);
  EXPECT_EQ(tuned.shape(), v.model.fc_bits.shape());
  const double before = accuracy(v.model, v.data.test);
  const double after = accuracy(*v.data.test.features, v.data.test.labels, tuned, v.model.fc_quant);
  EXPECT_GE(after, before - 0.05);
}

TEST(Defense, NeedsEnoughHeldOutSamples) {
  auto cfg = small_config(1);
  cfg.defense.ft_samples = blob_victim().data.train.size();
  EXPECT_THROW(finetune_defense_eval(cfg, blob_victim(), shared_batch()), ConfigError);
}

TEST(GreedyComparison, OneRowPerSuccessfulTrial) {
  const auto cfg = small_config(4);
  const auto rows = greedy_comparison(cfg, blob_victim(), shared_batch());
  EXPECT_EQ(rows.size(), shared_batch().aggregates.successes);
  for (const auto &r : rows) {
    EXPECT_LE(r.original_n_flip, cfg.defense.greedy_budget);
    EXPECT_LE(r.released_n_flip, cfg.defense.greedy_budget);
  }
}

// Victims --------------------------------------------------------------------------

TEST(Victim, CheckpointReloadRegeneratesTheSameData) {
  const auto dir = std::filesystem::temp_directory_path() / "tba_harness_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "v.ckpt").string();
  save_checkpoint(blob_victim().model, path);
  ExperimentConfig cfg;
  cfg.checkpoint = path;
  cfg.blobs.separation = 1.0;  // ignored: data comes from the checkpoint's dataset id
  const auto v = prepare_victim(cfg);
  EXPECT_EQ(v.model, blob_victim().model);
  EXPECT_EQ(v.data.test.inputs, blob_victim().data.test.inputs);
  std::filesystem::remove_all(dir);
}

TEST(Victim, DefaultVictimIsAccurate) {
  const auto &v = blob_victim();
  EXPECT_GE(accuracy(v.model, v.data.test), 0.95);
  EXPECT_EQ(v.model.class_count(), 4u);
}
