// tba: command-line front end for the bit-flip attack library.
//
// Exit codes: 0 success, 1 usage error, 2 experiment failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tba/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kFailure = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
};

void add_common(CLI::App *sub, CommonOptions &opt) {
  sub->add_option("-c,--config", opt.config_path, "Experiment config file (key = value sections)");
  sub->add_option("-s,--set", opt.overrides, "Override a config key, e.g. --set attack.k=5")->take_all();
  sub->add_option("-o,--output-dir", opt.output_dir, "Directory for reports and traces");
}

tba::ExperimentConfig build_config(const CommonOptions &opt) {
  tba::ExperimentConfig cfg = opt.config_path.empty() ? tba::ExperimentConfig{} : tba::load_config(opt.config_path);
  for (const auto &o : opt.overrides) tba::apply_override(cfg, o);
  if (!opt.output_dir.empty()) cfg.output_dir = opt.output_dir;
  cfg.validate();
  return cfg;
}

void stamp(const tba::ExperimentConfig &cfg) {
  std::cout << "config_hash " << tba::config_hash(cfg) << "  seed " << cfg.seed << "\n";
}

std::vector<std::string> split_list(const std::string &s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = tba::detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void print_aggregates(const tba::BatchReport &r) {
  const auto &a = r.aggregates;
  std::printf("trials %zu  successes %zu  ASR %.4f\n", a.trials, a.successes, a.asr);
  std::printf("N_flip %.3f +- %.3f  (N_flip = 1 in %zu)\n", a.n_flip.mean, a.n_flip.std, a.single_flip_successes);
  std::printf("ACC(M_o) %.4f  ACC(M_r) %.4f +- %.4f  ACC(M_f) %.4f +- %.4f\n", r.acc_original, a.acc_released.mean,
              a.acc_released.std, a.acc_flipped.mean, a.acc_flipped.std);
  std::printf("M_o -> M_f distance %.3f +- %.3f\n", a.deployment_distance.mean, a.deployment_distance.std);
  for (const auto &w : r.warnings) std::printf("warning: %s\n", w.c_str());
}

// train ----------------------------------------------------------------------

struct TrainArgs {
  CommonOptions common;
  std::string checkpoint;
};

int cmd_train(const TrainArgs &a) {
  auto cfg = build_config(a.common);
  if (!cfg.checkpoint.empty()) throw UsageError("train: model.checkpoint must be empty (it names an input)");
  stamp(cfg);
  const auto v = tba::prepare_victim(cfg);
  const std::string path = a.checkpoint.empty() ? cfg.output_dir + "/victim.ckpt" : a.checkpoint;
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  tba::save_checkpoint(v.model, path);
  const nlohmann::json j = {{"config_hash", tba::config_hash(cfg)},
                            {"seed", cfg.seed},
                            {"dataset_id", v.model.dataset_id},
                            {"train_accuracy", tba::accuracy(v.model, v.data.train)},
                            {"test_accuracy", tba::accuracy(v.model, v.data.test)},
                            {"checkpoint", path}};
  tba::write_text(path + ".json", j.dump(2) + "\n");
  std::printf("train acc %.4f  test acc %.4f  -> %s\n", j["train_accuracy"].get<double>(),
              j["test_accuracy"].get<double>(), path.c_str());
  return kOk;
}

// attack ---------------------------------------------------------------------

struct AttackArgs {
  CommonOptions common;
  std::string checkpoint;
  std::size_t target_idx = 0;
  std::optional<std::size_t> target_class;
  std::optional<double> lambda1, lambda2, k;
  std::string output;
};

int cmd_attack(const AttackArgs &a) {
  auto cfg = build_config(a.common);
  if (!a.checkpoint.empty()) cfg.checkpoint = a.checkpoint;
  if (a.lambda1) cfg.lambda1 = *a.lambda1;
  if (a.lambda2) cfg.lambda2 = *a.lambda2;
  if (a.k) cfg.k = *a.k;
  cfg.validate();
  stamp(cfg);
  const auto v = tba::prepare_victim(cfg);
  if (a.target_idx >= v.data.test.size()) throw UsageError("attack: --target-idx out of range");
  const auto feats = v.data.test.features->row(a.target_idx);
  const auto s = tba::predict(feats, v.model.fc_bits, v.model.fc_quant);
  const auto K = v.model.class_count();
  const std::size_t t = a.target_class ? *a.target_class : (s + 1) % K;
  if (t >= K || t == s) throw UsageError("attack: --t must be a class different from the prediction " + std::to_string(s));

  const auto aux = tba::aux_set(v, cfg.aux_size, cfg.seed);
  const auto tr = tba::run_trial(cfg, v, {tba::AttackTarget{a.target_idx, s, t}}, aux);
  const nlohmann::json out = {{"config_hash", tba::config_hash(cfg)},
                              {"seed", cfg.seed},
                              {"config", tba::canonical_config(cfg)},
                              {"dataset_id", v.model.dataset_id},
                              {"trial", tba::to_json(tr)}};
  const std::string path = a.output.empty() ? cfg.output_dir + "/attack.json" : a.output;
  tba::write_text(path, out.dump(2) + "\n");
  if (!tr.trace.empty()) tba::write_trace_csv(tr.trace, path + ".trace.csv");
  std::printf("sample %zu  %zu -> %zu  success %s  N_flip %zu  iterations %zu (%s)  -> %s\n", a.target_idx, s, t,
              tr.success ? "yes" : "no", tr.n_flip, tr.iterations, tr.termination.c_str(), path.c_str());
  if (!tr.error.empty()) {
    std::fprintf(stderr, "attack: %s\n", tr.error.c_str());
    return kFailure;
  }
  return kOk;
}

// batch ----------------------------------------------------------------------

int cmd_batch(const CommonOptions &c) {
  const auto cfg = build_config(c);
  stamp(cfg);
  tba::BatchTiming timing;
  const auto rep = tba::run_batch(cfg, &timing);
  tba::write_batch_outputs(cfg.output_dir, rep, &timing);
  print_aggregates(rep);
  std::printf("report -> %s/report.json\n", cfg.output_dir.c_str());
  return kOk;
}

// sweep ----------------------------------------------------------------------

struct SweepArgs {
  CommonOptions common;
  std::string parameter;
  std::string values;
};

int cmd_sweep(const SweepArgs &a) {
  const auto cfg = build_config(a.common);
  const auto values = split_list(a.values);
  if (values.empty()) throw UsageError("sweep: --values is empty");
  stamp(cfg);
  const auto result = tba::sweep(cfg, a.parameter, values);
  std::filesystem::create_directories(cfg.output_dir);
  const std::string csv = cfg.output_dir + "/sweep_" + a.parameter + ".csv";
  std::ofstream out(csv);
  if (!out) throw tba::Error("cannot open " + csv);
  tba::write_sweep_csv(result, out);
  for (const auto &row : result.rows) {
    tba::write_text(cfg.output_dir + "/sweep_" + a.parameter + "_" + row.value + ".json",
                    tba::report_to_string(row.report));
    const auto &g = row.report.aggregates;
    std::printf("%s = %-8s ASR %.3f  N_flip %.3f +- %.3f\n", a.parameter.c_str(), row.value.c_str(), g.asr,
                g.n_flip.mean, g.n_flip.std);
  }
  std::printf("table -> %s\n", csv.c_str());
  return kOk;
}

// oracle ---------------------------------------------------------------------

struct OracleArgs {
  CommonOptions common;
  std::string checkpoint;
  std::size_t max_flips = 1;
  std::string result;
  std::optional<std::size_t> target_idx;
  std::optional<std::size_t> target_class;
};

int cmd_oracle(const OracleArgs &a) {
  auto cfg = build_config(a.common);
  if (!a.checkpoint.empty()) cfg.checkpoint = a.checkpoint;
  stamp(cfg);
  const auto v = tba::prepare_victim(cfg);

  // With --result, enumerate on the released model of that attack and check its flip set.
  std::optional<tba::TrialReport> trial;
  if (!a.result.empty()) {
    std::ifstream in(a.result);
    if (!in) throw UsageError("oracle: cannot open " + a.result);
    const auto j = nlohmann::json::parse(in);
    trial = tba::trial_from_json(j.at("trial"));
    if (trial->goals.size() != 1) throw UsageError("oracle: result must hold a single-goal attack");
  }
  std::size_t idx = 0, t = 0;
  if (trial) {
    idx = trial->goals[0].sample;
    t = trial->goals[0].target;
  } else {
    if (!a.target_idx || !a.target_class) throw UsageError("oracle: need --result or both --target-idx and --t");
    idx = *a.target_idx;
    t = *a.target_class;
  }
  if (idx >= v.data.test.size()) throw UsageError("oracle: target index out of range");
  const auto model = trial ? v.model.with_fc(tba::released_bits(v.model, *trial)) : v.model;
  const auto feats = v.data.test.features->row(idx);
  const auto s = tba::predict(feats, model.fc_bits, model.fc_quant);
  const auto sets = tba::brute_force_flips(model, feats, s, t, a.max_flips);
  std::printf("sample %zu  %zu -> %zu  flip sets of size <= %zu: %zu\n", idx, s, t, a.max_flips, sets.size());
  if (!trial) {
    for (const auto &f : sets) {
      std::printf(" ");
      for (const auto &c : f.coords) std::printf(" (%zu,%zu,%zu)", c.row, c.feature, c.bit);
      std::printf("\n");
    }
    return kOk;
  }
  if (!trial->success) {
    std::printf("stored attack failed; nothing to confirm\n");
    return kFailure;
  }
  const bool found = std::find(sets.begin(), sets.end(), trial->flip_diff) != sets.end();
  std::printf("stored flip set (N_flip %zu) %s the oracle enumeration\n", trial->n_flip,
              found ? "is in" : "is NOT in");
  return found ? kOk : kFailure;
}

// defense --------------------------------------------------------------------

struct DefenseArgs {
  CommonOptions common;
  std::string report;
};

int cmd_defense(const DefenseArgs &a) {
  auto cfg = build_config(a.common);
  stamp(cfg);
  const auto v = tba::prepare_victim(cfg);
  tba::BatchReport rep;
  if (a.report.empty()) {
    rep = tba::run_trials(cfg, v, tba::select_for_config(cfg, v));
  } else {
    rep = tba::read_report(a.report);
    if (rep.dataset_id != v.model.dataset_id) throw UsageError("defense: report was produced on a different dataset");
  }
  const auto d = tba::finetune_defense_eval(cfg, v, rep);
  tba::write_text(cfg.output_dir + "/defense.json", tba::to_json(d).dump(2) + "\n");
  std::printf("pre-defense ASR %.3f  replayed ASR after %zu fine-tuning steps %.3f\n", d.pre_asr, d.ft_iters,
              d.residual_asr);
  std::printf("greedy re-attack success %.3f  n_flip %.3f  (greedy on M_o: %.3f)\n", d.reattack_success_rate,
              d.reattack_n_flip.mean, d.original_n_flip.mean);
  return kOk;
}

// report ---------------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> paths;
  bool verify = false;
};

int cmd_report(const ReportArgs &a) {
  int rc = kOk;
  for (const auto &path : a.paths) {
    const auto rep = tba::read_report(path);
    std::printf("%s  config_hash %s  seed %llu  dataset %s\n", path.c_str(), rep.config_hash.c_str(),
                static_cast<unsigned long long>(rep.seed), rep.dataset_id.c_str());
    const auto again = tba::compute_aggregates(rep.trials);
    if (!(again == rep.aggregates)) {
      std::printf("  aggregates do not match the trial records\n");
      rc = kFailure;
    }
    print_aggregates(rep);
    if (a.verify) {
      const auto cfg = tba::config_from_canonical(rep.config);
      if (tba::config_hash(cfg) != rep.config_hash) {
        std::printf("  stored config does not match config_hash\n");
        rc = kFailure;
      }
      const auto v = tba::prepare_victim(cfg);
      const auto bad = tba::reverify_report(rep, v.model, v.data.test);
      std::printf("  re-verification: %zu of %zu successes failed\n", bad.size(), rep.aggregates.successes);
      if (!bad.empty()) rc = kFailure;
    }
  }
  return rc;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Training-assisted bit-flip attack toolkit"};
  app.require_subcommand(1);

  TrainArgs train;
  auto *train_cmd = app.add_subcommand("train", "Train a victim and write its checkpoint");
  add_common(train_cmd, train.common);
  train_cmd->add_option("--checkpoint", train.checkpoint, "Output checkpoint path (default <output-dir>/victim.ckpt)");

  AttackArgs attack;
  auto *attack_cmd = app.add_subcommand("attack", "Attack one test sample");
  add_common(attack_cmd, attack.common);
  attack_cmd->add_option("--checkpoint", attack.checkpoint, "Victim checkpoint (trains one if omitted)");
  attack_cmd->add_option("--target-idx", attack.target_idx, "Index of x* in the test split")->required();
  attack_cmd->add_option("--t", attack.target_class, "Target class (default: next class)");
  attack_cmd->add_option("--lambda1", attack.lambda1, "Weight of the attack hinge terms");
  attack_cmd->add_option("--lambda2", attack.lambda2, "Weight of the distance term");
  attack_cmd->add_option("--k", attack.k, "Hinge margin");
  attack_cmd->add_option("--output", attack.output, "Result JSON path (default <output-dir>/attack.json)");

  CommonOptions batch;
  auto *batch_cmd = app.add_subcommand("batch", "Run a batch of attack trials");
  add_common(batch_cmd, batch);

  SweepArgs sweep;
  auto *sweep_cmd = app.add_subcommand("sweep", "Sweep one attack hyperparameter");
  add_common(sweep_cmd, sweep.common);
  sweep_cmd->add_option("--param", sweep.parameter, "lambda1 | lambda2 | k | aux_size")
      ->required()
      ->check(CLI::IsMember(tba::sweep_parameters()));
  sweep_cmd->add_option("--values", sweep.values, "Comma-separated values")->required();

  OracleArgs oracle;
  auto *oracle_cmd = app.add_subcommand("oracle", "Enumerate every flip set up to a size");
  add_common(oracle_cmd, oracle.common);
  oracle_cmd->add_option("--checkpoint", oracle.checkpoint, "Victim checkpoint");
  oracle_cmd->add_option("--max-flips", oracle.max_flips, "1 or 2")->check(CLI::Range(1, 2));
  oracle_cmd->add_option("--result", oracle.result, "Attack result JSON whose flip set is checked");
  oracle_cmd->add_option("--target-idx", oracle.target_idx, "Index of x* in the test split");
  oracle_cmd->add_option("--t", oracle.target_class, "Target class");

  DefenseArgs defense;
  auto *defense_cmd = app.add_subcommand("defense", "Fine-tune released models and re-attack them");
  add_common(defense_cmd, defense.common);
  defense_cmd->add_option("--report", defense.report, "Batch report to evaluate (runs a batch if omitted)");

  ReportArgs report;
  auto *report_cmd = app.add_subcommand("report", "Summarise batch reports");
  report_cmd->add_option("reports", report.paths, "report.json files")->required();
  report_cmd->add_flag("--verify", report.verify, "Rebuild every model and re-check each success");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*attack_cmd) return cmd_attack(attack);
    if (*batch_cmd) return cmd_batch(batch);
    if (*sweep_cmd) return cmd_sweep(sweep);
    if (*oracle_cmd) return cmd_oracle(oracle);
    if (*defense_cmd) return cmd_defense(defense);
    if (*report_cmd) return cmd_report(report);
  } catch (const UsageError &e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const tba::ConfigError &e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kUsage;
}
