#ifndef TBA_SOLVER_HPP
#define TBA_SOLVER_HPP

// lp-Box ADMM over the relaxed (b, bhat) pair.
//
// Each outer iteration runs, in order:
//   1. inner_rounds gradient steps on bhat
//   2. u1 <- P_box(bhat + z1/rho1),  u2 <- P_sphere(bhat + z2/rho2)
//   3. inner_rounds gradient steps on b
//   4. u3 <- P_box(b + z3/rho3),     u4 <- P_sphere(b + z4/rho4)
//   5. z_j <- z_j + rho_j (x_j - u_j), rho_j <- min(rho_j * growth, cap)
// followed by a candidate check on the binarized pair.

#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tba/errors.hpp"
#include "tba/model.hpp"
#include "tba/objective.hpp"
#include "tba/quant.hpp"
#include "tba/tensor.hpp"

namespace tba {

struct SolverConfig {
  double step_size = 0.005;  // eta
  int inner_rounds = 3;
  std::size_t max_iters = 2000;
  std::size_t patience = 300;
  double rho_init = 1e-4;
  double rho_growth = 1.01;
  double rho_cap = 50.0;
  double constraint_tol = 1e-4;
  bool record_trace = false;

  void validate() const {
    if (!(step_size >= 0.0)) throw ConfigError("solver: step size must be nonnegative");
    if (inner_rounds < 0) throw ConfigError("solver: inner_rounds must be nonnegative");
    if (max_iters == 0) throw ConfigError("solver: max_iters must be positive");
    if (patience == 0 || patience > max_iters) throw ConfigError("solver: patience must lie in [1, max_iters]");
    if (!(rho_init > 0.0) || !(rho_cap >= rho_init)) throw ConfigError("solver: need 0 < rho_init <= rho_cap");
    if (!(rho_growth >= 1.0)) throw ConfigError("solver: rho_growth must be >= 1");
    if (!(constraint_tol > 0.0)) throw ConfigError("solver: constraint_tol must be positive");
  }
};

struct CandidatePair {
  BitTensor bits_r;  // released, variable rows only
  BitTensor bits_f;  // flipped, variable rows only
  std::size_t distance = 0;
  std::size_t iteration = 0;
};

enum class TracePhase { bhat, b };

struct TraceRecord {
  std::size_t iter = 0;
  TracePhase phase = TracePhase::bhat;
  LossBreakdown losses;
  double rho1 = 0.0;
  std::optional<std::size_t> best_distance;
};

struct SolverState {
  AdmmVariables vars;
  std::size_t iter = 0;
  std::optional<CandidatePair> best;
  std::size_t since_improvement = 0;
  std::vector<TraceRecord> trace;
};

enum class Termination { max_iters, patience, converged };

inline const char *to_string(Termination t) {
  switch (t) {
    case Termination::max_iters: return "max_iters";
    case Termination::patience: return "patience";
    case Termination::converged: return "converged";
  }
  return "unknown";
}

struct AttackResult {
  bool success = false;
  std::vector<std::size_t> rows;  // attacked class rows
  BitTensor released;             // full (K, V, Q) layer of M_r
  BitTensor flipped;              // full (K, V, Q) layer of M_f
  std::size_t n_flip = 0;
  std::optional<double> acc_released;
  std::optional<double> acc_flipped;
  std::optional<double> acc_original;
  std::size_t iterations = 0;
  std::size_t candidate_iteration = 0;
  Termination reason = Termination::max_iters;
  double wall_seconds = 0.0;
  std::vector<TraceRecord> trace;
};

class SolverDiverged : public Error {
 public:
  SolverDiverged(const std::string &what, std::vector<TraceRecord> trace)
      : Error(what), trace_(std::move(trace)) {}
  const std::vector<TraceRecord> &trace() const noexcept { return trace_; }

 private:
  std::vector<TraceRecord> trace_;
};

// ---------------------------------------------------------------------------
// Projections

inline RelaxedTensor project_box(const RelaxedTensor &x) {
  RelaxedTensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::max(std::min(x[i], 1.0), 0.0);
  return out;
}

/// Projection onto the sphere ||y - 1/2||^2 = n/4: y = sqrt(n)/2 * xbar/||xbar|| + 1/2.
/// When x sits at the centre (||xbar|| < 1e-12) the direction is undefined and
/// `fallback` is returned (the all-ones vertex if none is given).
inline RelaxedTensor project_sphere(const RelaxedTensor &x, const RelaxedTensor *fallback = nullptr) {
  const double n = static_cast<double>(x.size());
  double norm_sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = x[i] - 0.5;
    norm_sq += c * c;
  }
  const double norm = std::sqrt(norm_sq);
  if (norm < 1e-12) {
    if (fallback) {
      require_same_shape(fallback->shape(), x.shape(), "project_sphere fallback");
      return *fallback;
    }
    return RelaxedTensor(x.shape(), 1.0);
  }
  const double scale = std::sqrt(n) / 2.0 / norm;
  RelaxedTensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - 0.5) * scale + 0.5;
  return out;
}

/// ||x - 1/2||^2 - n/4.
inline double sphere_violation(const RelaxedTensor &x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = x[i] - 0.5;
    s += c * c;
  }
  return s - static_cast<double>(x.size()) / 4.0;
}

// ---------------------------------------------------------------------------
// ADMM steps

/// x <- x - eta * grad(x), `rounds` times.
template <typename GradFn>
void descend(RelaxedTensor &x, GradFn &&grad, double eta, int rounds) {
  for (int r = 0; r < rounds; ++r) {
    const RelaxedTensor g = grad();
    require_same_shape(g.shape(), x.shape(), "descend");
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= eta * g[i];
  }
}

inline void admm_step1_update_bhat(SolverState &s, const SolverConfig &cfg, const AttackProblem &problem) {
  descend(s.vars.bhat, [&] { return grad_bhat(s.vars, problem); }, cfg.step_size, cfg.inner_rounds);
}

namespace detail {

inline RelaxedTensor shifted(const RelaxedTensor &x, const RelaxedTensor &z, double rho) {
  RelaxedTensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + z[i] / rho;
  return out;
}

}  // namespace detail

inline void admm_step2_update_u12(SolverState &s, const SolverConfig &) {
  auto &v = s.vars;
  v.u[0] = project_box(detail::shifted(v.bhat, v.z[0], v.rho[0]));
  v.u[1] = project_sphere(detail::shifted(v.bhat, v.z[1], v.rho[1]), &v.u[1]);
}

inline void admm_step3_update_b(SolverState &s, const SolverConfig &cfg, const AttackProblem &problem) {
  descend(s.vars.b, [&] { return grad_b(s.vars, problem); }, cfg.step_size, cfg.inner_rounds);
}

inline void admm_step4_update_u34(SolverState &s, const SolverConfig &) {
  auto &v = s.vars;
  v.u[2] = project_box(detail::shifted(v.b, v.z[2], v.rho[2]));
  v.u[3] = project_sphere(detail::shifted(v.b, v.z[3], v.rho[3]), &v.u[3]);
}

inline void admm_step5_update_duals(SolverState &s, const SolverConfig &cfg) {
  auto &v = s.vars;
  for (std::size_t j = 0; j < 4; ++j) {
    const auto &x = v.partner(j);
    for (std::size_t i = 0; i < x.size(); ++i) v.z[j][i] += v.rho[j] * (x[i] - v.u[j][i]);
    v.rho[j] = std::min(v.rho[j] * cfg.rho_growth, cfg.rho_cap);
  }
}

/// True when every goal's sample is classified as its target (malicious = true) or as
/// its source (malicious = false) under the full layer `bits`.
inline bool goals_hold(const BitTensor &bits, const AttackProblem &problem, bool malicious) {
  for (std::size_t g = 0; g < problem.goal_count(); ++g) {
    const auto want = malicious ? problem.target(g) : problem.source(g);
    if (predict(problem.goal_features(g), bits, problem.quant()) != want) return false;
  }
  return true;
}

/// Check the binarized (b, bhat) pair and keep it if it is valid and strictly closer
/// than the stored candidate. Returns true on improvement.
inline bool record_candidate(SolverState &s, const AttackProblem &problem) {
  auto bits_f = binarize(s.vars.bhat);
  auto bits_r = binarize(s.vars.b);
  if (!goals_hold(problem.full_bits(bits_f), problem, true)) return false;
  if (!goals_hold(problem.full_bits(bits_r), problem, false)) return false;
  const auto d = bit_distance(bits_r, bits_f);
  if (s.best && d >= s.best->distance) return false;
  s.best = CandidatePair{std::move(bits_r), std::move(bits_f), d, s.iter};
  s.since_improvement = 0;
  return true;
}

inline SolverState initial_state(const AttackProblem &problem, const SolverConfig &cfg) {
  SolverState s;
  s.vars = initial_variables(problem.initial_bits(), cfg.rho_init);
  return s;
}

/// Independent check of an attack outcome on the full layers.
inline bool verify_pair(const VictimModel &model, const AttackSpec &spec, const BitTensor &released,
                        const BitTensor &flipped) {
  for (const auto &goal : spec.goals) {
    const auto f = extract_features(model, goal.input);
    if (predict(std::span<const double>(f), flipped, model.fc_quant) != goal.target) return false;
    if (predict(std::span<const double>(f), released, model.fc_quant) != goal.source) return false;
  }
  return true;
}

struct SolveOptions {
  const Dataset *test = nullptr;  // for ACC metrics; features are extracted if not cached
};

namespace detail {

inline bool all_finite(const RelaxedTensor &x) {
  for (double v : x.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

inline void push_trace(SolverState &s, TracePhase phase, const AttackProblem &problem) {
  TraceRecord rec;
  rec.iter = s.iter;
  rec.phase = phase;
  rec.losses = evaluate_losses(s.vars.b, s.vars.bhat, problem);
  rec.rho1 = s.vars.rho[0];
  if (s.best) rec.best_distance = s.best->distance;
  s.trace.push_back(rec);
}

inline void fill_accuracies(AttackResult &res, const VictimModel &model, const Dataset &test) {
  const Matrix feats = test.features ? *test.features : extract_features(model, test.inputs);
  res.acc_original = accuracy(feats, test.labels, model.fc_bits, model.fc_quant);
  if (res.success) {
    res.acc_released = accuracy(feats, test.labels, res.released, model.fc_quant);
    res.acc_flipped = accuracy(feats, test.labels, res.flipped, model.fc_quant);
  }
}

}  // namespace detail

/// Run the full ADMM attack. Throws SetupError if a goal's sample is not classified as
/// its source class by `model`, SolverDiverged on non-finite iterates.
inline AttackResult solve(const VictimModel &model, const AttackSpec &spec, const SolverConfig &cfg,
                          const SolveOptions &opts = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  const AttackProblem problem(model, spec);
  for (std::size_t g = 0; g < problem.goal_count(); ++g) {
    if (predict(problem.goal_features(g), model.fc_bits, model.fc_quant) != problem.source(g)) {
      throw SetupError("solve: goal " + std::to_string(g) + " sample is not classified as its source class");
    }
  }

  SolverState s = initial_state(problem, cfg);
  AttackResult res;
  res.reason = Termination::max_iters;
  for (s.iter = 0; s.iter < cfg.max_iters; ++s.iter) {
    admm_step1_update_bhat(s, cfg, problem);
    if (cfg.record_trace) detail::push_trace(s, TracePhase::bhat, problem);
    admm_step2_update_u12(s, cfg);
    admm_step3_update_b(s, cfg, problem);
    if (cfg.record_trace) detail::push_trace(s, TracePhase::b, problem);
    admm_step4_update_u34(s, cfg);
    admm_step5_update_duals(s, cfg);

    const bool finite = cfg.record_trace ? s.trace.back().losses.finite() && s.trace[s.trace.size() - 2].losses.finite()
                                         : detail::all_finite(s.vars.b) && detail::all_finite(s.vars.bhat);
    if (!finite) {
      throw SolverDiverged("solve: non-finite iterate at iteration " + std::to_string(s.iter), std::move(s.trace));
    }

    // Patience runs only once a candidate exists: candidates typically first appear
    // after rho has grown for several hundred iterations.
    if (!record_candidate(s, problem) && s.best) ++s.since_improvement;

    if (s.since_improvement >= cfg.patience) {
      res.reason = Termination::patience;
      ++s.iter;
      break;
    }
    bool converged = true;
    for (std::size_t j = 0; j < 4 && converged; ++j) converged = s.vars.residual_max_norm(j) < cfg.constraint_tol;
    if (converged) {
      res.reason = Termination::converged;
      ++s.iter;
      break;
    }
  }

  res.iterations = s.iter;
  res.rows.assign(problem.rows().begin(), problem.rows().end());
  if (s.best) {
    res.released = problem.full_bits(s.best->bits_r);
    res.flipped = problem.full_bits(s.best->bits_f);
    res.n_flip = bit_distance(res.released, res.flipped);
    res.candidate_iteration = s.best->iteration;
    res.success = verify_pair(model, spec, res.released, res.flipped) && res.n_flip == s.best->distance;
  } else {
    res.released = model.fc_bits;
    res.flipped = model.fc_bits;
  }
  if (opts.test && !opts.test->empty()) detail::fill_accuracies(res, model, *opts.test);
  res.trace = std::move(s.trace);
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// Multi-target variant: the whole final layer is optimised and a candidate must satisfy
/// every goal simultaneously.
inline AttackResult solve_multi(const VictimModel &model, AttackSpec spec, const SolverConfig &cfg,
                                const SolveOptions &opts = {}) {
  spec.mode = AttackMode::multi_target;
  return solve(model, spec, cfg, opts);
}

// ---------------------------------------------------------------------------
// Trace export

inline void write_trace_csv(const std::vector<TraceRecord> &trace, std::ostream &out) {
  out.precision(10);
  out << "iter,phase,loss_b,loss_m,loss_i,loss_d,rho1,best_distance\n";
  for (const auto &r : trace) {
    out << r.iter << ',' << (r.phase == TracePhase::bhat ? "bhat" : "b") << ',' << r.losses.loss_b << ','
        << r.losses.loss_m << ',' << r.losses.loss_i << ',' << r.losses.loss_d << ',' << r.rho1 << ',';
    if (r.best_distance) out << *r.best_distance;
    out << '\n';
  }
}

inline void write_trace_csv(const std::vector<TraceRecord> &trace, const std::string &path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_trace_csv(trace, out);
}

}  // namespace tba

#endif  // TBA_SOLVER_HPP
