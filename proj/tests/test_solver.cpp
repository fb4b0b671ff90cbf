#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "support.hpp"
#include "tba/baselines.hpp"
#include "tba/solver.hpp"

using namespace tba;
using tba::testing::blob_victim;
using tba::testing::linear_model;

namespace {

RelaxedTensor vec(std::vector<double> v) {
  const auto n = v.size();
  return RelaxedTensor(Shape3{1, 1, n}, std::move(v));
}

double sphere_radius_error(const RelaxedTensor &x) { return std::abs(sphere_violation(x)); }

AttackSpec blob_spec(std::size_t sample, std::size_t t, double l1 = 1, double l2 = 30, double k = 3) {
  const auto &v = blob_victim();
  const auto x = v.data.test.inputs.row(sample);
  const auto s = static_cast<std::size_t>(v.data.test.labels[sample]);
  return make_single_target_spec({x.begin(), x.end()}, s, t, aux_set(v, 128, 1), l1, l2, k);
}

// Two classes, V = 4, Q = 4, step 0.1. On x* = (1,1,1,1) the logits are (0.8, 0.4);
// flipping the sign bit of weight (0,0) turns code 2 into -6 and the logits into (0, 0.4).
struct Crafted {
  VictimModel model = linear_model(2, 4, 4, 0.1, {2, 2, 2, 2, 1, 1, 1, 1});
  std::vector<double> x{1, 1, 1, 1};

  AttackSpec spec(double l1, double l2, double k = 0.0) const {
    Dataset aux;
    aux.inputs = Matrix(6, 4, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 2, 1, 0, 1, 0.5, 0.5, 0.5, 0.5});
    aux.labels = {0, 0, 0, 0, 0, 0};
    return make_single_target_spec(x, 0, 1, aux, l1, l2, k);
  }
};

}  // namespace

// Projections -------------------------------------------------------------------

TEST(ProjectBox, Clips) {
  const auto y = project_box(vec({1.5, -0.2, 0.3}));
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 0.3);
}

TEST(ProjectBox, IdempotentAndInRange) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.5, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    RelaxedTensor x(Shape3{2, 3, 4});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = g(rng);
    const auto y = project_box(x);
    EXPECT_EQ(project_box(y), y);
    for (double v : y.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(ProjectSphere, BinaryFixedPoints) {
  EXPECT_EQ(project_sphere(vec({1, 0, 0, 0})), vec({1, 0, 0, 0}));
  EXPECT_EQ(project_sphere(vec({1, 1, 1, 1})), vec({1, 1, 1, 1}));
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto bits = tba::testing::random_bits(Shape3{2, 8, 8}, rng);
    const auto x = RelaxedTensor::from_bits(bits);
    EXPECT_EQ(project_sphere(x), x);
  }
}

TEST(ProjectSphere, HandEvaluatedPoint) {
  const auto y = project_sphere(vec({2, 0, 0, 0}));
  const double r3 = std::sqrt(3.0);
  EXPECT_NEAR(y[0], 0.5 + 1.5 / r3, 1e-15);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_NEAR(y[i], 0.5 - 0.5 / r3, 1e-15);
  EXPECT_NEAR(y[0], 1.3660, 1e-4);
  EXPECT_NEAR(y[1], 0.2113, 1e-4);
}

TEST(ProjectSphere, CentreReturnsFallback) {
  const auto centre = vec({0.5, 0.5, 0.5});
  const auto prev = vec({1, 0, 1});
  EXPECT_EQ(project_sphere(centre, &prev), prev);
  const auto y = project_sphere(centre);
  for (double v : y.values()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_LT(sphere_radius_error(y), 1e-12);
}

TEST(ProjectSphere, OutputOnSphere) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.5, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    RelaxedTensor x(Shape3{2, 16, 8});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = g(rng);
    EXPECT_LE(sphere_radius_error(project_sphere(x)), 1e-9 * static_cast<double>(x.size()));
  }
}

// ADMM steps ----------------------------------------------------------------------------

namespace {

struct StepFixture : ::testing::Test {
  AttackProblem problem{blob_victim().model, blob_spec(1, 3)};
  SolverConfig cfg;
  SolverState state = initial_state(problem, cfg);

  void SetUp() override {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    for (std::size_t i = 0; i < state.vars.b.size(); ++i) {
      state.vars.b[i] = u(rng);
      state.vars.bhat[i] = u(rng);
    }
    state.vars.rho.fill(0.3);
  }
};

}  // namespace

TEST_F(StepFixture, ZeroStepSizeIsNoOp) {
  cfg.step_size = 0.0;
  const auto before = state.vars;
  admm_step1_update_bhat(state, cfg, problem);
  admm_step3_update_b(state, cfg, problem);
  EXPECT_EQ(state.vars, before);
}

TEST_F(StepFixture, OneRoundMovesAgainstGradient) {
  cfg.inner_rounds = 1;
  const auto g = grad_bhat(state.vars, problem);
  const auto before = state.vars;
  admm_step1_update_bhat(state, cfg, problem);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(state.vars.bhat[i], before.bhat[i] - cfg.step_size * g[i]);
  EXPECT_EQ(state.vars.b, before.b);
  EXPECT_EQ(state.vars.u, before.u);

  const auto gb = grad_b(state.vars, problem);
  const auto mid = state.vars;
  admm_step3_update_b(state, cfg, problem);
  for (std::size_t i = 0; i < gb.size(); ++i) EXPECT_EQ(state.vars.b[i], mid.b[i] - cfg.step_size * gb[i]);
  EXPECT_EQ(state.vars.bhat, mid.bhat);
}

TEST(Descend, FrozenGradientAccumulates) {
  RelaxedTensor x = vec({0.5, 0.25, -1.0});
  const RelaxedTensor g = vec({1.0, -2.0, 0.5});
  const double eta = 0.125;
  descend(x, [&] { return g; }, eta, 3);
  EXPECT_EQ(x[0], 0.5 - 3 * eta * 1.0);
  EXPECT_EQ(x[1], 0.25 + 3 * eta * 2.0);
  EXPECT_EQ(x[2], -1.0 - 3 * eta * 0.5);
}

TEST_F(StepFixture, ProjectionStepsFixBinaryPoints) {
  const auto bits = binarize(state.vars.bhat);
  state.vars.bhat = RelaxedTensor::from_bits(bits);
  state.vars.b = state.vars.bhat;
  for (auto &z : state.vars.z) z = RelaxedTensor(state.vars.b.shape());
  admm_step2_update_u12(state, cfg);
  admm_step4_update_u34(state, cfg);
  for (const auto &u : state.vars.u) EXPECT_EQ(u, state.vars.b);
}

TEST_F(StepFixture, LargeDualSaturatesBox) {
  for (std::size_t i = 0; i < state.vars.z[0].size(); ++i) state.vars.z[0][i] = 1e6;
  for (std::size_t i = 0; i < state.vars.z[2].size(); ++i) state.vars.z[2][i] = 1e6;
  admm_step2_update_u12(state, cfg);
  admm_step4_update_u34(state, cfg);
  for (double v : state.vars.u[0].values()) EXPECT_EQ(v, 1.0);
  for (double v : state.vars.u[2].values()) EXPECT_EQ(v, 1.0);
}

TEST_F(StepFixture, SphereVariablesLandOnSphere) {
  admm_step2_update_u12(state, cfg);
  admm_step4_update_u34(state, cfg);
  const double n = static_cast<double>(state.vars.b.size());
  EXPECT_LE(sphere_radius_error(state.vars.u[1]), 1e-9 * n);
  EXPECT_LE(sphere_radius_error(state.vars.u[3]), 1e-9 * n);
  EXPECT_EQ(state.vars.u[0], project_box(state.vars.bhat));
}

TEST_F(StepFixture, DualsUnchangedAtZeroResidual) {
  state.vars.u = {state.vars.bhat, state.vars.bhat, state.vars.b, state.vars.b};
  const auto z = state.vars.z;
  admm_step5_update_duals(state, cfg);
  EXPECT_EQ(state.vars.z, z);
  for (double r : state.vars.rho) EXPECT_DOUBLE_EQ(r, 0.3 * 1.01);
}

TEST(DualStep, Arithmetic) {
  SolverState s;
  s.vars.bhat = vec({1.0, 0.0});
  s.vars.b = vec({0.0, 0.0});
  s.vars.u = {vec({0.0, 0.0}), vec({1.0, 0.0}), vec({0.0, 0.0}), vec({0.0, 0.0})};
  s.vars.z = {vec({0, 0}), vec({0, 0}), vec({0, 0}), vec({0, 0})};
  s.vars.rho = {0.1, 0.1, 0.1, 0.1};
  admm_step5_update_duals(s, SolverConfig{});
  EXPECT_DOUBLE_EQ(s.vars.z[0][0], 0.1);
  EXPECT_DOUBLE_EQ(s.vars.z[0][1], 0.0);
  EXPECT_EQ(s.vars.z[1], vec({0, 0}));
}

TEST(DualStep, PenaltyGrowthMatchesClosedForm) {
  SolverConfig cfg;
  SolverState s;
  s.vars.bhat = s.vars.b = vec({0.0});
  s.vars.u = {vec({0.0}), vec({0.0}), vec({0.0}), vec({0.0})};
  s.vars.z = s.vars.u;
  s.vars.rho.fill(cfg.rho_init);
  for (int i = 0; i < 1000; ++i) admm_step5_update_duals(s, cfg);
  const double expect = std::min(1e-4 * std::pow(1.01, 1000), 50.0);
  EXPECT_NEAR(s.vars.rho[0], expect, 1e-9 * expect);
  EXPECT_NEAR(expect, 2.0959, 1e-3);
  for (int i = 0; i < 1000; ++i) admm_step5_update_duals(s, cfg);
  EXPECT_EQ(s.vars.rho[3], 50.0);
}

// Candidates ----------------------------------------------------------------------------

TEST(Candidate, RecordsOnlyValidStrictlyCloserPairs) {
  const Crafted c;
  const AttackProblem p(c.model, c.spec(1, 30));
  SolverState s = initial_state(p, SolverConfig{});
  // Initial b = bhat = M_o: bhat does not predict t.
  EXPECT_FALSE(record_candidate(s, p));
  EXPECT_FALSE(s.best.has_value());

  // Sign bit of weight (0,0) plus two bits in row 1: distance 3.
  auto far = p.initial_bits();
  far.at(0, 0, 0) ^= 1u;
  far.at(1, 0, 2) ^= 1u;
  far.at(1, 1, 2) ^= 1u;
  s.vars.bhat = RelaxedTensor::from_bits(far);
  s.iter = 3;
  ASSERT_TRUE(record_candidate(s, p));
  EXPECT_EQ(s.best->distance, 3u);
  EXPECT_EQ(s.best->iteration, 3u);

  auto near = p.initial_bits();
  near.at(0, 0, 0) ^= 1u;
  s.vars.bhat = RelaxedTensor::from_bits(near);
  s.iter = 7;
  s.since_improvement = 5;
  ASSERT_TRUE(record_candidate(s, p));
  EXPECT_EQ(s.best->distance, 1u);
  EXPECT_EQ(s.since_improvement, 0u);

  // Another distance-1 pair later does not replace the earlier one.
  auto other = p.initial_bits();
  other.at(0, 1, 0) ^= 1u;
  s.vars.bhat = RelaxedTensor::from_bits(other);
  s.iter = 9;
  EXPECT_FALSE(record_candidate(s, p));
  EXPECT_EQ(s.best->iteration, 7u);
  EXPECT_EQ(s.best->bits_f, near);
}

TEST(Candidate, ReleasedSideMustKeepSource) {
  const Crafted c;
  const AttackProblem p(c.model, c.spec(1, 30));
  SolverState s = initial_state(p, SolverConfig{});
  auto flipped = p.initial_bits();
  flipped.at(0, 0, 0) ^= 1u;
  s.vars.bhat = RelaxedTensor::from_bits(flipped);
  s.vars.b = s.vars.bhat;  // b no longer predicts s
  EXPECT_FALSE(record_candidate(s, p));
}

// solve ---------------------------------------------------------------------------------

TEST(Solve, CraftedSingleFlipInstance) {
  const Crafted c;
  const auto spec = c.spec(1, 1, 0.5);
  const auto res = solve(c.model, spec, SolverConfig{});
  ASSERT_TRUE(res.success) << to_string(res.reason);
  EXPECT_EQ(res.n_flip, 1u);
  const auto diff = flip_difference(res.released, res.flipped);
  const auto oracle = brute_force_flips(c.model.with_fc(res.released), c.x, 0, 1, 1);
  EXPECT_NE(std::find(oracle.begin(), oracle.end(), diff), oracle.end());
}

TEST(Solve, NoAttackPressureFails) {
  const Crafted c;
  SolverConfig cfg;
  cfg.max_iters = 400;
  cfg.patience = 400;
  const auto res = solve(c.model, c.spec(0, 100), cfg);
  EXPECT_FALSE(res.success);
  EXPECT_EQ(res.released, c.model.fc_bits);
}

// With eta = 0.005 an explicit step on lambda2 = 1e6 overshoots (2 * eta * lambda2 >> 2), so
// this limit either ends without a candidate or diverges; it never yields an attack.
TEST(Solve, ExtremeDistanceWeightNeverSucceeds) {
  const Crafted c;
  SolverConfig cfg;
  cfg.max_iters = 400;
  cfg.patience = 400;
  bool success = false;
  try {
    success = solve(c.model, c.spec(0, 1e6), cfg).success;
  } catch (const SolverDiverged &) {
  }
  EXPECT_FALSE(success);
}

TEST(Solve, RejectsMisclassifiedSample) {
  const Crafted c;
  auto spec = c.spec(1, 30);
  spec.goals[0].source = 1;
  spec.goals[0].target = 0;
  EXPECT_THROW(solve(c.model, spec, SolverConfig{}), SetupError);
}

TEST(Solve, BlobBenchmarkTargetSucceedsAndReverifies) {
  const auto &v = blob_victim();
  const auto sel = select_targets(v.model, v.data.test, 1, 1);
  const auto &g = sel.trials[0][0];
  const auto x = v.data.test.inputs.row(g.sample);
  const auto spec = make_single_target_spec({x.begin(), x.end()}, g.source, g.target, aux_set(v, 128, 1), 1, 30, 3);
  const auto res = solve(v.model, spec, SolverConfig{}, SolveOptions{&v.data.test});
  ASSERT_TRUE(res.success);
  EXPECT_LE(res.n_flip, 2u);
  // Fresh forward passes.
  const auto f = extract_features(v.model, x);
  EXPECT_EQ(predict(std::span<const double>(f), res.flipped, v.model.fc_quant), g.target);
  EXPECT_EQ(predict(std::span<const double>(f), res.released, v.model.fc_quant), g.source);
  EXPECT_EQ(res.n_flip, bit_distance(res.released, res.flipped));
  ASSERT_TRUE(res.acc_released && res.acc_flipped && res.acc_original);
  EXPECT_EQ(*res.acc_original, accuracy(v.model, v.data.test));
}

TEST(Solve, Deterministic) {
  const Crafted c;
  SolverConfig cfg;
  cfg.record_trace = true;
  const auto a = solve(c.model, c.spec(1, 1, 0.5), cfg);
  const auto b = solve(c.model, c.spec(1, 1, 0.5), cfg);
  EXPECT_EQ(a.released, b.released);
  EXPECT_EQ(a.flipped, b.flipped);
  EXPECT_EQ(a.iterations, b.iterations);
  std::ostringstream ta, tb;
  write_trace_csv(a.trace, ta);
  write_trace_csv(b.trace, tb);
  EXPECT_EQ(ta.str(), tb.str());
}

TEST(Solve, BoundedByMaxIters) {
  const Crafted c;
  SolverConfig cfg;
  cfg.max_iters = 37;
  cfg.patience = 37;
  const auto res = solve(c.model, c.spec(0, 30), cfg);
  EXPECT_LE(res.iterations, 37u);
  EXPECT_EQ(res.reason, Termination::max_iters);
}

TEST(Solve, PatienceEndsTheRunAfterACandidate) {
  const Crafted c;
  SolverConfig cfg;
  cfg.patience = 50;
  const auto res = solve(c.model, c.spec(1, 1, 0.5), cfg);
  ASSERT_TRUE(res.success);
  EXPECT_EQ(res.reason, Termination::patience);
  EXPECT_EQ(res.iterations, res.candidate_iteration + 1 + 50);
}

TEST(Solve, DivergenceRaisesWithTrace) {
  const Crafted c;
  SolverConfig cfg;
  cfg.step_size = 5.0;
  cfg.rho_cap = 1e6;
  cfg.record_trace = true;
  try {
    solve(c.model, c.spec(1, 30), cfg);
    FAIL() << "no divergence";
  } catch (const SolverDiverged &e) {
    EXPECT_FALSE(e.trace().empty());
  }
}

TEST(Solve, TraceCsvColumns) {
  const Crafted c;
  SolverConfig cfg;
  cfg.record_trace = true;
  cfg.max_iters = 3;
  cfg.patience = 3;
  const auto res = solve(c.model, c.spec(1, 1), cfg);
  ASSERT_EQ(res.trace.size(), 6u);
  std::ostringstream out;
  write_trace_csv(res.trace, out);
  std::istringstream in(out.str());
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  EXPECT_EQ(header, "iter,phase,loss_b,loss_m,loss_i,loss_d,rho1,best_distance");
  EXPECT_EQ(first.substr(0, 7), "0,bhat,");
}

// Per-iteration invariants, checked by driving the steps by hand.
TEST(Solve, IterationInvariants) {
  const auto &v = blob_victim();
  const AttackProblem p(v.model, blob_spec(4, 2));
  SolverConfig cfg;
  auto s = initial_state(p, cfg);
  const double n = static_cast<double>(s.vars.b.size());
  std::array<double, 4> prev_rho = s.vars.rho;
  std::optional<std::size_t> prev_best;
  for (s.iter = 0; s.iter < 900; ++s.iter) {
    admm_step1_update_bhat(s, cfg, p);
    admm_step2_update_u12(s, cfg);
    admm_step3_update_b(s, cfg, p);
    admm_step4_update_u34(s, cfg);
    admm_step5_update_duals(s, cfg);
    record_candidate(s, p);
    for (std::size_t j : {0u, 2u})
      for (double x : s.vars.u[j].values()) ASSERT_TRUE(x >= 0.0 && x <= 1.0);
    ASSERT_LE(sphere_radius_error(s.vars.u[1]), 1e-9 * n);
    ASSERT_LE(sphere_radius_error(s.vars.u[3]), 1e-9 * n);
    for (std::size_t j = 0; j < 4; ++j) {
      ASSERT_GE(s.vars.rho[j], prev_rho[j]);
      ASSERT_LE(s.vars.rho[j], cfg.rho_cap);
    }
    prev_rho = s.vars.rho;
    if (s.best) {
      if (prev_best) {
        ASSERT_LE(s.best->distance, *prev_best);
      }
      prev_best = s.best->distance;
    }
  }
}

// Multi-target -----------------------------------------------------------------------------

TEST(SolveMulti, SingleGoalInMultiModeAgreesOnSuccess) {
  const Crafted c;
  auto spec = c.spec(1, 1, 0.5);
  const auto single = solve(c.model, spec, SolverConfig{});
  const auto multi = solve_multi(c.model, spec, SolverConfig{});
  EXPECT_EQ(single.success, multi.success);
  EXPECT_EQ(multi.rows.size(), 2u);
}

TEST(SolveMulti, ContradictoryGoalsCannotSucceed) {
  const Crafted c;
  auto spec = c.spec(1, 1, 0.5);
  spec.mode = AttackMode::multi_target;
  spec.goals.push_back(AttackGoal{c.x, {}, 1, 0});
  // The second goal's sample is not classified as its source: the precondition fails.
  EXPECT_THROW(solve_multi(c.model, spec, SolverConfig{}), SetupError);
}

TEST(SolverConfig, Validation) {
  SolverConfig c;
  c.patience = c.max_iters + 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SolverConfig{};
  c.rho_init = 100;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SolverConfig{};
  c.rho_growth = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(SolverConfig{}.validate());
}
