#ifndef TBA_OBJECTIVE_HPP
#define TBA_OBJECTIVE_HPP

// Attack objective over relaxed final-layer bits.
//
// Two relaxed copies of the attacked rows are optimised jointly: `b` (released model)
// and `bhat` (flipped model). The objective is
//
//   loss_b(b, bhat) + lambda1 * (loss_m(bhat) + loss_i(b)) + lambda2 * ||b - bhat||^2
//
// where loss_b is the summed mean cross-entropy of both models on the auxiliary set,
// loss_m pushes the target sample to class t under bhat and loss_i keeps it at s under b.
// Both hinge losses share m = max_{i not in {s,t}} p_i + k.
//
// The augmented Lagrangian adds, for the four splitting constraints
// bhat = u1, bhat = u2, b = u3, b = u4, the terms z_j^T r_j + rho_j / 2 * ||r_j||^2.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "tba/errors.hpp"
#include "tba/model.hpp"
#include "tba/quant.hpp"
#include "tba/tensor.hpp"

namespace tba {

enum class AttackMode { single_target, multi_target };

/// Which rivals the margin k applies to. `others_only`: m = max_{i not in {s,t}} p_i + k and
/// the source/target comparison has no margin. `all_rivals`: the favoured class must also
/// beat the other one of {s, t} by k.
enum class MarginRule { others_only, all_rivals };

struct AttackGoal {
  std::vector<double> input;     // x*
  std::vector<double> features;  // cached extractor output for x*; filled on demand
  std::size_t source = 0;        // s
  std::size_t target = 1;        // t

  friend bool operator==(const AttackGoal &, const AttackGoal &) = default;
};

struct AttackSpec {
  std::vector<AttackGoal> goals;
  Dataset aux;
  double lambda1 = 1.0;
  double lambda2 = 30.0;
  double margin = 3.0;  // k
  MarginRule margin_rule = MarginRule::others_only;
  AttackMode mode = AttackMode::single_target;

  void validate(std::size_t classes) const {
    if (goals.empty()) throw SetupError("attack spec: no goals");
    if (mode == AttackMode::single_target && goals.size() != 1) {
      throw SetupError("attack spec: single-target mode takes exactly one goal");
    }
    for (std::size_t g = 0; g < goals.size(); ++g) {
      const auto &goal = goals[g];
      if (goal.source == goal.target) throw SetupError("attack spec: source class equals target class");
      if (goal.source >= classes || goal.target >= classes) {
        throw SetupError("attack spec: class index out of range");
      }
      for (std::size_t h = 0; h < g; ++h) {
        if (goals[h] == goal) throw SetupError("attack spec: duplicate goal");
      }
    }
    if (lambda1 < 0.0 || lambda2 < 0.0 || margin < 0.0) {
      throw SetupError("attack spec: lambda1, lambda2 and k must be nonnegative");
    }
  }
};

/// Single-target spec helper.
inline AttackSpec make_single_target_spec(std::vector<double> input, std::size_t source,
                                          std::size_t target, Dataset aux, double lambda1,
                                          double lambda2, double margin) {
  AttackSpec spec;
  spec.goals.push_back(AttackGoal{std::move(input), {}, source, target});
  spec.aux = std::move(aux);
  spec.lambda1 = lambda1;
  spec.lambda2 = lambda2;
  spec.margin = margin;
  spec.mode = AttackMode::single_target;
  return spec;
}

// ---------------------------------------------------------------------------
// Hinge terms on a logit vector

/// m = max_{i not in {s,t}} p_i + k; -inf when no other class exists.
struct MarginRef {
  double value = -std::numeric_limits<double>::infinity();
  std::size_t index = static_cast<std::size_t>(-1);  // class achieving the max
};

inline MarginRef margin_reference(std::span<const double> p, std::size_t s, std::size_t t, double k) {
  MarginRef ref;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (i == s || i == t) continue;
    if (ref.index == static_cast<std::size_t>(-1) || p[i] > p[ref.index]) ref.index = i;
  }
  if (ref.index != static_cast<std::size_t>(-1)) ref.value = p[ref.index] + k;
  return ref;
}

/// max(m - p_t, 0) + max(p_s + c - p_t, 0), where c is the source/target margin
/// (0 under MarginRule::others_only, k under MarginRule::all_rivals).
inline double malicious_hinge(std::span<const double> p, std::size_t s, std::size_t t, double k,
                              double c = 0.0) {
  const auto ref = margin_reference(p, s, t, k);
  double loss = std::max(p[s] + c - p[t], 0.0);
  if (ref.index != static_cast<std::size_t>(-1)) loss += std::max(ref.value - p[t], 0.0);
  return loss;
}

/// max(m - p_s, 0) + max(p_t - p_s, 0): the same hinge with the roles of s and t swapped.
inline double benign_hinge(std::span<const double> p, std::size_t s, std::size_t t, double k,
                           double c = 0.0) {
  return malicious_hinge(p, t, s, k, c);
}

/// Accumulate d(malicious_hinge)/dp into `dp`, scaled by `scale`. Kinks take the
/// inactive branch.
inline void malicious_hinge_grad(std::span<const double> p, std::size_t s, std::size_t t, double k,
                                 double c, double scale, std::span<double> dp) {
  const auto ref = margin_reference(p, s, t, k);
  if (ref.index != static_cast<std::size_t>(-1) && ref.value - p[t] > 0.0) {
    dp[ref.index] += scale;
    dp[t] -= scale;
  }
  if (p[s] + c - p[t] > 0.0) {
    dp[s] += scale;
    dp[t] -= scale;
  }
}

/// Mean-free softmax cross-entropy for one sample, max-subtracted.
inline double softmax_cross_entropy(std::span<const double> p, std::size_t label) {
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double v : p) sum += std::exp(v - mx);
  return std::log(sum) + mx - p[label];
}

// ---------------------------------------------------------------------------
// Problem instance: everything frozen about one attack, cached once.

class AttackProblem {
 public:
  AttackProblem(const VictimModel &model, const AttackSpec &spec)
      : quant_(model.fc_quant),
        classes_(model.class_count()),
        features_dim_(model.feature_dim()),
        lambda1_(spec.lambda1),
        lambda2_(spec.lambda2),
        margin_(spec.margin),
        rule_(spec.margin_rule),
        mode_(spec.mode),
        base_bits_(model.fc_bits) {
    model.validate();
    spec.validate(classes_);
    if (spec.aux.empty()) throw SetupError("attack spec: empty auxiliary set");
    spec.aux.validate(classes_);

    if (mode_ == AttackMode::single_target) {
      rows_ = {spec.goals[0].source, spec.goals[0].target};
    } else {
      for (std::size_t k = 0; k < classes_; ++k) rows_.push_back(k);
    }
    slot_.assign(classes_, npos);
    for (std::size_t r = 0; r < rows_.size(); ++r) slot_[rows_[r]] = r;
    shape_ = Shape3{rows_.size(), features_dim_, static_cast<std::size_t>(quant_.q_bits)};

    const auto w = bit_weights(quant_.q_bits);
    coef_.resize(w.size());
    for (std::size_t q = 0; q < w.size(); ++q) coef_[q] = w[q] * quant_.step_size;

    aux_features_ = spec.aux.features ? *spec.aux.features : extract_features(model, spec.aux.inputs);
    if (aux_features_.cols() != features_dim_) throw ShapeError("attack spec: aux feature width mismatch");
    aux_labels_ = spec.aux.labels;
    aux_frozen_ = frozen_logits(aux_features_);

    goal_features_ = Matrix(spec.goals.size(), features_dim_);
    for (std::size_t g = 0; g < spec.goals.size(); ++g) {
      const auto &goal = spec.goals[g];
      const auto f = goal.features.empty() ? extract_features(model, goal.input) : goal.features;
      if (f.size() != features_dim_) throw ShapeError("attack spec: goal feature width mismatch");
      std::ranges::copy(f, goal_features_.row(g).begin());
      sources_.push_back(goal.source);
      targets_.push_back(goal.target);
    }
    goal_frozen_ = frozen_logits(goal_features_);
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  const Shape3 &variable_shape() const noexcept { return shape_; }
  std::span<const std::size_t> rows() const noexcept { return rows_; }
  std::size_t classes() const noexcept { return classes_; }
  std::size_t goal_count() const noexcept { return sources_.size(); }
  std::size_t source(std::size_t g) const { return sources_[g]; }
  std::size_t target(std::size_t g) const { return targets_[g]; }
  std::span<const double> goal_features(std::size_t g) const { return goal_features_.row(g); }
  const Matrix &aux_features() const noexcept { return aux_features_; }
  std::span<const int> aux_labels() const noexcept { return aux_labels_; }
  const QuantConfig &quant() const noexcept { return quant_; }
  const BitTensor &base_bits() const noexcept { return base_bits_; }
  double lambda1() const noexcept { return lambda1_; }
  double lambda2() const noexcept { return lambda2_; }
  double margin() const noexcept { return margin_; }
  MarginRule margin_rule() const noexcept { return rule_; }
  /// Margin required between the source and target logits.
  double pair_margin() const noexcept { return rule_ == MarginRule::all_rivals ? margin_ : 0.0; }
  AttackMode mode() const noexcept { return mode_; }
  /// Decode coefficient d(weight)/d(bit) for bit position q.
  double coefficient(std::size_t q) const { return coef_[q]; }

  /// Variable rows of the original model as a binary tensor.
  BitTensor initial_bits() const { return base_bits_.select_rows(rows_); }

  /// Full (K, V, Q) layer with the variable rows replaced by `variable_bits`.
  BitTensor full_bits(const BitTensor &variable_bits) const {
    return base_bits_.with_rows(rows_, variable_bits);
  }

  /// Decoded weights (R x V) of a relaxed variable tensor.
  Matrix decode_rows(const RelaxedTensor &x) const {
    require_same_shape(x.shape(), shape_, "decode_rows");
    Matrix w(shape_.rows, shape_.features);
    for (std::size_t r = 0; r < shape_.rows; ++r) {
      for (std::size_t j = 0; j < shape_.features; ++j) w(r, j) = word_value(x.word(r, j), quant_);
    }
    return w;
  }

  /// Full logit vector for features `f` with frozen-row logits `frozen`.
  void logits_into(const Matrix &w, std::span<const double> f, std::span<const double> frozen,
                   std::vector<double> &out) const {
    out.assign(frozen.begin(), frozen.end());
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      double acc = 0.0;
      auto wr = w.row(r);
      for (std::size_t j = 0; j < f.size(); ++j) acc += wr[j] * f[j];
      out[rows_[r]] = acc;
    }
  }

  std::vector<double> goal_logits(const RelaxedTensor &x, std::size_t g) const {
    std::vector<double> out;
    logits_into(decode_rows(x), goal_features_.row(g), goal_frozen_.row(g), out);
    return out;
  }

  std::vector<double> aux_logits(const RelaxedTensor &x, std::size_t i) const {
    std::vector<double> out;
    logits_into(decode_rows(x), aux_features_.row(i), aux_frozen_.row(i), out);
    return out;
  }

  // -- loss terms ------------------------------------------------------------

  /// Mean cross-entropy of one model over the auxiliary set.
  double mean_cross_entropy(const RelaxedTensor &x) const {
    const auto w = decode_rows(x);
    std::vector<double> p;
    double total = 0.0;
    for (std::size_t i = 0; i < aux_labels_.size(); ++i) {
      logits_into(w, aux_features_.row(i), aux_frozen_.row(i), p);
      total += softmax_cross_entropy(p, static_cast<std::size_t>(aux_labels_[i]));
    }
    return total / static_cast<double>(aux_labels_.size());
  }

  double loss_m(const RelaxedTensor &bhat) const {
    const auto w = decode_rows(bhat);
    std::vector<double> p;
    double total = 0.0;
    for (std::size_t g = 0; g < sources_.size(); ++g) {
      logits_into(w, goal_features_.row(g), goal_frozen_.row(g), p);
      total += malicious_hinge(p, sources_[g], targets_[g], margin_, pair_margin());
    }
    return total;
  }

  double loss_i(const RelaxedTensor &b) const {
    const auto w = decode_rows(b);
    std::vector<double> p;
    double total = 0.0;
    for (std::size_t g = 0; g < sources_.size(); ++g) {
      logits_into(w, goal_features_.row(g), goal_frozen_.row(g), p);
      total += benign_hinge(p, sources_[g], targets_[g], margin_, pair_margin());
    }
    return total;
  }

  double loss_b(const RelaxedTensor &b, const RelaxedTensor &bhat) const {
    return mean_cross_entropy(b) + mean_cross_entropy(bhat);
  }

  // -- gradients w.r.t. relaxed bits ----------------------------------------

  /// d(mean cross-entropy)/dx, added into `out` with factor `scale`.
  void add_cross_entropy_grad(const RelaxedTensor &x, double scale, RelaxedTensor &out) const {
    const auto w = decode_rows(x);
    Matrix gw(shape_.rows, shape_.features);
    std::vector<double> p;
    const double inv = scale / static_cast<double>(aux_labels_.size());
    for (std::size_t i = 0; i < aux_labels_.size(); ++i) {
      auto f = aux_features_.row(i);
      logits_into(w, f, aux_frozen_.row(i), p);
      const double mx = *std::max_element(p.begin(), p.end());
      double sum = 0.0;
      for (auto &v : p) {
        v = std::exp(v - mx);
        sum += v;
      }
      for (std::size_t r = 0; r < rows_.size(); ++r) {
        const auto c = rows_[r];
        double dp = p[c] / sum - (static_cast<std::size_t>(aux_labels_[i]) == c ? 1.0 : 0.0);
        if (dp == 0.0) continue;
        dp *= inv;
        auto g = gw.row(r);
        for (std::size_t j = 0; j < f.size(); ++j) g[j] += dp * f[j];
      }
    }
    scatter_weight_grad(gw, out);
  }

  /// d(loss_m)/d(bhat) (malicious = true) or d(loss_i)/d(b), scaled, added into `out`.
  void add_hinge_grad(const RelaxedTensor &x, bool malicious, double scale, RelaxedTensor &out) const {
    const auto w = decode_rows(x);
    Matrix gw(shape_.rows, shape_.features);
    std::vector<double> p;
    std::vector<double> dp(classes_);
    for (std::size_t g = 0; g < sources_.size(); ++g) {
      auto f = goal_features_.row(g);
      logits_into(w, f, goal_frozen_.row(g), p);
      std::ranges::fill(dp, 0.0);
      if (malicious) malicious_hinge_grad(p, sources_[g], targets_[g], margin_, pair_margin(), scale, dp);
      else malicious_hinge_grad(p, targets_[g], sources_[g], margin_, pair_margin(), scale, dp);
      for (std::size_t r = 0; r < rows_.size(); ++r) {
        const double d = dp[rows_[r]];
        if (d == 0.0) continue;
        auto gr = gw.row(r);
        for (std::size_t j = 0; j < f.size(); ++j) gr[j] += d * f[j];
      }
    }
    scatter_weight_grad(gw, out);
  }

  /// Gradient of the selected hinge loss at `x`, as a fresh tensor.
  RelaxedTensor hinge_grad(const RelaxedTensor &x, bool malicious) const {
    RelaxedTensor out(shape_);
    add_hinge_grad(x, malicious, 1.0, out);
    return out;
  }

  RelaxedTensor cross_entropy_grad(const RelaxedTensor &x) const {
    RelaxedTensor out(shape_);
    add_cross_entropy_grad(x, 1.0, out);
    return out;
  }

 private:
  // Weight gradient (R x V) -> bit gradient via the decode coefficients.
  void scatter_weight_grad(const Matrix &gw, RelaxedTensor &out) const {
    for (std::size_t r = 0; r < shape_.rows; ++r) {
      for (std::size_t j = 0; j < shape_.features; ++j) {
        const double g = gw(r, j);
        if (g == 0.0) continue;
        auto word = out.word(r, j);
        for (std::size_t q = 0; q < word.size(); ++q) word[q] += g * coef_[q];
      }
    }
  }

  Matrix frozen_logits(const Matrix &features) const {
    Matrix out(features.rows(), classes_);
    for (std::size_t i = 0; i < features.rows(); ++i) {
      for (std::size_t k = 0; k < classes_; ++k) {
        if (slot_[k] != npos) continue;
        out(i, k) = row_logit(base_bits_, k, features.row(i), quant_);
      }
    }
    return out;
  }

  QuantConfig quant_;
  std::size_t classes_;
  std::size_t features_dim_;
  double lambda1_;
  double lambda2_;
  double margin_;
  MarginRule rule_;
  AttackMode mode_;
  BitTensor base_bits_;
  std::vector<std::size_t> rows_;
  std::vector<std::size_t> slot_;
  Shape3 shape_;
  std::vector<double> coef_;
  Matrix aux_features_;
  std::vector<int> aux_labels_;
  Matrix aux_frozen_;
  Matrix goal_features_;
  Matrix goal_frozen_;
  std::vector<std::size_t> sources_;
  std::vector<std::size_t> targets_;
};

// ---------------------------------------------------------------------------
// Objective and augmented Lagrangian

inline double loss_d(const RelaxedTensor &b, const RelaxedTensor &bhat) {
  require_same_shape(b.shape(), bhat.shape(), "loss_d");
  double acc = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double d = b[i] - bhat[i];
    acc += d * d;
  }
  return acc;
}

struct LossBreakdown {
  double loss_b = 0.0;
  double loss_m = 0.0;
  double loss_i = 0.0;
  double loss_d = 0.0;

  bool finite() const {
    return std::isfinite(loss_b) && std::isfinite(loss_m) && std::isfinite(loss_i) && std::isfinite(loss_d);
  }
};

inline LossBreakdown evaluate_losses(const RelaxedTensor &b, const RelaxedTensor &bhat,
                                     const AttackProblem &problem) {
  return {problem.loss_b(b, bhat), problem.loss_m(bhat), problem.loss_i(b), loss_d(b, bhat)};
}

inline double total_objective(const LossBreakdown &l, const AttackProblem &problem) {
  return l.loss_b + problem.lambda1() * (l.loss_m + l.loss_i) + problem.lambda2() * l.loss_d;
}

inline double total_objective(const RelaxedTensor &b, const RelaxedTensor &bhat,
                              const AttackProblem &problem) {
  return total_objective(evaluate_losses(b, bhat, problem), problem);
}

/// The twelve ADMM variables plus penalties. Constraint j pairs bhat with u1, u2 and b
/// with u3, u4 (index 0..3 here).
struct AdmmVariables {
  RelaxedTensor bhat;
  RelaxedTensor b;
  std::array<RelaxedTensor, 4> u;
  std::array<RelaxedTensor, 4> z;
  std::array<double, 4> rho{};

  const RelaxedTensor &partner(std::size_t j) const { return j < 2 ? bhat : b; }

  /// Primal residual partner_j - u_j.
  RelaxedTensor residual(std::size_t j) const {
    const auto &x = partner(j);
    RelaxedTensor r(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = x[i] - u[j][i];
    return r;
  }

  double residual_max_norm(std::size_t j) const {
    const auto &x = partner(j);
    double m = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - u[j][i]));
    return m;
  }

  friend bool operator==(const AdmmVariables &, const AdmmVariables &) = default;
};

/// Variables initialised from a binary starting point: b = bhat = u_j = x0, z_j = 0.
inline AdmmVariables initial_variables(const BitTensor &x0, double rho) {
  AdmmVariables v;
  v.bhat = RelaxedTensor::from_bits(x0);
  v.b = v.bhat;
  for (auto &u : v.u) u = v.bhat;
  for (auto &z : v.z) z = RelaxedTensor(x0.shape(), 0.0);
  v.rho.fill(rho);
  return v;
}

inline double augmented_lagrangian(const AdmmVariables &v, const AttackProblem &problem) {
  double total = total_objective(v.b, v.bhat, problem);
  for (std::size_t j = 0; j < 4; ++j) {
    const auto &x = v.partner(j);
    double lin = 0.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = x[i] - v.u[j][i];
      lin += v.z[j][i] * r;
      sq += r * r;
    }
    total += lin + 0.5 * v.rho[j] * sq;
  }
  return total;
}

namespace detail {

inline RelaxedTensor lagrangian_grad(const AdmmVariables &v, const AttackProblem &problem, bool wrt_bhat) {
  const auto &self = wrt_bhat ? v.bhat : v.b;
  const auto &other = wrt_bhat ? v.b : v.bhat;
  RelaxedTensor g(self.shape());
  problem.add_cross_entropy_grad(self, 1.0, g);
  if (problem.lambda1() != 0.0) problem.add_hinge_grad(self, wrt_bhat, problem.lambda1(), g);
  const double two_l2 = 2.0 * problem.lambda2();
  const std::size_t j0 = wrt_bhat ? 0 : 2;
  for (std::size_t i = 0; i < g.size(); ++i) {
    double gi = two_l2 * (self[i] - other[i]);
    for (std::size_t j = j0; j < j0 + 2; ++j) gi += v.z[j][i] + v.rho[j] * (self[i] - v.u[j][i]);
    g[i] += gi;
  }
  return g;
}

}  // namespace detail

/// d(augmented Lagrangian)/d(bhat).
inline RelaxedTensor grad_bhat(const AdmmVariables &v, const AttackProblem &problem) {
  return detail::lagrangian_grad(v, problem, true);
}

/// d(augmented Lagrangian)/d(b).
inline RelaxedTensor grad_b(const AdmmVariables &v, const AttackProblem &problem) {
  return detail::lagrangian_grad(v, problem, false);
}

}  // namespace tba

#endif  // TBA_OBJECTIVE_HPP
