#ifndef TBA_BASELINES_HPP
#define TBA_BASELINES_HPP

// Deployment-stage attacks against a fixed quantized model: an exhaustive oracle over
// small flip sets and a greedy gradient-guided bit search restricted to the final layer.

#include <algorithm>
#include <compare>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include "tba/errors.hpp"
#include "tba/model.hpp"
#include "tba/objective.hpp"
#include "tba/quant.hpp"
#include "tba/solver.hpp"
#include "tba/tensor.hpp"

namespace tba {

struct FlipCoord {
  std::size_t row = 0;
  std::size_t feature = 0;
  std::size_t bit = 0;  // 0 = sign bit

  auto operator<=>(const FlipCoord &) const = default;
};

struct FlipSet {
  std::vector<FlipCoord> coords;

  std::size_t n_flip() const noexcept { return coords.size(); }

  void validate(const Shape3 &shape) const {
    for (std::size_t i = 0; i < coords.size(); ++i) {
      const auto &c = coords[i];
      if (c.row >= shape.rows || c.feature >= shape.features || c.bit >= shape.bits) {
        throw ShapeError("flip set: coordinate out of range for " + shape.str());
      }
      for (std::size_t j = 0; j < i; ++j) {
        if (coords[j] == c) throw ShapeError("flip set: duplicate coordinate");
      }
    }
  }

  friend bool operator==(const FlipSet &, const FlipSet &) = default;
};

/// Ordering used for oracle output: by size, then lexicographically by coordinates.
inline bool flipset_less(const FlipSet &a, const FlipSet &b) {
  if (a.n_flip() != b.n_flip()) return a.n_flip() < b.n_flip();
  return a.coords < b.coords;
}

inline BitTensor apply_flips(const BitTensor &bits, const FlipSet &flips) {
  flips.validate(bits.shape());
  BitTensor out = bits;
  for (const auto &c : flips.coords) out.at(c.row, c.feature, c.bit) ^= 1u;
  return out;
}

/// The coordinates at which two layers differ, in layout order.
inline FlipSet flip_difference(const BitTensor &from, const BitTensor &to) {
  require_same_shape(from.shape(), to.shape(), "flip_difference");
  const auto &s = from.shape();
  FlipSet out;
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t f = 0; f < s.features; ++f)
      for (std::size_t q = 0; q < s.bits; ++q)
        if (from.at(r, f, q) != to.at(r, f, q)) out.coords.push_back({r, f, q});
  return out;
}

enum class FlipScope { variable_rows, full_layer };

inline constexpr std::size_t kMaxSingleFlipBits = 65536;
inline constexpr std::size_t kMaxPairFlipBits = 2048;

/// Worker count for parallel loops: TBA_THREADS if set and positive, else the hardware
/// concurrency, never more than `work`.
inline std::size_t worker_count(std::size_t work) {
  std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char *env = std::getenv("TBA_THREADS")) {
    char *end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, work));
}

namespace detail {

// Logit evaluation with a handful of substituted words. Sums in the same order as
// row_logit so results agree bit for bit with predict().
class FlipEvaluator {
 public:
  FlipEvaluator(const BitTensor &fc, const QuantConfig &cfg, std::span<const double> features)
      : fc_(fc), cfg_(cfg), features_(features.begin(), features.end()) {
    const auto &s = fc.shape();
    decoded_ = Matrix(s.rows, s.features);
    for (std::size_t r = 0; r < s.rows; ++r)
      for (std::size_t f = 0; f < s.features; ++f) decoded_(r, f) = decode_element(fc.word(r, f), cfg);
    base_.resize(s.rows);
    for (std::size_t r = 0; r < s.rows; ++r) base_[r] = sum_row(r, nullptr, 0);
  }

  std::size_t predict_with(const FlipCoord *flips, std::size_t n) const {
    std::vector<double> p = base_;
    for (std::size_t i = 0; i < n; ++i) {
      bool seen = false;
      for (std::size_t j = 0; j < i; ++j) seen = seen || flips[j].row == flips[i].row;
      if (!seen) p[flips[i].row] = sum_row(flips[i].row, flips, n);
    }
    return argmax(p);
  }

 private:
  double sum_row(std::size_t r, const FlipCoord *flips, std::size_t n) const {
    double acc = 0.0;
    for (std::size_t f = 0; f < features_.size(); ++f) {
      double w = decoded_(r, f);
      bool touched = false;
      for (std::size_t i = 0; i < n; ++i) touched = touched || (flips[i].row == r && flips[i].feature == f);
      if (touched) {
        std::uint8_t word[64];
        const auto src = fc_.word(r, f);
        std::copy(src.begin(), src.end(), word);
        for (std::size_t i = 0; i < n; ++i) {
          if (flips[i].row == r && flips[i].feature == f) word[flips[i].bit] ^= 1u;
        }
        w = decode_element(std::span<const std::uint8_t>(word, src.size()), cfg_);
      }
      acc += w * features_[f];
    }
    return acc;
  }

  const BitTensor &fc_;
  QuantConfig cfg_;
  std::vector<double> features_;
  Matrix decoded_;
  std::vector<double> base_;
};

}  // namespace detail

/// Every flip set of size <= max_flips (within the scope) that makes `model` predict t
/// on the sample with extractor output `features`. Sorted by size, then coordinates.
inline std::vector<FlipSet> brute_force_flips(const VictimModel &model, std::span<const double> features,
                                              std::size_t s, std::size_t t, std::size_t max_flips,
                                              FlipScope scope = FlipScope::variable_rows) {
  model.validate();
  const auto &shape = model.fc_bits.shape();
  if (s >= shape.rows || t >= shape.rows || s == t) throw SetupError("brute_force_flips: bad class pair");
  if (max_flips < 1 || max_flips > 2) throw SetupError("brute_force_flips: max_flips must be 1 or 2");
  if (features.size() != shape.features) throw ShapeError("brute_force_flips: feature width mismatch");
  if (predict(features, model.fc_bits, model.fc_quant) != s) {
    throw SetupError("brute_force_flips: model does not predict the source class");
  }

  std::vector<std::size_t> rows;
  if (scope == FlipScope::variable_rows) rows = {std::min(s, t), std::max(s, t)};
  else for (std::size_t r = 0; r < shape.rows; ++r) rows.push_back(r);

  std::vector<FlipCoord> coords;
  for (auto r : rows)
    for (std::size_t f = 0; f < shape.features; ++f)
      for (std::size_t q = 0; q < shape.bits; ++q) coords.push_back({r, f, q});

  if (coords.size() > kMaxSingleFlipBits) {
    throw SizeError("brute_force_flips: " + std::to_string(coords.size()) + " bits in scope exceeds " +
                    std::to_string(kMaxSingleFlipBits));
  }
  if (max_flips == 2 && coords.size() > kMaxPairFlipBits) {
    throw SizeError("brute_force_flips: pair enumeration over " + std::to_string(coords.size()) +
                    " bits exceeds " + std::to_string(kMaxPairFlipBits));
  }

  const detail::FlipEvaluator eval(model.fc_bits, model.fc_quant, features);
  const std::size_t n = coords.size();

  std::vector<FlipSet> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (eval.predict_with(&coords[i], 1) == t) out.push_back(FlipSet{{coords[i]}});
  }
  if (max_flips == 2) {
    // Pairs (i, j), i < j, partitioned by i across workers; chunks merged in order.
    const std::size_t workers = worker_count(n);
    std::vector<std::vector<FlipSet>> parts(workers);
    auto work = [&](std::size_t w) {
      for (std::size_t i = w; i < n; i += workers) {
        for (std::size_t j = i + 1; j < n; ++j) {
          const FlipCoord pair[2] = {coords[i], coords[j]};
          if (eval.predict_with(pair, 2) == t) parts[w].push_back(FlipSet{{pair[0], pair[1]}});
        }
      }
    };
    if (workers == 1) {
      work(0);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    }
    std::vector<FlipSet> pairs;
    for (auto &p : parts) pairs.insert(pairs.end(), p.begin(), p.end());
    std::sort(pairs.begin(), pairs.end(), flipset_less);
    out.insert(out.end(), pairs.begin(), pairs.end());
  }
  return out;
}

inline std::vector<FlipSet> brute_force_flips(const VictimModel &model, const std::vector<double> &input,
                                              std::size_t s, std::size_t t, std::size_t max_flips,
                                              FlipScope scope = FlipScope::variable_rows) {
  const auto f = extract_features(model, input);
  return brute_force_flips(model, std::span<const double>(f), s, t, max_flips, scope);
}

// ---------------------------------------------------------------------------
// Greedy bit search

struct GreedyOptions {
  std::size_t budget = 64;
  double margin = 0.0;  // k used inside loss_m for scoring
  MarginRule margin_rule = MarginRule::others_only;
  FlipScope scope = FlipScope::full_layer;
};

struct GreedyOutcome {
  FlipSet flips;
  AttackResult result;  // released = attacked model's layer, flipped = after the flips
};

/// Repeatedly flip the in-scope bit whose flip direction most decreases loss_m to first
/// order (relaxed gradient times direction), never flipping a bit twice, until `model`
/// predicts t on `input` or the budget is spent. `eval` (optional) gives accuracy metrics.
inline GreedyOutcome greedy_bit_attack(const VictimModel &model, const std::vector<double> &input,
                                       std::size_t s, std::size_t t, const GreedyOptions &opt = {},
                                       const Dataset *eval = nullptr) {
  model.validate();
  const auto &shape = model.fc_bits.shape();
  if (s >= shape.rows || t >= shape.rows || s == t) throw SetupError("greedy_bit_attack: bad class pair");
  const auto features = extract_features(model, input);
  const std::span<const double> fv(features);
  if (predict(fv, model.fc_bits, model.fc_quant) != s) {
    throw SetupError("greedy_bit_attack: model does not predict the source class");
  }
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<std::size_t> rows;
  if (opt.scope == FlipScope::variable_rows) rows = {std::min(s, t), std::max(s, t)};
  else for (std::size_t r = 0; r < shape.rows; ++r) rows.push_back(r);

  const auto w = bit_weights(model.fc_quant.q_bits);
  const double c = opt.margin_rule == MarginRule::all_rivals ? opt.margin : 0.0;
  BitTensor bits = model.fc_bits;
  BitTensor used(shape);
  GreedyOutcome out;

  while (predict(fv, bits, model.fc_quant) != t && out.flips.n_flip() < opt.budget) {
    const auto p = logits(fv, bits, model.fc_quant);
    std::vector<double> dp(p.size(), 0.0);
    malicious_hinge_grad(p, s, t, opt.margin, c, 1.0, dp);

    double best_score = 0.0;
    FlipCoord best{};
    bool found = false;
    for (auto r : rows) {
      if (dp[r] == 0.0) continue;
      for (std::size_t f = 0; f < shape.features; ++f) {
        for (std::size_t q = 0; q < shape.bits; ++q) {
          if (used.at(r, f, q)) continue;
          const double g = dp[r] * w[q] * model.fc_quant.step_size * fv[f];
          const double dir = bits.at(r, f, q) ? -1.0 : 1.0;
          const double score = -g * dir;
          if (score > best_score) {
            best_score = score;
            best = {r, f, q};
            found = true;
          }
        }
      }
    }
    if (!found) break;
    bits.at(best.row, best.feature, best.bit) ^= 1u;
    used.at(best.row, best.feature, best.bit) = 1u;
    out.flips.coords.push_back(best);
  }

  auto &res = out.result;
  res.success = predict(fv, bits, model.fc_quant) == t;
  res.rows = rows;
  res.released = model.fc_bits;
  res.flipped = std::move(bits);
  res.n_flip = out.flips.n_flip();
  res.iterations = out.flips.n_flip();
  if (eval && !eval->empty()) detail::fill_accuracies(res, model, *eval);
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Bit distance from the original model's layer to the flipped layer of `result`.
inline std::size_t deployment_distance(const VictimModel &original, const AttackResult &result) {
  return bit_distance(original.fc_bits, result.flipped);
}

}  // namespace tba

#endif  // TBA_BASELINES_HPP
