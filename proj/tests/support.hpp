#ifndef TBA_TEST_SUPPORT_HPP
#define TBA_TEST_SUPPORT_HPP

#include <cstdint>
#include <random>
#include <vector>

#include "tba/experiment.hpp"

namespace tba::testing {

/// Victim whose extractor is ReLU(identity): features equal the (nonnegative) input.
/// The final layer holds integer `codes` (row-major K x V) at step `step`.
inline VictimModel linear_model(std::size_t K, std::size_t V, int Q, double step,
                                const std::vector<std::int64_t> &codes) {
  VictimModel m;
  m.arch.input_dim = V;
  m.arch.hidden = {V};
  m.arch.classes = K;
  DenseLayer id;
  id.weights = Matrix(V, V);
  for (std::size_t i = 0; i < V; ++i) id.weights(i, i) = 1.0;
  id.bias.assign(V, 0.0);
  m.theta = {id};
  m.fc_quant = QuantConfig{Q, step};
  m.fc_bits = BitTensor(Shape3{K, V, static_cast<std::size_t>(Q)});
  for (std::size_t r = 0; r < K; ++r)
    for (std::size_t f = 0; f < V; ++f) {
      std::vector<std::uint8_t> w(static_cast<std::size_t>(Q));
      encode_code(codes.at(r * V + f), w);
      for (std::size_t q = 0; q < w.size(); ++q) m.fc_bits.at(r, f, q) = w[q];
    }
  m.validate();
  return m;
}

/// Reference decode straight from the two's-complement definition.
inline double reference_decode(const std::vector<std::uint8_t> &bits, double step) {
  const int Q = static_cast<int>(bits.size());
  double v = -std::ldexp(1.0, Q - 1) * bits[0];
  for (int i = 1; i < Q; ++i) v += std::ldexp(1.0, Q - 1 - i) * bits[static_cast<std::size_t>(i)];
  return v * step;
}

/// Reference logits: decoded weights times features, summed per row.
inline std::vector<double> reference_logits(const BitTensor &fc, const QuantConfig &cfg,
                                            const std::vector<double> &features) {
  const auto &s = fc.shape();
  std::vector<double> out(s.rows, 0.0);
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t f = 0; f < s.features; ++f) {
      std::vector<std::uint8_t> w(fc.word(r, f).begin(), fc.word(r, f).end());
      out[r] += reference_decode(w, cfg.step_size) * features[f];
    }
  return out;
}

inline std::size_t reference_argmax(const std::vector<double> &v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline BitTensor random_bits(Shape3 shape, std::mt19937_64 &rng) {
  BitTensor t(shape);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = coin(rng) ? 1 : 0;
  return t;
}

/// Default blob victim, trained once per process.
inline const Victim &blob_victim() {
  static const Victim v = prepare_victim(ExperimentConfig{});
  return v;
}

}  // namespace tba::testing

#endif  // TBA_TEST_SUPPORT_HPP
