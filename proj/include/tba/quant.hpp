#ifndef TBA_QUANT_HPP
#define TBA_QUANT_HPP

// Q-bit two's-complement weight codec.
//
// A word is stored sign bit first: bits[0] = v_Q, bits[Q-1] = v_1, and decodes to
//   (-2^{Q-1} v_Q + sum_{i=1}^{Q-1} 2^{i-1} v_i) * step_size.
// The integer part is accumulated exactly in double before scaling, so binary and
// relaxed decoding agree bit for bit on 0/1 inputs.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>

#include "tba/errors.hpp"
#include "tba/tensor.hpp"

namespace tba {

struct QuantConfig {
  int q_bits = 8;
  double step_size = 1.0;

  void validate() const {
    if (q_bits < 2 || q_bits > 16) {
      throw CodecError("q_bits must lie in [2,16], got " + std::to_string(q_bits));
    }
    if (!(step_size > 0.0) || !std::isfinite(step_size)) {
      throw CodecError("step_size must be positive and finite");
    }
  }

  std::int64_t min_code() const noexcept { return -(std::int64_t{1} << (q_bits - 1)); }
  std::int64_t max_code() const noexcept { return (std::int64_t{1} << (q_bits - 1)) - 1; }

  friend bool operator==(const QuantConfig &, const QuantConfig &) = default;
};

/// Integer weight of bit position `index` (0 = sign bit) in a Q-bit word.
inline double bit_weight(int q_bits, std::size_t index) noexcept {
  if (index == 0) return -std::ldexp(1.0, q_bits - 1);
  return std::ldexp(1.0, q_bits - 1 - static_cast<int>(index));
}

/// Integer weights for every bit position of a Q-bit word.
inline std::vector<double> bit_weights(int q_bits) {
  std::vector<double> w(static_cast<std::size_t>(q_bits));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = bit_weight(q_bits, i);
  return w;
}

/// Two's-complement integer code held by a binary word.
inline std::int64_t decode_code(std::span<const std::uint8_t> bits, int q_bits) {
  if (bits.size() != static_cast<std::size_t>(q_bits)) {
    throw CodecError("word length " + std::to_string(bits.size()) + " != q_bits " +
                     std::to_string(q_bits));
  }
  std::int64_t code = bits[0] ? -(std::int64_t{1} << (q_bits - 1)) : 0;
  for (std::size_t i = 1; i < bits.size(); ++i) {
    if (bits[i]) code += std::int64_t{1} << (q_bits - 1 - static_cast<int>(i));
  }
  return code;
}

inline double decode_element(std::span<const std::uint8_t> bits, const QuantConfig &cfg) {
  return static_cast<double>(decode_code(bits, cfg.q_bits)) * cfg.step_size;
}

/// Unclamped linear decode of a relaxed word; used inside the attack objective, where
/// iterates legitimately leave [0,1].
inline double word_value(std::span<const double> values, const QuantConfig &cfg) {
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) acc += bit_weight(cfg.q_bits, i) * values[i];
  return acc * cfg.step_size;
}

struct CodecDiagnostics {
  std::atomic<std::size_t> clamped{0};
};

/// Decode a relaxed word whose entries should lie in [0,1]. Entries further than 1e-6
/// outside are clamped and counted in `diag` when provided.
inline double decode_relaxed(std::span<const double> values, const QuantConfig &cfg,
                             CodecDiagnostics *diag = nullptr) {
  constexpr double slack = 1e-6;
  if (values.size() != static_cast<std::size_t>(cfg.q_bits)) {
    throw CodecError("relaxed word length " + std::to_string(values.size()) +
                     " != q_bits " + std::to_string(cfg.q_bits));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    double v = values[i];
    if (v < -slack || v > 1.0 + slack) {
      v = std::clamp(v, 0.0, 1.0);
      if (diag) diag->clamped.fetch_add(1, std::memory_order_relaxed);
    }
    acc += bit_weight(cfg.q_bits, i) * v;
  }
  return acc * cfg.step_size;
}

/// Write `code` into `out` in two's complement, sign bit first.
inline void encode_code(std::int64_t code, std::span<std::uint8_t> out) {
  const auto q = out.size();
  const auto mask = (std::uint64_t{1} << q) - 1;
  const auto raw = static_cast<std::uint64_t>(code) & mask;
  for (std::size_t i = 0; i < q; ++i) out[i] = static_cast<std::uint8_t>((raw >> (q - 1 - i)) & 1u);
}

/// Round half away from zero, then clamp into the two's-complement range.
inline std::int64_t quantize_value(double w, const QuantConfig &cfg) {
  const double scaled = std::round(w / cfg.step_size);
  const double lo = static_cast<double>(cfg.min_code());
  const double hi = static_cast<double>(cfg.max_code());
  return static_cast<std::int64_t>(std::clamp(scaled, lo, hi));
}

/// Encode a K x V weight matrix with a fixed step size.
inline BitTensor quantize_with_step(const Matrix &weights, const QuantConfig &cfg) {
  cfg.validate();
  BitTensor out(Shape3{weights.rows(), weights.cols(), static_cast<std::size_t>(cfg.q_bits)});
  for (std::size_t r = 0; r < weights.rows(); ++r) {
    for (std::size_t c = 0; c < weights.cols(); ++c) {
      encode_code(quantize_value(weights(r, c), cfg), out.word(r, c));
    }
  }
  return out;
}

/// Symmetric max-abs quantization: step = max|W| / (2^{Q-1} - 1).
inline std::pair<BitTensor, QuantConfig> quantize_layer(const Matrix &weights, int q_bits) {
  double max_abs = 0.0;
  for (double w : weights.values()) {
    if (!std::isfinite(w)) throw CodecError("quantize_layer: non-finite weight");
    max_abs = std::max(max_abs, std::abs(w));
  }
  if (max_abs == 0.0) throw CodecError("quantize_layer: all-zero weights give a degenerate step size");
  QuantConfig cfg{q_bits, 1.0};
  cfg.validate();
  cfg.step_size = max_abs / static_cast<double>(cfg.max_code());
  return {quantize_with_step(weights, cfg), cfg};
}

/// Decode every word of a bit tensor into a (rows x features) matrix.
inline Matrix dequantize(const BitTensor &bits, const QuantConfig &cfg) {
  if (bits.shape().bits != static_cast<std::size_t>(cfg.q_bits)) {
    throw CodecError("dequantize: tensor word size does not match q_bits");
  }
  Matrix out(bits.shape().rows, bits.shape().features);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = decode_element(bits.word(r, c), cfg);
  }
  return out;
}

/// Hamming distance over all bits.
inline std::size_t bit_distance(const BitTensor &a, const BitTensor &b) {
  require_same_shape(a.shape(), b.shape(), "bit_distance");
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] != b[i]);
  return d;
}

/// Threshold rule: 1 if x >= 1/2 else 0.
inline BitTensor binarize(const RelaxedTensor &values) {
  BitTensor out(values.shape());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] >= 0.5 ? 1 : 0;
  return out;
}

}  // namespace tba

#endif  // TBA_QUANT_HPP
