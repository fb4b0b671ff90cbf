#ifndef TBA_MODEL_HPP
#define TBA_MODEL_HPP

// Small victim classifiers: a frozen dense feature extractor followed by a bias-free,
// Q-bit quantized final layer. Only the final layer is ever attacked.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tba/errors.hpp"
#include "tba/quant.hpp"
#include "tba/tensor.hpp"

namespace tba {

enum class Activation : std::uint8_t { relu = 0, leaky_relu = 1 };

inline double activate(Activation a, double x) noexcept {
  switch (a) {
    case Activation::leaky_relu: return x > 0.0 ? x : 0.01 * x;
    case Activation::relu:
    default: return x > 0.0 ? x : 0.0;
  }
}

inline double activate_grad(Activation a, double pre) noexcept {
  switch (a) {
    case Activation::leaky_relu: return pre > 0.0 ? 1.0 : 0.01;
    case Activation::relu:
    default: return pre > 0.0 ? 1.0 : 0.0;
  }
}

struct Architecture {
  std::size_t input_dim = 16;
  std::vector<std::size_t> hidden{64, 32};  // last width is the feature dimension V
  std::size_t classes = 4;
  Activation activation = Activation::relu;

  std::size_t feature_dim() const { return hidden.empty() ? input_dim : hidden.back(); }

  void validate() const {
    if (input_dim == 0) throw ShapeError("architecture: input_dim must be positive");
    if (hidden.empty() || hidden.size() > 2) {
      throw ShapeError("architecture: expected one or two hidden layers");
    }
    for (auto h : hidden) {
      if (h == 0) throw ShapeError("architecture: hidden widths must be positive");
    }
    if (classes < 2) throw ShapeError("architecture: need at least two classes");
  }

  friend bool operator==(const Architecture &, const Architecture &) = default;
};

struct DenseLayer {
  Matrix weights;  // out x in
  std::vector<double> bias;

  friend bool operator==(const DenseLayer &, const DenseLayer &) = default;
};

struct Dataset {
  Matrix inputs;
  std::vector<int> labels;
  std::optional<Matrix> features;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  void validate(std::size_t classes) const {
    if (inputs.rows() != labels.size()) throw DatasetError("dataset: inputs/labels row mismatch");
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) {
        throw DatasetError("dataset: label " + std::to_string(y) + " outside [0," +
                           std::to_string(classes) + ")");
      }
    }
    if (features && features->rows() != labels.size()) {
      throw DatasetError("dataset: cached features row mismatch");
    }
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.inputs = Matrix(idx.size(), inputs.cols());
    out.labels.reserve(idx.size());
    if (features) out.features = Matrix(idx.size(), features->cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::ranges::copy(inputs.row(idx[i]), out.inputs.row(i).begin());
      out.labels.push_back(labels[idx[i]]);
      if (features) std::ranges::copy(features->row(idx[i]), out.features->row(i).begin());
    }
    return out;
  }

  friend bool operator==(const Dataset &, const Dataset &) = default;
};

struct VictimModel {
  Architecture arch;
  std::vector<DenseLayer> theta;  // frozen feature extractor
  BitTensor fc_bits;              // (K, V, Q)
  QuantConfig fc_quant;
  std::uint64_t seed = 0;
  std::string dataset_id;
  double test_accuracy = 0.0;

  std::size_t class_count() const noexcept { return arch.classes; }
  std::size_t feature_dim() const { return arch.feature_dim(); }

  void validate() const {
    arch.validate();
    if (theta.size() != arch.hidden.size()) throw ShapeError("model: layer count mismatch");
    std::size_t in = arch.input_dim;
    for (std::size_t l = 0; l < theta.size(); ++l) {
      const auto &layer = theta[l];
      if (layer.weights.rows() != arch.hidden[l] || layer.weights.cols() != in ||
          layer.bias.size() != arch.hidden[l]) {
        throw ShapeError("model: extractor layer " + std::to_string(l) + " has wrong shape");
      }
      in = arch.hidden[l];
    }
    const Shape3 expect{arch.classes, arch.feature_dim(), static_cast<std::size_t>(fc_quant.q_bits)};
    require_same_shape(fc_bits.shape(), expect, "model fc_bits");
    fc_quant.validate();
  }

  /// Same extractor, different final layer.
  VictimModel with_fc(BitTensor bits) const {
    require_same_shape(bits.shape(), fc_bits.shape(), "with_fc");
    VictimModel m = *this;
    m.fc_bits = std::move(bits);
    return m;
  }

  friend bool operator==(const VictimModel &, const VictimModel &) = default;
};

// ---------------------------------------------------------------------------
// Inference

/// Activations of every layer for one input; `pre` holds pre-activation values.
struct ForwardTrace {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> post;
};

inline void dense_forward(const DenseLayer &layer, std::span<const double> in,
                          std::vector<double> &out) {
  out.assign(layer.weights.rows(), 0.0);
  for (std::size_t o = 0; o < layer.weights.rows(); ++o) {
    auto w = layer.weights.row(o);
    double acc = layer.bias[o];
    for (std::size_t i = 0; i < in.size(); ++i) acc += w[i] * in[i];
    out[o] = acc;
  }
}

inline ForwardTrace extractor_forward(const std::vector<DenseLayer> &layers, Activation act,
                                      std::span<const double> x) {
  ForwardTrace tr;
  std::vector<double> cur(x.begin(), x.end());
  for (const auto &layer : layers) {
    std::vector<double> pre;
    dense_forward(layer, cur, pre);
    std::vector<double> post(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) post[i] = activate(act, pre[i]);
    tr.pre.push_back(std::move(pre));
    tr.post.push_back(post);
    cur = std::move(post);
  }
  return tr;
}

inline std::vector<double> extract_features(const VictimModel &m, std::span<const double> x) {
  if (x.size() != m.arch.input_dim) {
    throw ShapeError("extract_features: input width " + std::to_string(x.size()) +
                     " != " + std::to_string(m.arch.input_dim));
  }
  auto tr = extractor_forward(m.theta, m.arch.activation, x);
  return std::move(tr.post.back());
}

inline Matrix extract_features(const VictimModel &m, const Matrix &inputs) {
  if (inputs.cols() != m.arch.input_dim) {
    throw ShapeError("extract_features: input width " + std::to_string(inputs.cols()) +
                     " != " + std::to_string(m.arch.input_dim));
  }
  Matrix out(inputs.rows(), m.feature_dim());
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    auto f = extract_features(m, inputs.row(i));
    std::ranges::copy(f, out.row(i).begin());
  }
  return out;
}

/// Fill the feature cache of `data` from model `m`.
inline void cache_features(const VictimModel &m, Dataset &data) {
  data.features = extract_features(m, data.inputs);
}

/// Logit of one class row of a binary final layer.
inline double row_logit(const BitTensor &fc, std::size_t row, std::span<const double> features,
                        const QuantConfig &cfg) {
  double acc = 0.0;
  for (std::size_t j = 0; j < features.size(); ++j) {
    acc += decode_element(fc.word(row, j), cfg) * features[j];
  }
  return acc;
}

/// Logit of one class row of a relaxed final layer (linear in the relaxed values).
inline double row_logit(const RelaxedTensor &fc, std::size_t row,
                        std::span<const double> features, const QuantConfig &cfg) {
  double acc = 0.0;
  for (std::size_t j = 0; j < features.size(); ++j) {
    acc += word_value(fc.word(row, j), cfg) * features[j];
  }
  return acc;
}

template <typename Fc>
std::vector<double> logits(std::span<const double> features, const Fc &fc, const QuantConfig &cfg) {
  if (fc.shape().features != features.size()) {
    throw ShapeError("logits: feature width " + std::to_string(features.size()) +
                     " != layer width " + std::to_string(fc.shape().features));
  }
  if (fc.shape().bits != static_cast<std::size_t>(cfg.q_bits)) {
    throw ShapeError("logits: layer word size does not match q_bits");
  }
  std::vector<double> out(fc.shape().rows);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = row_logit(fc, k, features, cfg);
  return out;
}

/// Argmax with ties broken towards the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw ShapeError("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

template <typename Fc>
std::size_t predict(std::span<const double> features, const Fc &fc, const QuantConfig &cfg) {
  const auto l = logits(features, fc, cfg);
  return argmax(l);
}

inline std::size_t predict(const VictimModel &m, std::span<const double> input) {
  const auto f = extract_features(m, input);
  return predict(std::span<const double>(f), m.fc_bits, m.fc_quant);
}

/// Accuracy of final layer `fc` on features `features` with labels `labels`.
inline double accuracy(const Matrix &features, std::span<const int> labels, const BitTensor &fc,
                       const QuantConfig &cfg) {
  if (labels.empty()) throw DatasetError("accuracy: empty dataset");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predict(features.row(i), fc, cfg) == static_cast<std::size_t>(labels[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

inline double accuracy(const VictimModel &m, const Dataset &data) {
  if (data.empty()) throw DatasetError("accuracy: empty dataset");
  if (data.features) return accuracy(*data.features, data.labels, m.fc_bits, m.fc_quant);
  return accuracy(extract_features(m, data.inputs), data.labels, m.fc_bits, m.fc_quant);
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  int q_bits = 8;
  double learning_rate = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
};

struct TrainedVictim {
  VictimModel model;
  Matrix fc_float;  // full-precision final layer before quantization
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

namespace detail {

inline void softmax_inplace(std::vector<double> &z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (auto &v : z) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto &v : z) v /= sum;
}

inline double float_accuracy(const std::vector<DenseLayer> &theta, Activation act,
                             const Matrix &fc, const Dataset &data) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  std::vector<double> z;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto tr = extractor_forward(theta, act, data.inputs.row(i));
    const auto &f = tr.post.back();
    z.assign(fc.rows(), 0.0);
    for (std::size_t k = 0; k < fc.rows(); ++k) {
      for (std::size_t j = 0; j < f.size(); ++j) z[k] += fc(k, j) * f[j];
    }
    if (argmax(z) == static_cast<std::size_t>(data.labels[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace detail

/// Train extractor + bias-free final layer with minibatch SGD (momentum) on softmax
/// cross-entropy, then quantize the final layer. Deterministic for a given seed.
inline TrainedVictim train_victim(const Dataset &train, const Architecture &arch,
                                  std::uint64_t seed, std::size_t epochs,
                                  const TrainOptions &opt = {},
                                  const Dataset *test = nullptr) {
  arch.validate();
  if (train.empty()) throw TrainingError("train_victim: empty training set");
  train.validate(arch.classes);
  if (train.inputs.cols() != arch.input_dim) throw ShapeError("train_victim: input width mismatch");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<DenseLayer> theta;
  std::size_t in = arch.input_dim;
  for (auto width : arch.hidden) {
    DenseLayer layer{Matrix(width, in), std::vector<double>(width, 0.0)};
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    for (auto &w : layer.weights.values()) w = gauss(rng) * scale;
    theta.push_back(std::move(layer));
    in = width;
  }
  const std::size_t V = arch.feature_dim();
  const std::size_t K = arch.classes;
  Matrix fc(K, V);
  {
    const double scale = std::sqrt(1.0 / static_cast<double>(V));
    for (auto &w : fc.values()) w = gauss(rng) * scale;
  }

  // Momentum buffers.
  std::vector<Matrix> vel_w;
  std::vector<std::vector<double>> vel_b;
  for (const auto &l : theta) {
    vel_w.emplace_back(l.weights.rows(), l.weights.cols());
    vel_b.emplace_back(l.bias.size(), 0.0);
  }
  Matrix vel_fc(K, V);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t stop = std::min(order.size(), start + opt.batch_size);
      const double inv = 1.0 / static_cast<double>(stop - start);

      std::vector<Matrix> grad_w;
      std::vector<std::vector<double>> grad_b;
      for (const auto &l : theta) {
        grad_w.emplace_back(l.weights.rows(), l.weights.cols());
        grad_b.emplace_back(l.bias.size(), 0.0);
      }
      Matrix grad_fc(K, V);
      double batch_loss = 0.0;

      for (std::size_t bi = start; bi < stop; ++bi) {
        const std::size_t idx = order[bi];
        auto x = train.inputs.row(idx);
        auto tr = extractor_forward(theta, arch.activation, x);
        const auto &f = tr.post.back();
        std::vector<double> z(K, 0.0);
        for (std::size_t k = 0; k < K; ++k) {
          for (std::size_t j = 0; j < V; ++j) z[k] += fc(k, j) * f[j];
        }
        detail::softmax_inplace(z);
        const auto y = static_cast<std::size_t>(train.labels[idx]);
        batch_loss -= std::log(std::max(z[y], 1e-300));
        z[y] -= 1.0;  // dL/dlogits

        std::vector<double> delta(V, 0.0);
        for (std::size_t k = 0; k < K; ++k) {
          for (std::size_t j = 0; j < V; ++j) {
            grad_fc(k, j) += z[k] * f[j];
            delta[j] += z[k] * fc(k, j);
          }
        }
        for (std::size_t l = theta.size(); l-- > 0;) {
          for (std::size_t o = 0; o < delta.size(); ++o) delta[o] *= activate_grad(arch.activation, tr.pre[l][o]);
          std::span<const double> lin = l == 0 ? x : std::span<const double>(tr.post[l - 1]);
          std::vector<double> next(lin.size(), 0.0);
          for (std::size_t o = 0; o < delta.size(); ++o) {
            grad_b[l][o] += delta[o];
            auto w = theta[l].weights.row(o);
            auto gw = grad_w[l].row(o);
            for (std::size_t i = 0; i < lin.size(); ++i) {
              gw[i] += delta[o] * lin[i];
              next[i] += delta[o] * w[i];
            }
          }
          delta = std::move(next);
        }
      }
      if (!std::isfinite(batch_loss)) {
        throw TrainingError("train_victim: non-finite loss in epoch " + std::to_string(epoch));
      }

      auto sgd = [&](std::vector<double> &param, std::vector<double> &vel,
                     const std::vector<double> &grad, bool decay) {
        for (std::size_t i = 0; i < param.size(); ++i) {
          double g = grad[i] * inv + (decay ? opt.weight_decay * param[i] : 0.0);
          vel[i] = opt.momentum * vel[i] - opt.learning_rate * g;
          param[i] += vel[i];
        }
      };
      for (std::size_t l = 0; l < theta.size(); ++l) {
        sgd(theta[l].weights.values(), vel_w[l].values(), grad_w[l].values(), true);
        sgd(theta[l].bias, vel_b[l], grad_b[l], false);
      }
      sgd(fc.values(), vel_fc.values(), grad_fc.values(), true);
    }
  }
  for (double w : fc.values()) {
    if (!std::isfinite(w)) throw TrainingError("train_victim: non-finite final-layer weight");
  }

  TrainedVictim out;
  auto [bits, qcfg] = quantize_layer(fc, opt.q_bits);
  out.model.arch = arch;
  out.model.theta = std::move(theta);
  out.model.fc_bits = std::move(bits);
  out.model.fc_quant = qcfg;
  out.model.seed = seed;
  out.fc_float = fc;
  out.train_accuracy = accuracy(out.model, train);
  if (test && !test->empty()) out.test_accuracy = accuracy(out.model, *test);
  out.model.test_accuracy = out.test_accuracy;
  return out;
}

}  // namespace tba

#endif  // TBA_MODEL_HPP
