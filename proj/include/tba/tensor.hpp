#ifndef TBA_TENSOR_HPP
#define TBA_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tba/errors.hpp"

namespace tba {

/// Shape of a bit-level weight tensor: rows (output classes) x features x bits per word.
struct Shape3 {
  std::size_t rows = 0;
  std::size_t features = 0;
  std::size_t bits = 0;

  constexpr std::size_t size() const noexcept { return rows * features * bits; }
  constexpr std::size_t words() const noexcept { return rows * features; }
  friend constexpr bool operator==(const Shape3 &, const Shape3 &) = default;

  std::string str() const {
    return "(" + std::to_string(rows) + "," + std::to_string(features) + "," +
           std::to_string(bits) + ")";
  }
};

inline void require_same_shape(const Shape3 &a, const Shape3 &b, const char *what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

/// Dense row-major (rows, features, bits) storage. Within a word, index 0 is the sign bit.
template <typename T>
class BitLayout {
 public:
  BitLayout() = default;
  explicit BitLayout(Shape3 shape, T fill = T{}) : shape_(shape), data_(shape.size(), fill) {}
  BitLayout(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("payload size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  const Shape3 &shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::size_t offset(std::size_t row, std::size_t feature, std::size_t bit) const noexcept {
    return (row * shape_.features + feature) * shape_.bits + bit;
  }

  T &at(std::size_t row, std::size_t feature, std::size_t bit) {
    return data_[offset(row, feature, bit)];
  }
  const T &at(std::size_t row, std::size_t feature, std::size_t bit) const {
    return data_[offset(row, feature, bit)];
  }

  T &operator[](std::size_t i) { return data_[i]; }
  const T &operator[](std::size_t i) const { return data_[i]; }

  std::span<T> word(std::size_t row, std::size_t feature) {
    return {data_.data() + offset(row, feature, 0), shape_.bits};
  }
  std::span<const T> word(std::size_t row, std::size_t feature) const {
    return {data_.data() + offset(row, feature, 0), shape_.bits};
  }

  std::span<T> row(std::size_t r) {
    return {data_.data() + offset(r, 0, 0), shape_.features * shape_.bits};
  }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + offset(r, 0, 0), shape_.features * shape_.bits};
  }

  std::vector<T> &values() noexcept { return data_; }
  const std::vector<T> &values() const noexcept { return data_; }

  friend bool operator==(const BitLayout &, const BitLayout &) = default;

 private:
  Shape3 shape_{};
  std::vector<T> data_;
};

/// Quantized weights at bit granularity; every element is 0 or 1.
class BitTensor : public BitLayout<std::uint8_t> {
 public:
  BitTensor() = default;
  explicit BitTensor(Shape3 shape) : BitLayout(shape, 0) {}
  BitTensor(Shape3 shape, std::vector<std::uint8_t> data) : BitLayout(shape, std::move(data)) {
    for (auto v : values()) {
      if (v > 1) throw CodecError("BitTensor element outside {0,1}");
    }
  }

  /// Rows `rows` of this tensor, in the given order.
  BitTensor select_rows(std::span<const std::size_t> rows) const {
    BitTensor out(Shape3{rows.size(), shape().features, shape().bits});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto src = row(rows[r]);
      std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
  }

  /// Copy of this tensor with `rows[r]` replaced by row r of `part`.
  BitTensor with_rows(std::span<const std::size_t> rows, const BitTensor &part) const {
    if (part.shape().rows != rows.size() || part.shape().features != shape().features ||
        part.shape().bits != shape().bits) {
      throw ShapeError("with_rows: partial tensor " + part.shape().str() +
                       " incompatible with " + shape().str());
    }
    BitTensor out = *this;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto src = part.row(r);
      std::copy(src.begin(), src.end(), out.row(rows[r]).begin());
    }
    return out;
  }
};

/// Continuous counterpart of a BitTensor (b, b-hat, u and z variables of the solver).
class RelaxedTensor : public BitLayout<double> {
 public:
  RelaxedTensor() = default;
  explicit RelaxedTensor(Shape3 shape, double fill = 0.0) : BitLayout(shape, fill) {}
  RelaxedTensor(Shape3 shape, std::vector<double> data) : BitLayout(shape, std::move(data)) {}

  static RelaxedTensor from_bits(const BitTensor &bits) {
    RelaxedTensor out(bits.shape());
    for (std::size_t i = 0; i < bits.size(); ++i) out[i] = bits[i];
    return out;
  }
};

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw ShapeError("Matrix payload size mismatch");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double &operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double> &values() noexcept { return data_; }
  const std::vector<double> &values() const noexcept { return data_; }

  friend bool operator==(const Matrix &, const Matrix &) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

}  // namespace tba

#endif  // TBA_TENSOR_HPP
