#ifndef TBA_CHECKPOINT_HPP
#define TBA_CHECKPOINT_HPP

// Binary checkpoint format (all integers little-endian):
//
//   "TBA1"                      magic, 4 bytes
//   u16 version                 currently 1
//   u32 input_dim, u32 n_hidden, u32 width[n_hidden], u32 classes, u8 activation
//   per extractor layer:  u32 rows, u32 cols, f64 weights[rows*cols], f64 bias[rows]
//   final layer:          u32 K, u32 V, u32 Q, f64 step_size,
//                         packed bits: ceil(K*V*Q/8) bytes, bit stream ordered by
//                         (class, feature, bit) with each Q-word sign bit (MSB) first,
//                         the first bit of the stream in the MSB of the first byte
//   u64 training seed
//   u32 len, bytes dataset_id
//   f64 test accuracy

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "tba/errors.hpp"
#include "tba/model.hpp"

namespace tba {

inline constexpr char kCheckpointMagic[4] = {'T', 'B', 'A', '1'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const void *p, std::size_t n) {
    auto b = static_cast<const std::uint8_t *>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t> &bytes() { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t> &buf) : buf_(buf) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  void raw(void *p, std::size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

  // Guard against absurd sizes from corrupted headers before allocating.
  std::size_t count(std::uint64_t n, std::size_t elem_size) {
    if (elem_size != 0 && n > remaining() / elem_size) {
      throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint: truncated payload");
    }
    return static_cast<std::size_t>(n);
  }

 private:
  void need(std::size_t n) {
    if (remaining() < n) {
      throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint: truncated payload");
    }
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{buf_[pos_ + i]} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  const std::vector<std::uint8_t> &buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Pack a bit stream 8 per byte, first bit in the most significant position.
inline std::vector<std::uint8_t> pack_bits(const BitTensor &bits) {
  std::vector<std::uint8_t> out((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) out[i / 8] |= static_cast<std::uint8_t>(0x80u >> (i % 8));
  }
  return out;
}

inline BitTensor unpack_bits(Shape3 shape, const std::vector<std::uint8_t> &packed) {
  BitTensor out(shape);
  if (packed.size() < (shape.size() + 7) / 8) {
    throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint: packed bits too short");
  }
  for (std::size_t i = 0; i < shape.size(); ++i) out[i] = (packed[i / 8] >> (7 - i % 8)) & 1u;
  return out;
}

inline std::vector<std::uint8_t> serialize_checkpoint(const VictimModel &m) {
  m.validate();
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(m.arch.input_dim));
  w.u32(static_cast<std::uint32_t>(m.arch.hidden.size()));
  for (auto h : m.arch.hidden) w.u32(static_cast<std::uint32_t>(h));
  w.u32(static_cast<std::uint32_t>(m.arch.classes));
  w.u8(static_cast<std::uint8_t>(m.arch.activation));
  for (const auto &layer : m.theta) {
    w.u32(static_cast<std::uint32_t>(layer.weights.rows()));
    w.u32(static_cast<std::uint32_t>(layer.weights.cols()));
    for (double v : layer.weights.values()) w.f64(v);
    for (double v : layer.bias) w.f64(v);
  }
  const auto &s = m.fc_bits.shape();
  w.u32(static_cast<std::uint32_t>(s.rows));
  w.u32(static_cast<std::uint32_t>(s.features));
  w.u32(static_cast<std::uint32_t>(s.bits));
  w.f64(m.fc_quant.step_size);
  const auto packed = pack_bits(m.fc_bits);
  w.raw(packed.data(), packed.size());
  w.u64(m.seed);
  w.u32(static_cast<std::uint32_t>(m.dataset_id.size()));
  w.raw(m.dataset_id.data(), m.dataset_id.size());
  w.f64(m.test_accuracy);
  return std::move(w.bytes());
}

inline VictimModel deserialize_checkpoint(const std::vector<std::uint8_t> &buf) {
  using Kind = CheckpointError::Kind;
  detail::ByteReader r(buf);
  char magic[4];
  if (buf.size() < 4) throw CheckpointError(Kind::truncated, "checkpoint: truncated header");
  r.raw(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointError(Kind::bad_magic, "checkpoint: bad magic bytes");
  }
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::version_mismatch,
                          "checkpoint: unsupported version " + std::to_string(version));
  }

  VictimModel m;
  m.arch.input_dim = r.u32();
  const auto n_hidden = r.count(r.u32(), 4);
  m.arch.hidden.resize(n_hidden);
  for (auto &h : m.arch.hidden) h = r.u32();
  m.arch.classes = r.u32();
  const auto act = r.u8();
  if (act > 1) throw CheckpointError(Kind::malformed, "checkpoint: unknown activation id");
  m.arch.activation = static_cast<Activation>(act);
  try {
    m.arch.validate();
  } catch (const Error &e) {
    throw CheckpointError(Kind::malformed, std::string("checkpoint: ") + e.what());
  }

  for (std::size_t l = 0; l < n_hidden; ++l) {
    const std::size_t rows = r.u32();
    const std::size_t cols = r.u32();
    DenseLayer layer;
    std::vector<double> w(r.count(std::uint64_t{rows} * cols, 8));
    for (auto &v : w) v = r.f64();
    layer.weights = Matrix(rows, cols, std::move(w));
    layer.bias.resize(r.count(rows, 8));
    for (auto &v : layer.bias) v = r.f64();
    m.theta.push_back(std::move(layer));
  }

  Shape3 s;
  s.rows = r.u32();
  s.features = r.u32();
  s.bits = r.u32();
  m.fc_quant.q_bits = static_cast<int>(s.bits);
  m.fc_quant.step_size = r.f64();
  std::vector<std::uint8_t> packed(r.count((std::uint64_t{s.rows} * s.features * s.bits + 7) / 8, 1));
  r.raw(packed.data(), packed.size());
  m.fc_bits = unpack_bits(s, packed);
  m.seed = r.u64();
  m.dataset_id.resize(r.count(r.u32(), 1));
  r.raw(m.dataset_id.data(), m.dataset_id.size());
  m.test_accuracy = r.f64();
  if (r.remaining() != 0) throw CheckpointError(Kind::malformed, "checkpoint: trailing bytes");
  try {
    m.validate();
  } catch (const Error &e) {
    throw CheckpointError(Kind::malformed, std::string("checkpoint: ") + e.what());
  }
  return m;
}

inline void save_checkpoint(const VictimModel &m, const std::string &path) {
  const auto bytes = serialize_checkpoint(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "checkpoint: cannot open " + path);
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "checkpoint: write failed for " + path);
}

inline VictimModel load_checkpoint(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace tba

#endif  // TBA_CHECKPOINT_HPP
