#ifndef TBA_DATA_HPP
#define TBA_DATA_HPP

// Datasets: seeded Gaussian blobs and the `f0,...,f{d-1},label` CSV format.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tba/errors.hpp"
#include "tba/model.hpp"

namespace tba {

struct BlobSpec {
  std::size_t classes = 4;
  std::size_t dim = 16;
  std::size_t per_class = 250;
  double separation = 3.0;  // centroid norm, in units of the per-dimension cluster std
  std::uint64_t seed = 1;

  /// Compact identifier stored in checkpoints so the data can be regenerated.
  std::string id() const {
    std::ostringstream os;
    os.precision(17);
    os << "blobs:classes=" << classes << ",dim=" << dim << ",per_class=" << per_class
       << ",separation=" << separation << ",seed=" << seed;
    return os.str();
  }

  static BlobSpec parse_id(const std::string &id) {
    const std::string prefix = "blobs:";
    if (id.rfind(prefix, 0) != 0) throw DatasetError("not a synthetic blob dataset id: " + id);
    BlobSpec spec;
    std::istringstream is(id.substr(prefix.size()));
    std::string kv;
    while (std::getline(is, kv, ',')) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw DatasetError("malformed blob dataset id: " + id);
      const auto key = kv.substr(0, eq);
      const auto val = kv.substr(eq + 1);
      if (key == "classes") spec.classes = std::stoul(val);
      else if (key == "dim") spec.dim = std::stoul(val);
      else if (key == "per_class") spec.per_class = std::stoul(val);
      else if (key == "separation") spec.separation = std::stod(val);
      else if (key == "seed") spec.seed = std::stoull(val);
      else throw DatasetError("unknown key in blob dataset id: " + key);
    }
    return spec;
  }
};

struct DataSplit {
  Dataset train;
  Dataset test;
};

/// Seeded isotropic Gaussian clusters (unit std) around centroids drawn uniformly on
/// the sphere of radius `separation`; deterministic 80/20 train/test split per class.
inline DataSplit generate_blobs(const BlobSpec &spec) {
  if (spec.per_class == 0 || spec.classes == 0 || spec.dim == 0) {
    throw DatasetError("generate_blobs: empty dataset requested");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<std::vector<double>> centroids(spec.classes, std::vector<double>(spec.dim));
  for (auto &c : centroids) {
    double norm = 0.0;
    for (auto &v : c) {
      v = gauss(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto &v : c) v *= spec.separation / norm;
  }

  const std::size_t n_train = (spec.per_class * 4) / 5;
  const std::size_t n_test = spec.per_class - n_train;
  DataSplit out;
  out.train.inputs = Matrix(n_train * spec.classes, spec.dim);
  out.test.inputs = Matrix(n_test * spec.classes, spec.dim);
  std::size_t tr = 0;
  std::size_t te = 0;
  // Interleave classes so that any prefix is roughly balanced.
  for (std::size_t i = 0; i < spec.per_class; ++i) {
    for (std::size_t k = 0; k < spec.classes; ++k) {
      const bool to_train = i < n_train;
      auto row = to_train ? out.train.inputs.row(tr) : out.test.inputs.row(te);
      for (std::size_t d = 0; d < spec.dim; ++d) row[d] = centroids[k][d] + gauss(rng);
      if (to_train) {
        out.train.labels.push_back(static_cast<int>(k));
        ++tr;
      } else {
        out.test.labels.push_back(static_cast<int>(k));
        ++te;
      }
    }
  }
  return out;
}

inline void write_csv(const Dataset &data, const std::string &path) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot open " + path + " for writing");
  out.precision(17);
  for (std::size_t j = 0; j < data.inputs.cols(); ++j) out << 'f' << j << ',';
  out << "label\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data.inputs.row(i)) out << v << ',';
    out << data.labels[i] << '\n';
  }
}

inline Dataset read_csv(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DatasetError(path + ": missing header");
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header.back() != "label") {
    throw DatasetError(path + ": header must be f0,...,f{d-1},label");
  }
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "f" + std::to_string(j)) throw DatasetError(path + ": bad header column " + header[j]);
  }
  std::vector<double> values;
  Dataset data;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ls, cell, ',')) {
      try {
        if (col < d) values.push_back(std::stod(cell));
        else if (col == d) data.labels.push_back(std::stoi(cell));
      } catch (const std::exception &) {
        throw DatasetError(path + ":" + std::to_string(line_no) + ": unparsable value '" + cell + "'");
      }
      ++col;
    }
    if (col != d + 1) throw DatasetError(path + ":" + std::to_string(line_no) + ": wrong column count");
  }
  data.inputs = Matrix(data.labels.size(), d, std::move(values));
  return data;
}

}  // namespace tba

#endif  // TBA_DATA_HPP
