#ifndef TBA_ERRORS_HPP
#define TBA_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace tba {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CodecError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, truncated, malformed };

  CheckpointError(Kind kind, const std::string &what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

// Attack precondition violated (e.g. target sample not classified as its source).
class SetupError : public Error {
 public:
  using Error::Error;
};

// Exhaustive enumeration refused because the search space is too large.
class SizeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace tba

#endif  // TBA_ERRORS_HPP
