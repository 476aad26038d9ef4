#ifndef SSVR_ERRORS_HPP
#define SSVR_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace ssvr {

// Shape or argument mismatch in a tensor op. Message names the op and the
// offending dimensions.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

class UnknownOpError : public std::invalid_argument {
 public:
  explicit UnknownOpError(const std::string& msg)
      : std::invalid_argument(msg) {}
};

// Misuse of a computation graph (non-scalar backward, reuse after backward).
class GraphError : public std::logic_error {
 public:
  explicit GraphError(const std::string& msg) : std::logic_error(msg) {}
};

// Bad input data: malformed CSV, missing files, invalid labels. CLI exit 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class CheckpointVersionError : public DataError {
 public:
  explicit CheckpointVersionError(const std::string& msg) : DataError(msg) {}
};

class CheckpointCorruptError : public DataError {
 public:
  explicit CheckpointCorruptError(const std::string& msg) : DataError(msg) {}
};

// Non-finite loss or other numerical failure during training. CLI exit 3.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ssvr

#endif  // SSVR_ERRORS_HPP
