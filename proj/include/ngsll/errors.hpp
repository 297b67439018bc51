#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ngsll {

/// Incompatible extents between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Value outside an operation's mathematical domain (e.g. log of a non-positive number).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Caller violated a precondition that is not about shapes.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Fewer unmasked features remain than gates requested.
class GateExhaustedError : public std::runtime_error {
 public:
  GateExhaustedError(std::size_t requested, std::size_t available)
      : std::runtime_error("gate exhausted: K=" + std::to_string(requested) + " but only " +
                           std::to_string(available) + " unmasked feature(s) available"),
        requested_(requested),
        available_(available) {}

  std::size_t requested() const noexcept { return requested_; }
  std::size_t available() const noexcept { return available_; }

 private:
  std::size_t requested_;
  std::size_t available_;
};

/// Malformed input file. `offset()` is the byte (or line) position of the problem.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Optimization produced a non-finite loss or could not make progress.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ngsll
