#pragma once

#include <stdexcept>
#include <string>

namespace flipreid {

/// Input or configuration that violates a documented invariant.
class ValidationError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Model or pipeline configuration that cannot be executed (shape mismatch,
/// infeasible slicing, too few identities for the sampler, ...).
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A binary or text file did not parse.
class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// The filesystem refused a read or write.
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class TrainingDiverged : public std::runtime_error {
public:
  TrainingDiverged(std::size_t step, const std::string &what)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

private:
  std::size_t step_;
};

} // namespace flipreid
