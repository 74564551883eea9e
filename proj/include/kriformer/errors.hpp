#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kriformer {

// Dimension or shape contract violation.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid hyperparameter or API misuse.
struct ParamError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed input file or inconsistent dataset.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN, divergence, or other numeric failure.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numeric failure during training; carries the loss history up to the abort.
struct TrainingError : NumericError {
  TrainingError(const std::string& msg, std::vector<double> history = {})
      : NumericError(msg), loss_history(std::move(history)) {}
  std::vector<double> loss_history;
};

}  // namespace kriformer
