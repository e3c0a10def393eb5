#pragma once

// Error taxonomy. Shape/validation/config mistakes throw; arithmetic never does
// (NaN/Inf flow through values, which the fault model depends on).

#include <stdexcept>
#include <string>

namespace rgnn {

// Mismatched matrix dimensions, out-of-range indices, malformed shapes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed input text (dataset files, checkpoints, CLI sub-syntax).
struct ParseError : std::runtime_error {
  ParseError(const std::string& what, long line = -1)
      : std::runtime_error(line >= 0 ? what + " (line " + std::to_string(line) + ")"
                                     : what),
        line_number(line) {}
  long line_number;
};

// Structural graph violations (dangling endpoints, asymmetric undirected lists...).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user-facing configuration: unknown aggregator, invalid hyperparameter,
// missing calibration. CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Internal contract breaches (empty record sets, API misuse).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Training diverged (non-finite loss on clean data); carries the epoch index.
struct TrainError : std::runtime_error {
  TrainError(const std::string& what, int at_epoch)
      : std::runtime_error(what + " (epoch " + std::to_string(at_epoch) + ")"),
        epoch(at_epoch) {}
  int epoch;
};

}  // namespace rgnn
