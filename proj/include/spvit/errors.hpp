#pragma once

#include <stdexcept>

namespace spvit {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: config/format/dimension -> 2, io -> 3, anything else -> 1.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

}  // namespace spvit
