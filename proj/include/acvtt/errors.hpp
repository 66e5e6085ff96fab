#pragma once

#include <stdexcept>
#include <string>

namespace acvtt {

// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Invalid scalar parameter (range, ordering).
class ParameterError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Data does not satisfy the slice-sampling protocol (e.g. D-1 not divisible by r).
class ProtocolError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class BoundsError : public std::out_of_range {
  public:
    using std::out_of_range::out_of_range;
};

// Caller violated an API contract (e.g. backward on a non-scalar).
class ContractError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Missing or inconsistent persisted state (checkpoints, resume).
class StateError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace acvtt
