#pragma once

#include <stdexcept>
#include <string>

namespace memlab {

// Base of every error raised by the library. Subclasses name the failure
// category so callers (and the CLI) can report it without string matching.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class StateError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class DegenerateError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class LengthError : public Error { using Error::Error; };
class LayoutError : public Error { using Error::Error; };
class GenerationError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

}  // namespace memlab
