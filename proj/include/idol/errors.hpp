#pragma once

#include <stdexcept>
#include <string>

namespace idol {

// Invalid numeric input to a physical relation (non-positive radius, pressure
// outside the cyclone's pressure range, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Configuration or argument validation failure. Maps to CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Tensor/array shape disagreement (wrong rank, byte length mismatch, ...).
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent on-disk artifact (manifest, checkpoint).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training diverged (non-finite loss).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace idol
