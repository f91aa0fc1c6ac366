#pragma once

#include <stdexcept>
#include <string>

namespace cfp {

// Base of every error thrown by the library. The CLI maps the subclasses
// onto exit codes (see tools/commands.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent model files.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Bad arguments to a model operation: empty or over-long sequences, token ids
// out of range, interventions that do not resolve.
class InputError : public Error {
 public:
  using Error::Error;
};

// Dataset records that violate the contrastive-pair invariants.
class DatasetError : public Error {
 public:
  using Error::Error;
};

// Zero-norm target directions, identical steering representations and
// similar numerically meaningless requests.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfp
