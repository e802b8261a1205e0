#pragma once

#include <stdexcept>
#include <string>

namespace brainage {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad user-supplied configuration (fractions, hyper-parameters, schema versions).
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed input file content (non-numeric cell, bad header).
struct ParseError : Error {
  using Error::Error;
};

/// Missing or inconsistent input files (absent manifest, orphan matrix file).
struct IngestError : Error {
  using Error::Error;
};

/// Shape mismatch between inputs (ragged region counts, wrong vector length).
struct DimensionError : Error {
  using Error::Error;
};

/// Input violates a mathematical precondition (non-PSD covariance, missing age).
struct ValidationError : Error {
  using Error::Error;
};

/// Numerical failure during computation (divergence, non-finite objective).
struct NumericError : Error {
  using Error::Error;
};

/// Too few observations to compute the requested quantity.
struct InsufficientDataError : Error {
  using Error::Error;
};

}  // namespace brainage
