#pragma once

#include <stdexcept>
#include <string>

namespace clens {

/// Base class for every error the toolkit raises. `tag()` is the short
/// machine-readable category the CLI prints on stderr.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* tag() const noexcept { return "error"; }
};

/// Bad configuration, invalid arguments, violated preconditions.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* tag() const noexcept override { return "config"; }
};

/// Tensor shapes disagree with the model spec or a file manifest.
class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
  const char* tag() const noexcept override { return "shape"; }
};

/// Malformed, truncated or missing on-disk artifact.
class ArtifactError : public Error {
 public:
  using Error::Error;
  const char* tag() const noexcept override { return "artifact"; }
};

/// Non-finite values, divergence, or a statistic that is undefined on the
/// given input (zero variance, zero gap, rank-deficient data).
class NumericError : public Error {
 public:
  using Error::Error;
  const char* tag() const noexcept override { return "numeric"; }
};

/// A statistic is undefined for the given input (e.g. zero variance).
class UndefinedStatistic : public NumericError {
 public:
  using NumericError::NumericError;
  const char* tag() const noexcept override { return "undefined"; }
};

/// A minimal pair failed a filter (e.g. EV gap below the threshold).
class PairRejected : public Error {
 public:
  using Error::Error;
  const char* tag() const noexcept override { return "rejected"; }
};

}  // namespace clens
