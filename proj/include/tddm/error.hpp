#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tddm {

// Error hierarchy. Every failure a caller can act on derives from tddm::Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or array shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration: non-divisible segment counts, bad head counts, unknown keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated a documented precondition (non-scalar loss, bad labels, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Degenerate normalization statistics (zero spread, no valid entries).
class StatsError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content. Carries the index of the offending record.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, long record_index)
      : Error(what), record_index_(record_index) {}
  long record_index() const noexcept { return record_index_; }

 private:
  long record_index_;
};

/// Bad command-line usage or a missing input artifact.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during training. Carries the seed of the offending batch.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, std::uint64_t batch_seed)
      : Error(what), batch_seed_(batch_seed) {}
  std::uint64_t batch_seed() const noexcept { return batch_seed_; }

 private:
  std::uint64_t batch_seed_;
};

}  // namespace tddm
