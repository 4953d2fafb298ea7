#pragma once

#include <stdexcept>
#include <string>

namespace peis {

/// Base of every error thrown by the library. `kind()` is a stable
/// machine-readable tag used by the CLI error record.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

class ParameterDomainError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "parameter_domain"; }
};

class NumericDomainError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric_domain"; }
};

class ContractError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "contract"; }
};

/// Error that happened at a specific (0-based) period.
class PeriodError : public Error {
 public:
  PeriodError(const std::string& what, int period)
      : Error(what + " (period " + std::to_string(period) + ")"), period_(period) {}
  int period() const noexcept { return period_; }

 private:
  int period_;
};

class KernelDegeneracyError : public PeriodError {
 public:
  using PeriodError::PeriodError;
  const char* kind() const noexcept override { return "kernel_degeneracy"; }
};

class SingularDesignError : public PeriodError {
 public:
  SingularDesignError(const std::string& what, int period, int iteration)
      : PeriodError(what + " at iteration " + std::to_string(iteration), period),
        iteration_(iteration) {}
  int iteration() const noexcept { return iteration_; }
  const char* kind() const noexcept override { return "singular_design"; }

 private:
  int iteration_;
};

/// All particle weights vanished.
class DegeneracyError : public PeriodError {
 public:
  using PeriodError::PeriodError;
  const char* kind() const noexcept override { return "degeneracy"; }
};

/// A weight became NaN or +inf.
class EstimatorFailure : public PeriodError {
 public:
  using PeriodError::PeriodError;
  const char* kind() const noexcept override { return "estimator_failure"; }
};

class DegenerateSampleError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "degenerate_sample"; }
};

class ProposalMismatchError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "proposal_mismatch"; }
};

class StudyIntegrityError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "study_integrity"; }
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  int line() const noexcept { return line_; }
  const char* kind() const noexcept override { return "parse"; }

 private:
  int line_;
};

class UsageError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "usage"; }
};

}  // namespace peis
