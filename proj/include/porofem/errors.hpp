#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace porofem {

/// Base class for all porofem exceptions.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid user-facing configuration: mesh sizes, material ranges, config files.
/// Carries the full list of problems found, not just the first.
class InvalidConfigError : public Error {
 public:
  explicit InvalidConfigError(const std::string& what) : Error(what) {}
  InvalidConfigError(const std::string& what, std::vector<std::string> issues)
      : Error(what + "\n  - " + join(issues)), issues_(std::move(issues)) {}
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += "\n  - ";
      s += v[i];
    }
    return s;
  }
  std::vector<std::string> issues_;
};

/// Element with non-positive Jacobian determinant; names the element index.
class DegenerateElementError : public Error {
 public:
  DegenerateElementError(const std::string& what, int element_index)
      : Error(what), element_index(element_index) {}
  int element_index;
};

/// Constitutive evaluation asked outside its admissible domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Direct linear solver failure; pivot_index < 0 when unknown.
class SolverError : public Error {
 public:
  explicit SolverError(const std::string& what, int pivot_index = -1)
      : Error(what), pivot_index(pivot_index) {}
  int pivot_index;
};

/// Newton iteration exceeded its budget; carries the residual norm history.
class NonconvergenceError : public Error {
 public:
  NonconvergenceError(const std::string& what, std::vector<double> history)
      : Error(what), residual_history(std::move(history)) {}
  std::vector<double> residual_history;
};

/// Non-finite value produced during assembly; message carries the location.
class DivergedStateError : public Error {
 public:
  using Error::Error;
};

/// Request that the produced results cannot serve (e.g. unscheduled output time).
class InvalidRequestError : public Error {
 public:
  using Error::Error;
};

/// Broken internal invariant (a porofem bug, not a user error).
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace porofem
