#pragma once

#include <stdexcept>
#include <string>

namespace fblcrd {

/// Malformed or inconsistent problem instance (bad pmf, bad distortion
/// matrix, shape mismatch, unparsable model file).
class ModelError : public std::runtime_error {
 public:
  enum class Kind {
    negative_probability,
    sum_violation,
    negative_distortion,
    empty_alphabet,
    shape_mismatch,
    non_finite,
    not_irreducible,
    periodic,
    parse,
  };

  ModelError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// The requested distortion lies below the feasibility floor of the source.
class InfeasibleDistortion : public std::runtime_error {
 public:
  InfeasibleDistortion(double requested, double floor)
      : std::runtime_error("distortion " + std::to_string(requested) +
                           " is below the feasibility floor " +
                           std::to_string(floor)),
        requested_(requested),
        floor_(floor) {}

  double requested() const noexcept { return requested_; }
  double floor() const noexcept { return floor_; }

 private:
  double requested_;
  double floor_;
};

/// An iterative method stopped before reaching its tolerance.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : std::runtime_error(what + " (residual " + std::to_string(residual) +
                           ")"),
        residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

}  // namespace fblcrd
