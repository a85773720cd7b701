#pragma once

#include <Eigen/Dense>

#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

namespace dbs {

using Vec3 = Eigen::Vector3d;
using Complex = std::complex<double>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline constexpr double kPi = 3.14159265358979323846;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition or input-format violation.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// An iterative solve that failed to converge, or a singular system.
class SolverError : public Error {
 public:
  using Error::Error;
};

/// Non-finite state in a time integration.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Collects every violation found while validating an input, not just the first.
class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) {
      if (!out.empty()) out += "; ";
      out += s;
    }
    return out;
  }
  std::vector<std::string> violations_;
};

// Real part for both scalar kinds, used when a complex field is reported as real.
inline double real_part(double v) { return v; }
inline double real_part(const Complex& v) { return v.real(); }

}  // namespace dbs
