#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace kk {

/// Precondition violated by the caller (bad time span, non-finite point, ...).
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A model coefficient produced a non-finite value.
class ModelError : public std::runtime_error {
 public:
  ModelError(const std::string& what, double t, Eigen::VectorXd x)
      : std::runtime_error(what), t_(t), x_(std::move(x)) {}
  double time() const { return t_; }
  const Eigen::VectorXd& location() const { return x_; }

 private:
  double t_;
  Eigen::VectorXd x_;
};

/// Numerical procedure failed; `estimate` carries the best value reached.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what, double estimate = 0.0)
      : std::runtime_error(what), estimate_(estimate) {}
  double estimate() const { return estimate_; }

 private:
  double estimate_;
};

/// ODE step size underflow. Holds the last accepted state.
class IntegrationError : public NumericError {
 public:
  IntegrationError(const std::string& what, double t_last, Eigen::VectorXd y_last)
      : NumericError(what), t_last_(t_last), y_last_(std::move(y_last)) {}
  double last_time() const { return t_last_; }
  const Eigen::VectorXd& last_state() const { return y_last_; }

 private:
  double t_last_;
  Eigen::VectorXd y_last_;
};

}  // namespace kk
