#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace granular {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Vec2 = Eigen::Vector2d;

/// Invalid configuration or violated precondition. CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Dimension mismatch between data artifacts.
class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values produced by integration, evaluation, or training.
/// CLI exit code 3.
class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace granular
