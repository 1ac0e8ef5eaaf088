#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace windssm {

/// Outcome of a local minimization. `value` is the best objective seen and
/// `x` its argument, so value <= f(x0) always holds. `trace` holds the best
/// value after each iteration, non-increasing.
struct OptimResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::vector<double> trace;
};

struct SimplexOptions {
  int max_iterations = 5000;
  double initial_step = 0.1;
  /// Stop when the simplex characteristic size drops below this.
  double size_tolerance = 1e-9;
};

/// Derivative-free Nelder-Mead descent.
OptimResult minimize_simplex(const std::function<double(const Eigen::VectorXd&)>& f,
                             const Eigen::VectorXd& x0, const SimplexOptions& opts = {});

struct LeastSquaresOptions {
  int max_evaluations = 20000;
  double ftol = 1e-14;
  double xtol = 1e-14;
};

/// Levenberg-Marquardt on sum_i r_i(x)^2 with a central-difference Jacobian.
OptimResult minimize_least_squares(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& residuals,
    const Eigen::VectorXd& x0, const LeastSquaresOptions& opts = {});

struct ScalarResult {
  double x = 0.0;
  double value = 0.0;
};

/// Brent minimization of a unimodal function on [lo, hi].
ScalarResult minimize_scalar(const std::function<double(double)>& f, double lo, double hi);

/// Versions of the numerical back ends (name, version).
std::vector<std::pair<std::string, std::string>> backend_versions();

}  // namespace windssm
