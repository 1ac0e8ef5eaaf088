#include "windssm/optimize.hpp"

#include <cmath>
#include <limits>

#include <gsl/gsl_errno.h>
#include <gsl/gsl_version.h>
#include <gsl/gsl_multimin.h>

#include <boost/math/tools/minima.hpp>
#include <boost/version.hpp>
#include <unsupported/Eigen/LevenbergMarquardt>

namespace windssm {

namespace {

constexpr double kPenalty = 1e300;

double finite_or_penalty(double v) { return std::isfinite(v) ? v : kPenalty; }

struct SimplexContext {
  const std::function<double(const Eigen::VectorXd&)>* f;
  Eigen::VectorXd scratch;
  Eigen::VectorXd best_x;
  double best_value;
  int evaluations;
};

double simplex_trampoline(const gsl_vector* v, void* params) {
  auto* ctx = static_cast<SimplexContext*>(params);
  for (Eigen::Index i = 0; i < ctx->scratch.size(); ++i)
    ctx->scratch(i) = gsl_vector_get(v, static_cast<std::size_t>(i));
  const double value = finite_or_penalty((*ctx->f)(ctx->scratch));
  ++ctx->evaluations;
  if (value < ctx->best_value) {
    ctx->best_value = value;
    ctx->best_x = ctx->scratch;
  }
  return value;
}

struct GslVector {
  explicit GslVector(std::size_t n) : ptr(gsl_vector_alloc(n)) {}
  ~GslVector() { gsl_vector_free(ptr); }
  GslVector(const GslVector&) = delete;
  GslVector& operator=(const GslVector&) = delete;
  gsl_vector* ptr;
};

struct GslSimplex {
  explicit GslSimplex(std::size_t n)
      : ptr(gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, n)) {}
  ~GslSimplex() { gsl_multimin_fminimizer_free(ptr); }
  GslSimplex(const GslSimplex&) = delete;
  GslSimplex& operator=(const GslSimplex&) = delete;
  gsl_multimin_fminimizer* ptr;
};

// Residual functor for Eigen's Levenberg-Marquardt with a central-difference
// Jacobian. Tracks the best point seen.
struct ResidualFunctor : Eigen::DenseFunctor<double> {
  ResidualFunctor(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& r, int n,
                  int m)
      : Eigen::DenseFunctor<double>(n, std::max(m, n)), residuals(&r) {}

  // Eigen's solver needs at least as many residuals as unknowns; pad with
  // zeros for under-determined fits.
  Eigen::VectorXd eval(const Eigen::VectorXd& x) const {
    Eigen::VectorXd f = (*residuals)(x);
    if (f.size() == values()) return f;
    Eigen::VectorXd padded = Eigen::VectorXd::Zero(values());
    padded.head(f.size()) = f;
    return padded;
  }

  int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& fvec) {
    fvec = eval(x);
    ++evaluations;
    double value = fvec.squaredNorm();
    if (!std::isfinite(value)) {
      fvec.setConstant(1e150);
      value = kPenalty;
    }
    if (value < best_value) {
      best_value = value;
      best_x = x;
    }
    return 0;
  }

  int df(const Eigen::VectorXd& x, JacobianType& jac) {
    jac.resize(values(), inputs());
    Eigen::VectorXd xp = x;
    for (int j = 0; j < inputs(); ++j) {
      const double h = 1e-6 * std::max(1.0, std::abs(x(j)));
      xp(j) = x(j) + h;
      Eigen::VectorXd fp = eval(xp);
      xp(j) = x(j) - h;
      Eigen::VectorXd fm = eval(xp);
      xp(j) = x(j);
      evaluations += 2;
      jac.col(j) = (fp - fm) / (2.0 * h);
    }
    if (!jac.allFinite()) jac = jac.unaryExpr([](double v) { return std::isfinite(v) ? v : 0.0; });
    return 0;
  }

  const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>* residuals;
  Eigen::VectorXd best_x;
  double best_value = std::numeric_limits<double>::infinity();
  int evaluations = 0;
};

}  // namespace

OptimResult minimize_simplex(const std::function<double(const Eigen::VectorXd&)>& f,
                             const Eigen::VectorXd& x0, const SimplexOptions& opts) {
  const auto n = static_cast<std::size_t>(x0.size());
  OptimResult result;
  SimplexContext ctx{&f, x0, x0, finite_or_penalty(f(x0)), 1};
  result.trace.push_back(ctx.best_value);
  if (n == 0) {
    result.x = x0;
    result.value = ctx.best_value;
    result.converged = true;
    return result;
  }

  gsl_set_error_handler_off();
  GslVector start(n), step(n);
  for (std::size_t i = 0; i < n; ++i) {
    gsl_vector_set(start.ptr, i, x0(static_cast<Eigen::Index>(i)));
    gsl_vector_set(step.ptr, i, opts.initial_step);
  }
  gsl_multimin_function fn{&simplex_trampoline, n, &ctx};
  GslSimplex solver(n);
  gsl_multimin_fminimizer_set(solver.ptr, &fn, start.ptr, step.ptr);

  int iter = 0;
  for (; iter < opts.max_iterations; ++iter) {
    if (gsl_multimin_fminimizer_iterate(solver.ptr) != GSL_SUCCESS) break;
    result.trace.push_back(ctx.best_value);
    const double size = gsl_multimin_fminimizer_size(solver.ptr);
    if (gsl_multimin_test_size(size, opts.size_tolerance) == GSL_SUCCESS) {
      result.converged = true;
      ++iter;
      break;
    }
  }
  result.x = ctx.best_x;
  result.value = ctx.best_value;
  result.iterations = iter;
  result.evaluations = ctx.evaluations;
  return result;
}

OptimResult minimize_least_squares(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& residuals,
    const Eigen::VectorXd& x0, const LeastSquaresOptions& opts) {
  OptimResult result;
  const Eigen::VectorXd r0 = residuals(x0);
  const int n = static_cast<int>(x0.size());
  const int m = static_cast<int>(r0.size());

  ResidualFunctor functor(residuals, n, m);
  functor.best_x = x0;
  functor.best_value = finite_or_penalty(r0.squaredNorm());
  result.trace.push_back(functor.best_value);
  if (n == 0 || m == 0) {
    result.x = x0;
    result.value = functor.best_value;
    result.converged = true;
    return result;
  }

  Eigen::LevenbergMarquardt<ResidualFunctor> lm(functor);
  lm.setMaxfev(opts.max_evaluations);
  lm.setFtol(opts.ftol);
  lm.setXtol(opts.xtol);
  Eigen::VectorXd x = x0;
  auto status = lm.minimizeInit(x);
  int iter = 0;
  if (status != Eigen::LevenbergMarquardtSpace::ImproperInputParameters) {
    do {
      status = lm.minimizeOneStep(x);
      ++iter;
      result.trace.push_back(functor.best_value);
    } while (status == Eigen::LevenbergMarquardtSpace::Running &&
             functor.evaluations < opts.max_evaluations);
  }
  using Eigen::LevenbergMarquardtSpace::Status;
  result.converged = status == Status::RelativeReductionTooSmall ||
                     status == Status::RelativeErrorTooSmall ||
                     status == Status::RelativeErrorAndReductionTooSmall ||
                     status == Status::CosinusTooSmall || status == Status::FtolTooSmall ||
                     status == Status::XtolTooSmall || status == Status::GtolTooSmall;
  result.x = functor.best_x;
  result.value = functor.best_value;
  result.iterations = iter;
  result.evaluations = functor.evaluations;
  return result;
}

ScalarResult minimize_scalar(const std::function<double(double)>& f, double lo, double hi) {
  const auto [x, value] = boost::math::tools::brent_find_minima(
      [&f](double t) { return finite_or_penalty(f(t)); }, lo, hi,
      std::numeric_limits<double>::digits / 2);
  return {x, value};
}

std::vector<std::pair<std::string, std::string>> backend_versions() {
  return {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                        "." + std::to_string(EIGEN_MINOR_VERSION)},
          {"gsl", GSL_VERSION},
          {"boost", BOOST_LIB_VERSION}};
}

}  // namespace windssm
