#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "windssm/covariance.hpp"
#include "windssm/model.hpp"

namespace windssm {

enum class Method { GMM, ML };

std::string to_string(Method method);
Method method_from_string(const std::string& text);

/// Which parts of the model are structured. The named variants are
/// M (AR(1), full), M2 (AR(2), full), M_Lambda (polynomial loading),
/// M_Gamma-gauss and M_Gamma-wave (kernel noise).
struct ModelStructure {
  int latent_order = 1;
  bool polynomial_loading = false;
  std::optional<KernelKind> kernel;

  bool is_reduced() const { return polynomial_loading || kernel.has_value(); }
  bool operator==(const ModelStructure&) const = default;
};

ModelStructure structure_from_name(const std::string& name);
std::string structure_name(const ModelStructure& structure);
ModelStructure structure_of(const ModelParams& params);

/// Free parameter count with sigma pinned by the unit-variance constraint.
int parameter_count(const ModelStructure& structure, int K);

struct FitOptions {
  Method method = Method::ML;
  int max_iterations = 500;
  double tolerance = 1e-8;
  /// Function-evaluation budget of each inner numerical search.
  int optimizer_budget = 20000;
  int restarts = 3;
  std::uint64_t seed = 1;
};

struct FitReport {
  ModelParams params;  // normalized, canonical sign
  Method method = Method::ML;
  ModelStructure structure;
  /// GMM: objective after each optimizer iteration (non-increasing).
  /// ML: log-likelihood before each EM step, then the final value.
  std::vector<double> trace;
  bool converged = false;
  int iterations = 0;
  double gmm_objective = 0.0;
  double log_likelihood = 0.0;
  ModelParams initializer;
  ModelParams gmm_params;
  std::string message;
};

/// Moment distance: sum over lags 0..3 of squared Frobenius
/// norms between empirical and model covariances.
double gmm_objective(const ModelParams& params, const CovSet& empirical);

/// Mean of C3(i,j) / C2(i,j) over entries with |C2(i,j)| >= 1e-6 max|C2|,
/// clamped to (-0.999, 0.999). Throws ValidationError if every entry is
/// excluded.
double init_rho(const CovSet& cov);

/// Loading minimizing |C1_hat - C1|^2 + |C2_hat - C2|^2 at fixed rho with
/// unit latent variance; best of `restarts` seeded random starts.
MatrixXd init_lambda(const CovSet& cov, double rho0, std::uint64_t seed = 1, int restarts = 3);

/// C0_hat minus the latent part of C0 at (rho0, lambda0), projected on
/// the positive semi-definite cone.
MatrixXd init_gamma(const CovSet& cov, double rho0, const MatrixXd& lambda0);

/// Three-step initializer for any structure (reduced parts are least
/// squares projections of the full initial estimates).
ModelParams initial_params(const CovSet& cov, const SiteGrid& grid,
                           const ModelStructure& structure, std::uint64_t seed = 1,
                           int restarts = 3);

FitReport gmm_fit(const Panel& panel, const ModelStructure& structure, const FitOptions& opts);

struct StepResult {
  ModelParams params;
  /// Log-likelihood of the input parameters (computed in the E-step).
  double log_likelihood = 0.0;
  /// True when no block of a generalized step improved the intermediate
  /// function; params are returned unchanged.
  bool stalled = false;
};

/// One EM iteration with analytic M-step for unstructured loading and
/// noise. Throws NumericalError when the updated noise covariance is not
/// positive definite.
StepResult em_step(const ModelParams& params, const Panel& panel);

/// Generalized EM iteration: block-wise improvement of the intermediate
/// function for structured loading and/or noise.
StepResult gem_step(const ModelParams& params, const Panel& panel);

/// GMM followed by EM (or GEM) iterations until the relative
/// log-likelihood change drops below opts.tolerance.
FitReport ml_fit(const Panel& panel, const ModelStructure& structure, const FitOptions& opts);

/// Continues EM/GEM iterations from given parameters.
FitReport ml_refine(const ModelParams& start, const Panel& panel, const FitOptions& opts);

FitReport fit(const Panel& panel, const ModelStructure& structure, const FitOptions& opts);

}  // namespace windssm
