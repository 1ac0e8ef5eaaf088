#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "windssm/estimation.hpp"
#include "windssm/model.hpp"
#include "windssm/preprocess.hpp"

namespace windssm {

/// Per-site forecast-error variance over raw-series variance, pooled over
/// replicates, on rows t >= skip. Throws ValidationError on shape mismatch
/// or a zero-variance site.
VectorXd mspe(const std::vector<MatrixXd>& observed, const std::vector<MatrixXd>& forecasts,
              int skip = 1);

/// Row t holds the one-step forecast of y_t. Row 0 has no predecessor and
/// repeats y_0; score from row 1.
std::vector<MatrixXd> persistence_forecast(const std::vector<MatrixXd>& series);

/// Kalman one-step predictive means (row 0 is the stationary mean, zero).
std::vector<MatrixXd> model_forecast(const ModelParams& params,
                                     const std::vector<MatrixXd>& series);

struct Var1Model {
  MatrixXd coef;   // y_t = coef y_{t-1} + e_t
  MatrixXd noise;  // cov(e_t)
};

/// Pooled least squares without intercept. Throws ValidationError when
/// R (T - 1) <= K or the lagged design is singular.
Var1Model var1_fit(const Panel& panel);
std::vector<MatrixXd> var1_forecast(const Var1Model& model, const std::vector<MatrixXd>& series);
/// Exact Gaussian log-likelihood: y_0 from the stationary law when the
/// coefficient matrix is stable, otherwise conditional on y_0.
double var1_log_likelihood(const Var1Model& model, const Panel& panel);
int var1_parameter_count(int K);

double bic(double log_likelihood, double n_params, double n_obs);

struct EvalReport {
  std::string model;
  VectorXd mspe;
  double log_likelihood = 0.0;
  int n_params = 0;
  std::optional<int> n_params_override;
  double bic = 0.0;
  std::optional<double> bic_override;
  long long n_obs = 0;
  bool converged = true;
};

struct EvalConfig {
  std::vector<ModelStructure> models;
  FitOptions fit;
  double train_fraction = 0.76;
  bool persistence = true;
  bool var1 = true;
  /// Alternative parameter count reported next to the naive one, per
  /// model name.
  std::vector<std::pair<std::string, int>> n_params_override;
};

struct Evaluation {
  std::vector<EvalReport> reports;
  int train_replicates = 0;
  int validation_replicates = 0;
  std::string split;
};

/// Fits every model on the first train_fraction of the replicates, scores
/// one-step forecasts on the rest (raw scale when spec is given) and
/// computes BIC on the full panel.
Evaluation evaluate(const Panel& centered, const TransformSpec* spec, const EvalConfig& config);

/// Splits replicates into a training block and a validation block.
std::pair<Panel, Panel> split_replicates(const Panel& panel, double train_fraction);

struct StudyConfig {
  ModelParams truth;
  int fits = 100;
  int T = 124;
  int R = 33;
  std::vector<Method> methods{Method::GMM, Method::ML};
  FitOptions fit;
  std::uint64_t seed = 1;
  int threads = 1;
};

/// Bias, sd and RMSE of one parameter group; min/max over the entries of
/// vector parameters (equal for scalars).
struct StudyCell {
  double bias_min = 0.0, bias_max = 0.0;
  double sd_min = 0.0, sd_max = 0.0;
  double rmse_min = 0.0, rmse_max = 0.0;
};

struct StudyRow {
  std::string parameter;  // rho (or rho1, rho2), alpha1, alpha0, alpha-1, Gamma
  std::vector<StudyCell> cells;  // one per method
};

struct StudyResult {
  std::vector<Method> methods;
  std::vector<StudyRow> rows;
  /// estimates[m][i]: fitted params of replication i by method m, empty
  /// when that fit failed.
  std::vector<std::vector<std::optional<ModelParams>>> estimates;
  int failures = 0;
  int attempted = 0;
  bool ok = true;  // false when more than 20% of fits failed
};

StudyResult simulation_study(const StudyConfig& config);

/// Table-like text rendering of a study: rows parameters, columns
/// Bias/Sd/RMSE per method, vector ranges in brackets.
std::string format_study_table(const StudyResult& study);

/// Runs body(i) for i in [0, n) on up to `threads` workers.
void parallel_for(int n, int threads, const std::function<void(int)>& body);

}  // namespace windssm
