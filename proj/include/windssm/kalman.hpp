#pragma once

#include <vector>

#include <Eigen/Dense>

#include "windssm/model.hpp"

namespace windssm {

/// Augmented-state form of the model. The state at observation time t is
/// Z_t = (X_{t+1}, X_t, X_{t-1}); Z_{t+1} = A Z_t + w_t with cov(w) = Q
/// (rank one) and Y_t = H Z_t + v_t with cov(v) = Rm. The first state is
/// drawn from the stationary law N(init_mean, init_cov).
struct StateSpaceForm {
  Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d Q = Eigen::Matrix3d::Zero();
  MatrixXd H;
  MatrixXd Rm;
  Eigen::Vector3d init_mean = Eigen::Vector3d::Zero();
  Eigen::Matrix3d init_cov = Eigen::Matrix3d::Zero();

  int K() const { return static_cast<int>(H.rows()); }
};

StateSpaceForm build_state_space(const ModelParams& params);

/// Solves P = A P A' + Q by the doubling iteration. Throws NumericalError
/// when the spectral radius of A is not below one.
MatrixXd solve_discrete_lyapunov(const MatrixXd& A, const MatrixXd& Q);

/// Data-independent part of the filter and smoother for a series of length
/// T. Every replicate of a panel shares one pass.
struct CovariancePass {
  std::vector<Eigen::Matrix3d> predicted_cov;  // P_{t|t-1}
  std::vector<Eigen::Matrix3d> filtered_cov;   // P_{t|t}
  std::vector<MatrixXd> gain;                  // 3 x K Kalman gain
  std::vector<MatrixXd> innovation_cov;        // S_t
  std::vector<Eigen::LLT<MatrixXd>> innovation_chol;
  std::vector<double> innovation_logdet;
  std::vector<Eigen::Matrix3d> smoother_gain;  // J_t, t < T-1
  std::vector<Eigen::Matrix3d> smoothed_cov;   // P_{t|T}
  std::vector<Eigen::Matrix3d> lag_one_cov;    // cov(Z_t, Z_{t-1} | Y), t >= 1
};

/// Throws NumericalError naming the time index when an innovation
/// covariance is not positive definite after one jitter retry.
CovariancePass covariance_pass(const StateSpaceForm& ssm, int T, bool with_smoother = true);

struct FilterResult {
  std::vector<Eigen::Vector3d> predicted_mean;
  std::vector<Eigen::Matrix3d> predicted_cov;
  std::vector<Eigen::Vector3d> filtered_mean;
  std::vector<Eigen::Matrix3d> filtered_cov;
  std::vector<VectorXd> innovation;
  std::vector<MatrixXd> innovation_cov;
  double log_likelihood = 0.0;
};

struct SmootherResult {
  std::vector<Eigen::Vector3d> mean;
  std::vector<Eigen::Matrix3d> cov;
  /// Entry t is cov(Z_t, Z_{t-1} | Y_{1:T}); entry 0 is zero.
  std::vector<Eigen::Matrix3d> lag_one_cov;
  double log_likelihood = 0.0;
};

/// `series` is T x K, one observation per row.
FilterResult filter(const StateSpaceForm& ssm, const MatrixXd& series);
SmootherResult smooth(const StateSpaceForm& ssm, const MatrixXd& series);

/// Filtered and smoothed means of one series against a shared covariance
/// pass, plus that series' log-likelihood.
struct MeanPass {
  std::vector<Eigen::Vector3d> predicted_mean;
  std::vector<Eigen::Vector3d> filtered_mean;
  std::vector<Eigen::Vector3d> smoothed_mean;
  double log_likelihood = 0.0;
};
MeanPass mean_pass(const StateSpaceForm& ssm, const CovariancePass& cov, const MatrixXd& series,
                   bool with_smoother = true);

/// Exact Gaussian log-likelihood summed over replicates.
double log_likelihood(const StateSpaceForm& ssm, const Panel& panel);
double log_likelihood(const ModelParams& params, const Panel& panel);

struct ForecastStep {
  VectorXd mean;
  MatrixXd cov;
};

/// Forecasts Y_{T+1..T+h} from the filtered terminal state.
std::vector<ForecastStep> forecast(const StateSpaceForm& ssm, const MatrixXd& series, int h);

/// T x K matrix whose row t is E[Y_t | Y_0..Y_{t-1}] (row 0 is the
/// stationary mean, zero).
MatrixXd one_step_predictions(const StateSpaceForm& ssm, const MatrixXd& series);

}  // namespace windssm
