#include "windssm/kalman.hpp"

#include <cmath>
#include <iostream>
#include <numbers>
#include <string>

#include "windssm/errors.hpp"

namespace windssm {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

Eigen::Matrix3d symmetrized(const Eigen::Matrix3d& m) { return 0.5 * (m + m.transpose()); }

// Compensated summation; the EM monotonicity checks compare likelihoods
// summed over thousands of terms.
class NeumaierSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v))
      comp_ += (sum_ - t) + v;
    else
      comp_ += (v - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace

StateSpaceForm build_state_space(const ModelParams& params) {
  require_well_posed(params);
  StateSpaceForm ssm;
  const LatentSpec& lat = params.latent;
  ssm.A << lat.rho1, (lat.order == 2 ? lat.rho2 : 0.0), 0.0,
           1.0, 0.0, 0.0,
           0.0, 1.0, 0.0;
  ssm.Q(0, 0) = lat.sigma * lat.sigma;
  ssm.H = params.lambda();
  ssm.Rm = params.gamma();
  ssm.init_cov = symmetrized(solve_discrete_lyapunov(ssm.A, ssm.Q));
  return ssm;
}

MatrixXd solve_discrete_lyapunov(const MatrixXd& A, const MatrixXd& Q) {
  if (A.rows() != A.cols() || Q.rows() != Q.cols() || A.rows() != Q.rows())
    throw ValidationError("solve_discrete_lyapunov: A and Q must be square and of equal size");
  const double radius = A.eigenvalues().cwiseAbs().maxCoeff();
  if (!(radius < 1.0))
    throw NumericalError("solve_discrete_lyapunov: spectral radius of A is not below one");

  // After n steps P = sum_{i < 2^n} A^i Q A^i'.
  MatrixXd P = Q;
  MatrixXd Ak = A;
  for (int iter = 0; iter < 64; ++iter) {
    const MatrixXd increment = Ak * P * Ak.transpose();
    P += increment;
    Ak = Ak * Ak;
    if (increment.norm() <= 1e-16 * P.norm() && Ak.norm() < 1e-8) return P;
  }
  throw NumericalError("solve_discrete_lyapunov: doubling iteration did not converge");
}

CovariancePass covariance_pass(const StateSpaceForm& ssm, int T, bool with_smoother) {
  const auto uT = static_cast<std::size_t>(T);
  const int K = ssm.K();
  CovariancePass pass;
  pass.predicted_cov.resize(uT);
  pass.filtered_cov.resize(uT);
  pass.gain.resize(uT);
  pass.innovation_cov.resize(uT);
  pass.innovation_chol.resize(uT);
  pass.innovation_logdet.resize(uT);

  const Eigen::Matrix3d I = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d P = ssm.init_cov;
  for (std::size_t t = 0; t < uT; ++t) {
    if (t > 0) P = symmetrized(ssm.A * pass.filtered_cov[t - 1] * ssm.A.transpose() + ssm.Q);
    pass.predicted_cov[t] = P;

    const MatrixXd PHt = P * ssm.H.transpose();
    MatrixXd S = ssm.H * PHt + ssm.Rm;
    S = 0.5 * (S + S.transpose());
    Eigen::LLT<MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) {
      const double jitter = 1e-10 * S.trace() / K;
      std::cerr << "windssm: innovation covariance at t=" << t
                << " not positive definite, retrying with jitter " << jitter << '\n';
      S.diagonal().array() += jitter;
      llt.compute(S);
      if (llt.info() != Eigen::Success)
        throw NumericalError("innovation covariance is singular at time index " +
                             std::to_string(t));
    }
    const MatrixXd gain = llt.solve(PHt.transpose()).transpose();  // P H' S^-1
    const Eigen::Matrix3d IKH = I - gain * ssm.H;
    pass.filtered_cov[t] =
        symmetrized(IKH * P * IKH.transpose() + gain * ssm.Rm * gain.transpose());
    pass.gain[t] = gain;
    pass.innovation_logdet[t] =
        2.0 * llt.matrixLLT().diagonal().array().log().sum();
    pass.innovation_cov[t] = std::move(S);
    pass.innovation_chol[t] = std::move(llt);
  }

  if (!with_smoother || T == 0) return pass;

  pass.smoother_gain.resize(uT);
  pass.smoothed_cov.resize(uT);
  pass.lag_one_cov.assign(uT, Eigen::Matrix3d::Zero());
  pass.smoothed_cov[uT - 1] = pass.filtered_cov[uT - 1];
  for (std::size_t s = uT - 1; s-- > 0;) {
    // J_s = P_{s|s} A' P_{s+1|s}^{-1}
    const Eigen::Matrix3d J =
        pass.predicted_cov[s + 1].ldlt().solve(ssm.A * pass.filtered_cov[s]).transpose();
    pass.smoother_gain[s] = J;
    pass.smoothed_cov[s] = symmetrized(
        pass.filtered_cov[s] + J * (pass.smoothed_cov[s + 1] - pass.predicted_cov[s + 1]) *
                                   J.transpose());
    pass.lag_one_cov[s + 1] = pass.smoothed_cov[s + 1] * J.transpose();
  }
  return pass;
}

MeanPass mean_pass(const StateSpaceForm& ssm, const CovariancePass& cov, const MatrixXd& series,
                   bool with_smoother) {
  const auto uT = static_cast<std::size_t>(series.rows());
  const int K = ssm.K();
  if (series.cols() != K) throw ValidationError("series width does not match the model");
  if (!series.allFinite()) throw ValidationError("series has non-finite values");
  if (cov.filtered_cov.size() != uT) throw ValidationError("covariance pass length mismatch");

  MeanPass out;
  out.predicted_mean.resize(uT);
  out.filtered_mean.resize(uT);
  NeumaierSum ll;
  Eigen::Vector3d m = ssm.init_mean;
  for (std::size_t t = 0; t < uT; ++t) {
    if (t > 0) m = ssm.A * out.filtered_mean[t - 1];
    out.predicted_mean[t] = m;
    const VectorXd v = series.row(static_cast<Eigen::Index>(t)).transpose() - ssm.H * m;
    out.filtered_mean[t] = m + cov.gain[t] * v;
    const double quad = v.dot(cov.innovation_chol[t].solve(v));
    ll.add(-0.5 * (K * kLog2Pi + cov.innovation_logdet[t] + quad));
  }
  out.log_likelihood = ll.value();

  if (with_smoother && uT > 0) {
    out.smoothed_mean.resize(uT);
    out.smoothed_mean[uT - 1] = out.filtered_mean[uT - 1];
    for (std::size_t s = uT - 1; s-- > 0;) {
      out.smoothed_mean[s] =
          out.filtered_mean[s] +
          cov.smoother_gain[s] * (out.smoothed_mean[s + 1] - out.predicted_mean[s + 1]);
    }
  }
  return out;
}

FilterResult filter(const StateSpaceForm& ssm, const MatrixXd& series) {
  const int T = static_cast<int>(series.rows());
  const CovariancePass cov = covariance_pass(ssm, T, false);
  MeanPass means = mean_pass(ssm, cov, series, false);
  FilterResult out;
  out.predicted_mean = std::move(means.predicted_mean);
  out.filtered_mean = std::move(means.filtered_mean);
  out.predicted_cov = cov.predicted_cov;
  out.filtered_cov = cov.filtered_cov;
  out.innovation_cov = cov.innovation_cov;
  out.innovation.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t)
    out.innovation[static_cast<std::size_t>(t)] =
        series.row(t).transpose() - ssm.H * out.predicted_mean[static_cast<std::size_t>(t)];
  out.log_likelihood = means.log_likelihood;
  return out;
}

SmootherResult smooth(const StateSpaceForm& ssm, const MatrixXd& series) {
  const int T = static_cast<int>(series.rows());
  const CovariancePass cov = covariance_pass(ssm, T, true);
  MeanPass means = mean_pass(ssm, cov, series, true);
  SmootherResult out;
  out.mean = std::move(means.smoothed_mean);
  out.cov = cov.smoothed_cov;
  out.lag_one_cov = cov.lag_one_cov;
  out.log_likelihood = means.log_likelihood;
  return out;
}

double log_likelihood(const StateSpaceForm& ssm, const Panel& panel) {
  if (panel.replicates.empty()) return 0.0;
  const CovariancePass cov = covariance_pass(ssm, panel.T(), false);
  NeumaierSum total;
  for (const auto& y : panel.replicates) total.add(mean_pass(ssm, cov, y, false).log_likelihood);
  return total.value();
}

double log_likelihood(const ModelParams& params, const Panel& panel) {
  return log_likelihood(build_state_space(params), panel);
}

std::vector<ForecastStep> forecast(const StateSpaceForm& ssm, const MatrixXd& series, int h) {
  if (h < 1) throw ValidationError("forecast horizon must be at least 1");
  Eigen::Vector3d m = ssm.init_mean;
  Eigen::Matrix3d P = ssm.init_cov;
  if (series.rows() > 0) {
    const FilterResult f = filter(ssm, series);
    m = f.filtered_mean.back();
    P = f.filtered_cov.back();
  } else {
    // No data: the stationary law is the state at time -1 propagated once.
    P = ssm.init_cov;
  }
  std::vector<ForecastStep> out;
  out.reserve(static_cast<std::size_t>(h));
  for (int j = 1; j <= h; ++j) {
    if (series.rows() > 0 || j > 1) {
      m = ssm.A * m;
      P = symmetrized(ssm.A * P * ssm.A.transpose() + ssm.Q);
    }
    MatrixXd c = ssm.H * P * ssm.H.transpose() + ssm.Rm;
    out.push_back({ssm.H * m, 0.5 * (c + c.transpose())});
  }
  return out;
}

MatrixXd one_step_predictions(const StateSpaceForm& ssm, const MatrixXd& series) {
  const int T = static_cast<int>(series.rows());
  const CovariancePass cov = covariance_pass(ssm, T, false);
  const MeanPass means = mean_pass(ssm, cov, series, false);
  MatrixXd pred(T, ssm.K());
  for (int t = 0; t < T; ++t)
    pred.row(t) = (ssm.H * means.predicted_mean[static_cast<std::size_t>(t)]).transpose();
  return pred;
}

}  // namespace windssm
