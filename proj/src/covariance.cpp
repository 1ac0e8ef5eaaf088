#include "windssm/covariance.hpp"

#include <algorithm>
#include <cmath>

#include "windssm/errors.hpp"
#include "windssm/kalman.hpp"

namespace windssm {

CovSet theoretical_cov_closed(const ModelParams& params, int max_lag) {
  if (params.latent.order != 1)
    throw ValidationError("closed-form covariances need an AR(1) latent; use theoretical_cov_ss");
  if (max_lag < 0) throw ValidationError("max_lag must be non-negative");
  require_well_posed(params);

  const double rho = params.latent.rho1;
  const double g0 = stationary_variance(params.latent);
  const MatrixXd lambda = params.lambda();
  const VectorXd a1 = lambda.col(0), a0 = lambda.col(1), am1 = lambda.col(2);
  const double r2 = rho * rho;

  const VectorXd u = a1 + rho * a0 + r2 * am1;
  const VectorXd mid = rho * a1 + a0 + rho * am1;
  const VectorXd v = r2 * a1 + rho * a0 + am1;

  CovSet out;
  out.source = CovSource::Theoretical;
  out.lags.push_back(g0 * (a1 * u.transpose() + a0 * mid.transpose() + am1 * v.transpose()) +
                     params.gamma());
  if (max_lag >= 1)
    out.lags.push_back(g0 * (a1 * mid.transpose() + a0 * v.transpose() +
                             rho * am1 * v.transpose()));
  if (max_lag >= 2) {
    const MatrixXd c2 = g0 * u * v.transpose();
    double factor = 1.0;
    for (int k = 2; k <= max_lag; ++k) {
      out.lags.push_back(factor * c2);
      factor *= rho;
    }
  }
  return out;
}

CovSet theoretical_cov_ss(const ModelParams& params, int max_lag) {
  if (max_lag < 0) throw ValidationError("max_lag must be non-negative");
  const StateSpaceForm ssm = build_state_space(params);
  CovSet out;
  out.source = CovSource::Theoretical;
  // cov(Z_t, Z_{t+k}) = P (A')^k
  Eigen::Matrix3d cross = ssm.init_cov;
  for (int k = 0; k <= max_lag; ++k) {
    MatrixXd ck = ssm.H * cross * ssm.H.transpose();
    if (k == 0) ck += ssm.Rm;
    out.lags.push_back(std::move(ck));
    cross = cross * ssm.A.transpose();
  }
  return out;
}

CovSet theoretical_cov(const ModelParams& params, int max_lag) {
  return params.latent.order == 1 ? theoretical_cov_closed(params, max_lag)
                                  : theoretical_cov_ss(params, max_lag);
}

CovSet empirical_cov(const Panel& panel, int max_lag) {
  if (panel.stage != Stage::TransformedCentered)
    throw ValidationError("empirical covariances need a transformed-centered panel");
  if (max_lag < 0) throw ValidationError("max_lag must be non-negative");
  panel.check(1);
  const int T = panel.T();
  if (T <= max_lag)
    throw ValidationError("panel has " + std::to_string(T) + " steps, need more than lag " +
                          std::to_string(max_lag));
  const int K = panel.K();
  CovSet out;
  out.source = CovSource::Empirical;
  for (int k = 0; k <= max_lag; ++k) {
    MatrixXd acc = MatrixXd::Zero(K, K);
    for (const auto& y : panel.replicates)
      acc.noalias() += y.topRows(T - k).transpose() * y.bottomRows(T - k);
    acc /= static_cast<double>(panel.R()) * (T - k);
    if (k == 0) acc = 0.5 * (acc + acc.transpose());
    out.lags.push_back(std::move(acc));
  }
  return out;
}

DiagnosticsReport symmetry_diagnostics(const CovSet& cov) {
  DiagnosticsReport rep;
  if (cov.max_lag() < 2) throw ValidationError("symmetry diagnostics need lags up to 2");
  const MatrixXd& c1 = cov[1];
  const double n1 = c1.norm();
  rep.asymmetry = n1 > 0.0 ? (c1 - c1.transpose()).norm() / n1 : 0.0;

  const MatrixXd& c2 = cov[2];
  Eigen::JacobiSVD<MatrixXd> svd(c2);
  const auto& sv = svd.singularValues();
  rep.rank1_ratio = (sv.size() > 1 && sv(0) > 0.0) ? sv(1) / sv(0) : 0.0;

  if (cov.max_lag() >= 3) {
    const double cutoff = 1e-6 * c2.norm();
    std::vector<double> ratios;
    for (Eigen::Index i = 0; i < c2.rows(); ++i)
      for (Eigen::Index j = 0; j < c2.cols(); ++j)
        if (std::abs(c2(i, j)) >= cutoff && c2(i, j) != 0.0)
          ratios.push_back(cov[3](i, j) / c2(i, j));
    if (!ratios.empty()) {
      const auto mid = ratios.begin() + static_cast<long>(ratios.size() / 2);
      std::nth_element(ratios.begin(), mid, ratios.end());
      rep.rho_hat = *mid;
      if (ratios.size() % 2 == 0) {
        const double lower = *std::max_element(ratios.begin(), mid);
        rep.rho_hat = 0.5 * (rep.rho_hat + lower);
      }
    }
    double factor = 1.0;
    for (int k = 2; k <= cov.max_lag(); ++k) {
      rep.geometric_residual = std::max(rep.geometric_residual, (cov[k] - factor * c2).norm());
      factor *= rep.rho_hat;
    }
  }
  return rep;
}

MatrixXd correlation(const MatrixXd& ck, const MatrixXd& c0) {
  const VectorXd sd = c0.diagonal().cwiseMax(0.0).cwiseSqrt();
  MatrixXd r(ck.rows(), ck.cols());
  for (Eigen::Index i = 0; i < ck.rows(); ++i)
    for (Eigen::Index j = 0; j < ck.cols(); ++j) {
      const double denom = sd(i) * sd(j);
      r(i, j) = denom > 0.0 ? ck(i, j) / denom : 0.0;
    }
  return r;
}

std::vector<DirectionalEntry> directional_cross_correlation(const CovSet& cov,
                                                            const SiteGrid& grid, int lag) {
  if (lag < 0 || lag > cov.max_lag()) throw ValidationError("lag not available in covariance set");
  if (cov[0].rows() != grid.size()) throw ValidationError("covariance size does not match grid");
  const MatrixXd corr = correlation(cov[lag], cov[0]);
  std::vector<DirectionalEntry> table;
  for (int p = 0; p < grid.size(); ++p)
    for (int q = 0; q < grid.size(); ++q)
      table.push_back({grid[q].lat - grid[p].lat, grid[q].lon - grid[p].lon, corr(p, q),
                       grid[p].id, grid[q].id});
  return table;
}

std::vector<DirectionalEntry> directional_cross_correlation(const Panel& panel, int lag) {
  return directional_cross_correlation(empirical_cov(panel, lag), panel.grid, lag);
}

namespace {

template <typename Key>
DirectionalSummary summarize(const std::vector<DirectionalEntry>& table, Key key) {
  DirectionalSummary s;
  for (const auto& e : table) {
    const double d = key(e);
    if (d > 1e-12) {
      s.mean_positive += e.corr;
      ++s.count_positive;
    } else if (d < -1e-12) {
      s.mean_negative += e.corr;
      ++s.count_negative;
    }
  }
  if (s.count_positive > 0) s.mean_positive /= s.count_positive;
  if (s.count_negative > 0) s.mean_negative /= s.count_negative;
  return s;
}

}  // namespace

DirectionalSummary summarize_by_longitude(const std::vector<DirectionalEntry>& table) {
  return summarize(table, [](const DirectionalEntry& e) { return e.dlon; });
}

DirectionalSummary summarize_by_latitude(const std::vector<DirectionalEntry>& table) {
  return summarize(table, [](const DirectionalEntry& e) { return e.dlat; });
}

}  // namespace windssm
