#pragma once

#include <vector>

#include "windssm/model.hpp"

namespace windssm {

enum class CovSource { Theoretical, Empirical };

/// Lagged covariances C_k = cov(Y_t, Y_{t+k}), k = 0..L.
struct CovSet {
  std::vector<MatrixXd> lags;
  CovSource source = CovSource::Theoretical;

  int max_lag() const { return static_cast<int>(lags.size()) - 1; }
  const MatrixXd& operator[](int k) const { return lags[static_cast<std::size_t>(k)]; }
};

/// Closed-form lagged covariances of the AR(1) model. For k >= 2,
/// C_k = rho^{k-2} gamma0 u v' with u = a1 + rho a0 + rho^2 a_-1 and
/// v = rho^2 a1 + rho a0 + a_-1. Throws ValidationError for AR(2) latents.
CovSet theoretical_cov_closed(const ModelParams& params, int max_lag);

/// cov(Y_t, Y_{t+k}) = H P (A')^k H' + Gamma 1{k = 0} with P the stationary
/// state covariance. Valid for both latent orders.
CovSet theoretical_cov_ss(const ModelParams& params, int max_lag);

/// Dispatches to the closed form for AR(1) and the state-space form for
/// AR(2).
CovSet theoretical_cov(const ModelParams& params, int max_lag);

/// Per-lag average of Y_t Y_{t+k}' over every replicate and valid t; the
/// divisor is the number of summed terms. The panel must be centered.
CovSet empirical_cov(const Panel& panel, int max_lag);

struct DiagnosticsReport {
  double asymmetry = 0.0;         // |C1 - C1'| / |C1|
  double rank1_ratio = 0.0;       // second / first singular value of C2
  double rho_hat = 0.0;           // median of C3 / C2 over well-conditioned entries
  double geometric_residual = 0.0;  // max_{k>=2} |C_k - rho_hat^{k-2} C_2|
};

DiagnosticsReport symmetry_diagnostics(const CovSet& cov);

struct DirectionalEntry {
  double dlat = 0.0;
  double dlon = 0.0;
  double corr = 0.0;
  int from_site = 0;
  int to_site = 0;
};

/// corr(Y_t(p), Y_{t+k}(p')) for every ordered pair (p, p'), with the
/// coordinate differences of p' relative to p.
std::vector<DirectionalEntry> directional_cross_correlation(const Panel& panel, int lag);

/// Same table from a covariance set (theoretical or empirical).
std::vector<DirectionalEntry> directional_cross_correlation(const CovSet& cov,
                                                            const SiteGrid& grid, int lag);

/// Mean correlation of off-diagonal pairs grouped by the sign of a
/// coordinate difference.
struct DirectionalSummary {
  double mean_positive = 0.0;
  double mean_negative = 0.0;
  int count_positive = 0;
  int count_negative = 0;
};
DirectionalSummary summarize_by_longitude(const std::vector<DirectionalEntry>& table);
DirectionalSummary summarize_by_latitude(const std::vector<DirectionalEntry>& table);

/// Correlation matrix of a covariance matrix pair (C_k scaled by the C_0
/// diagonal).
MatrixXd correlation(const MatrixXd& ck, const MatrixXd& c0);

}  // namespace windssm
