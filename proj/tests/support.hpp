#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "windssm/model.hpp"

namespace testing {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using windssm::ModelParams;

inline windssm::SiteGrid line_grid(int K) {
  std::vector<windssm::Site> s;
  for (int i = 0; i < K; ++i) s.push_back({i + 1, 45.0 + 1.5 * (i % 3), -4.0 + 1.25 * i});
  return windssm::SiteGrid(std::move(s));
}

/// 3 x 3 grid (three latitude levels, three longitudes).
inline windssm::SiteGrid square_grid() {
  std::vector<windssm::Site> s;
  int id = 1;
  for (double lat : {44.0, 46.0, 48.0})
    for (double lon : {-3.0, 0.0, 3.0}) s.push_back({id++, lat, lon});
  return windssm::SiteGrid(std::move(s));
}

inline MatrixXd random_spd(int K, std::mt19937_64& gen, double floor = 0.2) {
  std::normal_distribution<double> n;
  MatrixXd B(K, K);
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) B(i, j) = 0.4 * n(gen);
  MatrixXd G = B * B.transpose();
  G.diagonal().array() += floor;
  return G;
}

inline ModelParams random_params(int K, std::mt19937_64& gen, int order = 1, bool normalized = true) {
  std::uniform_real_distribution<double> u(-0.9, 0.9);
  std::normal_distribution<double> n;
  ModelParams p;
  p.grid = line_grid(K);
  if (order == 1) {
    p.latent = windssm::LatentSpec::ar1(u(gen), 0.5 + std::abs(n(gen)));
  } else {
    double r1, r2;
    do {
      r1 = 1.8 * (u(gen) / 0.9);
      r2 = u(gen);
    } while (!(r2 + r1 < 0.95 && r2 - r1 < 0.95 && std::abs(r2) < 0.95));
    p.latent = windssm::LatentSpec::ar2(r1, r2, 0.5 + std::abs(n(gen)));
  }
  MatrixXd L(K, 3);
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < 3; ++j) L(i, j) = n(gen);
  p.loading = windssm::FullLoading{L};
  p.noise = windssm::FullNoise{random_spd(K, gen)};
  return normalized ? windssm::normalize(p) : p;
}

/// Latent autocovariance from the causal moving-average weights, truncated
/// far in the tail. Independent of the model-core Yule-Walker code.
inline std::vector<double> ma_autocovariance(const windssm::LatentSpec& lat, int max_lag) {
  const int n = 6000;
  std::vector<double> psi(n);
  psi[0] = 1.0;
  for (int j = 1; j < n; ++j) {
    psi[j] = lat.rho1 * psi[j - 1];
    if (lat.order == 2 && j >= 2) psi[j] += lat.rho2 * psi[j - 2];
  }
  std::vector<double> g(static_cast<std::size_t>(max_lag) + 1, 0.0);
  for (int h = 0; h <= max_lag; ++h) {
    long double s = 0.0L;
    for (int j = 0; j + h < n; ++j) s += static_cast<long double>(psi[j]) * psi[j + h];
    g[static_cast<std::size_t>(h)] = static_cast<double>(s) * lat.sigma * lat.sigma;
  }
  return g;
}

/// cov(vec(Y_0..Y_{T-1})) built entry by entry from the model definition.
inline MatrixXd joint_covariance(const ModelParams& p, int T) {
  const int K = p.grid.size();
  const auto g = ma_autocovariance(p.latent, T + 3);
  const MatrixXd L = p.lambda();
  const MatrixXd G = p.gamma();
  MatrixXd S = MatrixXd::Zero(T * K, T * K);
  for (int s = 0; s < T; ++s)
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) {
          double v = 0.0;
          // Y_s(i) loads X_{s+1-a}; Y_t(j) loads X_{t+1-b}.
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
              v += L(i, a) * L(j, b) * g[static_cast<std::size_t>(std::abs((s - a) - (t - b)))];
          if (s == t) v += G(i, j);
          S(s * K + i, t * K + j) = v;
        }
  return S;
}

inline double gaussian_logpdf(const VectorXd& y, const MatrixXd& S) {
  const Eigen::LLT<MatrixXd> llt(S);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const VectorXd z = llt.matrixL().solve(y);
  return -0.5 * (static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi) + logdet +
                 z.squaredNorm());
}

inline VectorXd stack_rows(const MatrixXd& series) {
  VectorXd y(series.size());
  for (Eigen::Index t = 0; t < series.rows(); ++t)
    y.segment(t * series.cols(), series.cols()) = series.row(t).transpose();
  return y;
}

/// Posterior moments of Z_t = (X_{t+1}, X_t, X_{t-1}) by direct Gaussian
/// conditioning on the whole series.
struct Posterior {
  std::vector<Eigen::Vector3d> mean;
  std::vector<Eigen::Matrix3d> cov;
  std::vector<Eigen::Matrix3d> lag_one;  // cov(Z_t, Z_{t-1} | Y), t >= 1
};

inline Posterior condition_on_series(const ModelParams& p, const MatrixXd& series) {
  const int T = static_cast<int>(series.rows());
  const int K = p.grid.size();
  const int n = T + 2;  // X_{-1} .. X_T, index = time + 1
  const auto g = ma_autocovariance(p.latent, n);
  MatrixXd Sx(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) Sx(a, b) = g[static_cast<std::size_t>(std::abs(a - b))];
  MatrixXd M = MatrixXd::Zero(T * K, n);
  const MatrixXd L = p.lambda();
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < 3; ++c) M.block(t * K, t + 2 - c, K, 1) = L.col(c);
  MatrixXd Sy = M * Sx * M.transpose();
  for (int t = 0; t < T; ++t) Sy.block(t * K, t * K, K, K) += p.gamma();
  const MatrixXd gain = Sy.ldlt().solve(M * Sx).transpose();  // Sx M' Sy^-1
  const VectorXd mx = gain * stack_rows(series);
  const MatrixXd Px = Sx - gain * M * Sx;
  Posterior out;
  for (int t = 0; t < T; ++t) {
    Eigen::Matrix3d c;
    Eigen::Vector3d m;
    for (int a = 0; a < 3; ++a) {
      m(a) = mx(t + 2 - a);
      for (int b = 0; b < 3; ++b) c(a, b) = Px(t + 2 - a, t + 2 - b);
    }
    out.mean.push_back(m);
    out.cov.push_back(c);
    Eigen::Matrix3d l = Eigen::Matrix3d::Zero();
    if (t > 0)
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) l(a, b) = Px(t + 2 - a, t + 1 - b);
    out.lag_one.push_back(l);
  }
  return out;
}

/// 2 latitudes x 3 longitudes.
inline windssm::SiteGrid six_grid() {
  std::vector<windssm::Site> s;
  int id = 1;
  for (double lat : {45.0, 47.5})
    for (double lon : {-2.5, 0.0, 2.5}) s.push_back({id++, lat, lon});
  return windssm::SiteGrid(std::move(s));
}

/// Eastward-moving field: alpha1 grows and alpha-1 shrinks with longitude;
/// noise correlated over a few hundred km. Normalized.
inline ModelParams eastward_truth(const windssm::SiteGrid& grid, int order = 1, double rho1 = 0.76,
                                  double rho2 = 0.0) {
  const int K = grid.size();
  const VectorXd lon = grid.longitudes();
  const double mid = lon.mean();
  MatrixXd L(K, 3);
  for (int i = 0; i < K; ++i) {
    const double l = (lon(i) - mid) / 2.5;
    L(i, 0) = 0.35 + 0.15 * l;
    L(i, 1) = 0.75 + 0.1 * std::cos(1.7 * i);
    L(i, 2) = 0.25 - 0.12 * l;
  }
  MatrixXd G(K, K);
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      const double dlat = 111.2 * (grid[i].lat - grid[j].lat);
      const double dlon = 78.0 * (grid[i].lon - grid[j].lon);
      G(i, j) = 0.3 * std::exp(-std::sqrt(dlat * dlat + dlon * dlon) / 400.0) + (i == j ? 0.05 : 0.0);
    }
  ModelParams p;
  p.grid = grid;
  p.latent = order == 1 ? windssm::LatentSpec::ar1(rho1, 1.0) : windssm::LatentSpec::ar2(rho1, rho2, 1.0);
  p.loading = windssm::FullLoading{L};
  p.noise = windssm::FullNoise{G};
  return windssm::canonical_sign(windssm::normalize(p));
}

}  // namespace testing
