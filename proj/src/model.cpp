#include "windssm/model.hpp"

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "windssm/errors.hpp"
#include "windssm/structures.hpp"

namespace windssm {

SiteGrid::SiteGrid(std::vector<Site> sites) : sites_(std::move(sites)) {
  if (sites_.empty()) throw ValidationError("a site grid needs at least one site");
  std::set<int> ids;
  for (const auto& s : sites_) {
    if (!std::isfinite(s.lat) || !std::isfinite(s.lon))
      throw ValidationError("site " + std::to_string(s.id) + " has non-finite coordinates");
    if (!ids.insert(s.id).second)
      throw ValidationError("duplicate site id " + std::to_string(s.id));
  }
}

VectorXd SiteGrid::latitudes() const {
  VectorXd v(size());
  for (int i = 0; i < size(); ++i) v(i) = sites_[static_cast<std::size_t>(i)].lat;
  return v;
}

VectorXd SiteGrid::longitudes() const {
  VectorXd v(size());
  for (int i = 0; i < size(); ++i) v(i) = sites_[static_cast<std::size_t>(i)].lon;
  return v;
}

int SiteGrid::index_of(int site_id) const {
  for (int i = 0; i < size(); ++i)
    if (sites_[static_cast<std::size_t>(i)].id == site_id) return i;
  return -1;
}

bool SiteGrid::operator==(const SiteGrid& other) const {
  if (size() != other.size()) return false;
  for (int i = 0; i < size(); ++i) {
    const auto& a = (*this)[i];
    const auto& b = other[i];
    if (a.id != b.id || a.lat != b.lat || a.lon != b.lon) return false;
  }
  return true;
}

bool is_stationary(const LatentSpec& latent) {
  if (!std::isfinite(latent.rho1) || !std::isfinite(latent.rho2)) return false;
  if (latent.order == 1) return std::abs(latent.rho1) < 1.0;
  if (latent.order == 2)
    return latent.rho2 + latent.rho1 < 1.0 && latent.rho2 - latent.rho1 < 1.0 &&
           std::abs(latent.rho2) < 1.0;
  return false;
}

double stationary_variance(const LatentSpec& latent) {
  if (!is_stationary(latent)) throw ValidationError("latent process is not stationary");
  const double s2 = latent.sigma * latent.sigma;
  if (latent.order == 1) return s2 / (1.0 - latent.rho1 * latent.rho1);
  const double r1 = latent.rho1, r2 = latent.rho2;
  return s2 * (1.0 - r2) / ((1.0 + r2) * ((1.0 - r2) * (1.0 - r2) - r1 * r1));
}

std::vector<double> latent_autocovariance(const LatentSpec& latent, int max_lag) {
  std::vector<double> g(static_cast<std::size_t>(std::max(max_lag, 1) + 1));
  g[0] = stationary_variance(latent);
  if (latent.order == 1) {
    for (std::size_t h = 1; h < g.size(); ++h) g[h] = latent.rho1 * g[h - 1];
  } else {
    g[1] = latent.rho1 * g[0] / (1.0 - latent.rho2);
    for (std::size_t h = 2; h < g.size(); ++h)
      g[h] = latent.rho1 * g[h - 1] + latent.rho2 * g[h - 2];
  }
  g.resize(static_cast<std::size_t>(max_lag + 1));
  return g;
}

VectorXd PolynomialLoading::to_vector() const {
  VectorXd beta(kSize);
  beta.head<9>() = Eigen::Map<const Eigen::Matrix<double, 9, 1>>(intercept.data());
  beta.segment<3>(9) = linear;
  beta.segment<3>(12) = quadratic;
  return beta;
}

PolynomialLoading PolynomialLoading::from_vector(const VectorXd& beta) {
  if (beta.size() != kSize) throw ValidationError("polynomial loading needs 15 coefficients");
  PolynomialLoading p;
  p.intercept = Eigen::Map<const Eigen::Matrix3d>(beta.data());
  p.linear = beta.segment<3>(9);
  p.quadratic = beta.segment<3>(12);
  return p;
}

MatrixXd ModelParams::lambda() const {
  if (const auto* full = std::get_if<FullLoading>(&loading)) return full->matrix;
  return lambda_polynomial(std::get<PolynomialLoading>(loading), grid);
}

MatrixXd ModelParams::gamma() const {
  if (const auto* full = std::get_if<FullNoise>(&noise)) return full->matrix;
  return realize_kernel_noise(std::get<KernelNoise>(noise), grid);
}

ValidationReport validate(const ModelParams& params) {
  ValidationReport report;
  report.stationary = is_stationary(params.latent) && params.latent.sigma > 0.0;
  if (!report.stationary) report.messages.push_back("latent process is not stationary");

  if (report.stationary) {
    report.latent_variance = stationary_variance(params.latent);
    report.unit_latent_variance = std::abs(report.latent_variance - 1.0) < 1e-9;
  }
  if (!report.unit_latent_variance)
    report.messages.push_back("stationary latent variance is not 1");

  MatrixXd lambda, gamma;
  try {
    lambda = params.lambda();
    gamma = params.gamma();
  } catch (const Error& e) {
    report.messages.push_back(e.what());
    return report;
  }
  const int K = params.grid.size();
  if (lambda.rows() != K || lambda.cols() != 3) {
    report.messages.push_back("loading matrix must be K x 3");
  } else if (K >= 3 && lambda.allFinite()) {
    Eigen::JacobiSVD<MatrixXd> svd(lambda);
    const auto& sv = svd.singularValues();
    report.loading_singular_ratio = sv(0) > 0.0 ? sv(2) / sv(0) : 0.0;
    report.loading_independent = report.loading_singular_ratio > kLoadingRankTolerance;
  }
  if (!report.loading_independent)
    report.messages.push_back("loading columns are not linearly independent");

  if (gamma.rows() == K && gamma.cols() == K && gamma.allFinite() &&
      (gamma - gamma.transpose()).norm() <= 1e-12 * std::max(1.0, gamma.norm())) {
    Eigen::LLT<MatrixXd> llt(gamma);
    report.noise_positive_definite = llt.info() == Eigen::Success;
  }
  if (!report.noise_positive_definite)
    report.messages.push_back("observation noise covariance is not positive definite");
  return report;
}

void require_well_posed(const ModelParams& params) {
  if (params.latent.order != 1 && params.latent.order != 2)
    throw ValidationError("latent order must be 1 or 2");
  if (!is_stationary(params.latent)) throw ValidationError("latent process is not stationary");
  if (!(params.latent.sigma > 0.0) || !std::isfinite(params.latent.sigma))
    throw ValidationError("latent innovation sigma must be positive");
  const int K = params.grid.size();
  if (K < 1) throw ValidationError("grid has no sites");
  const MatrixXd lambda = params.lambda();
  if (lambda.rows() != K || lambda.cols() != 3 || !lambda.allFinite())
    throw ValidationError("loading must be a finite K x 3 matrix");
  const MatrixXd gamma = params.gamma();
  if (gamma.rows() != K || gamma.cols() != K || !gamma.allFinite())
    throw ValidationError("noise covariance must be a finite K x K matrix");
  if ((gamma - gamma.transpose()).norm() > 1e-10 * std::max(1.0, gamma.norm()))
    throw ValidationError("noise covariance is not symmetric");
  if (Eigen::LLT<MatrixXd>(gamma).info() != Eigen::Success)
    throw ValidationError("noise covariance is not positive definite");
}

namespace {

ModelParams scale_loading(const ModelParams& params, double factor) {
  ModelParams out = params;
  if (auto* full = std::get_if<FullLoading>(&out.loading)) {
    full->matrix *= factor;
  } else {
    auto& poly = std::get<PolynomialLoading>(out.loading);
    poly.intercept *= factor;
    poly.linear *= factor;
    poly.quadratic *= factor;
  }
  return out;
}

}  // namespace

ModelParams normalize(const ModelParams& params) {
  const double c = std::sqrt(stationary_variance(params.latent));
  ModelParams out = scale_loading(params, c);
  out.latent.sigma = params.latent.sigma / c;
  return out;
}

ModelParams canonical_sign(const ModelParams& params) {
  const MatrixXd lambda = params.lambda();
  if (lambda.col(1).sum() < 0.0) return scale_loading(params, -1.0);
  return params;
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::Raw: return "raw";
    case Stage::Transformed: return "transformed";
    case Stage::TransformedCentered: return "transformed-centered";
  }
  return "raw";
}

Stage stage_from_string(const std::string& text) {
  if (text == "raw") return Stage::Raw;
  if (text == "transformed") return Stage::Transformed;
  if (text == "transformed-centered") return Stage::TransformedCentered;
  throw ValidationError("unknown panel stage '" + text + "'");
}

void Panel::check(int min_steps) const {
  if (replicates.empty()) throw ValidationError("panel has no replicates");
  const int t = T();
  if (t < min_steps)
    throw ValidationError("panel has " + std::to_string(t) + " time steps, need at least " +
                          std::to_string(min_steps));
  for (std::size_t r = 0; r < replicates.size(); ++r) {
    const auto& y = replicates[r];
    if (y.rows() != t || y.cols() != K())
      throw ValidationError("replicate " + std::to_string(r) + " has inconsistent shape");
    if (!y.allFinite())
      throw ValidationError("replicate " + std::to_string(r) + " has non-finite values");
  }
}

Panel simulate(const ModelParams& params, int T, int R, std::uint64_t seed) {
  require_well_posed(params);
  if (T < 4) throw ValidationError("simulate needs T >= 4");
  if (R < 1) throw ValidationError("simulate needs R >= 1");

  const MatrixXd lambda = params.lambda();
  const MatrixXd gamma_chol = Eigen::LLT<MatrixXd>(params.gamma()).matrixL();
  const auto acov = latent_autocovariance(params.latent, 1);
  const double g0 = acov[0], g1 = acov[1];
  const LatentSpec& lat = params.latent;
  const int K = params.grid.size();

  Panel panel;
  panel.grid = params.grid;
  panel.stage = Stage::TransformedCentered;
  panel.replicates.resize(static_cast<std::size_t>(R));

  for (int r = 0; r < R; ++r) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(r)};
    std::mt19937_64 gen(seq);
    std::normal_distribution<double> normal;

    // x(s) holds X_{s-1}; observation t uses X_{t+1}, X_t, X_{t-1}.
    VectorXd x(T + 2);
    if (lat.order == 1) {
      x(0) = std::sqrt(g0) * normal(gen);
      for (int s = 1; s < T + 2; ++s) x(s) = lat.rho1 * x(s - 1) + lat.sigma * normal(gen);
    } else {
      // Stationary pair (X_{-1}, X_0) via its 2 x 2 Cholesky factor.
      const double e1 = normal(gen), e2 = normal(gen);
      const double l11 = std::sqrt(g0);
      const double l21 = g1 / l11;
      const double l22 = std::sqrt(std::max(g0 - l21 * l21, 0.0));
      x(0) = l11 * e1;
      x(1) = l21 * e1 + l22 * e2;
      for (int s = 2; s < T + 2; ++s)
        x(s) = lat.rho1 * x(s - 1) + lat.rho2 * x(s - 2) + lat.sigma * normal(gen);
    }

    MatrixXd y(T, K);
    VectorXd eta(K);
    for (int t = 0; t < T; ++t) {
      for (int k = 0; k < K; ++k) eta(k) = normal(gen);
      const Eigen::Vector3d z(x(t + 2), x(t + 1), x(t));
      y.row(t) = (lambda * z + gamma_chol * eta).transpose();
    }
    panel.replicates[static_cast<std::size_t>(r)] = std::move(y);
  }
  return panel;
}

}  // namespace windssm
