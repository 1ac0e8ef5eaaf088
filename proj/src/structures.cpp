#include "windssm/structures.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "windssm/errors.hpp"
#include "windssm/optimize.hpp"

namespace windssm {

SiteOffsets site_offsets_km(const SiteGrid& grid) {
  const int K = grid.size();
  const VectorXd lat = grid.latitudes();
  const VectorXd lon = grid.longitudes();
  const double mean_lat = K > 0 ? lat.mean() : 0.0;
  const double lon_scale = kKmPerDegree * std::cos(mean_lat * std::numbers::pi / 180.0);
  SiteOffsets off{MatrixXd(K, K), MatrixXd(K, K)};
  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < K; ++j) {
      off.dlat_km(i, j) = kKmPerDegree * (lat(j) - lat(i));
      off.dlon_km(i, j) = lon_scale * (lon(j) - lon(i));
    }
  }
  return off;
}

MatrixXd anisotropic_distance(const SiteGrid& grid, const Anisotropy& aniso) {
  if (!(aniso.theta1 > aniso.theta2 * aniso.theta2 / 4.0))
    throw ValidationError("anisotropy requires theta1 > theta2^2 / 4");
  const SiteOffsets off = site_offsets_km(grid);
  const int K = grid.size();
  MatrixXd d(K, K);
  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < K; ++j) {
      const double a = off.dlat_km(i, j), b = off.dlon_km(i, j);
      d(i, j) = std::sqrt(std::max(0.0, a * a + aniso.theta1 * b * b + aniso.theta2 * a * b));
    }
  }
  d.diagonal().setZero();
  return d;
}

namespace {

template <typename Kernel>
MatrixXd kernel_matrix(const VectorXd& scales, double nugget, const MatrixXd& distances,
                       Kernel kernel) {
  const auto K = scales.size();
  if (distances.rows() != K || distances.cols() != K)
    throw ValidationError("distance matrix does not match the number of scales");
  MatrixXd g(K, K);
  for (Eigen::Index i = 0; i < K; ++i) {
    for (Eigen::Index j = i; j < K; ++j) {
      double v = scales(i) * scales(j) * (kernel(distances(i, j)) + (i == j ? nugget : 0.0));
      g(i, j) = v;
      g(j, i) = v;
    }
  }
  return g;
}

}  // namespace

MatrixXd gamma_gauss(const VectorXd& scales, double range, double nugget,
                     const MatrixXd& distances) {
  return kernel_matrix(scales, nugget, distances,
                       [range](double d) { return std::exp(-range * d * d); });
}

MatrixXd gamma_wave(const VectorXd& scales, double range, double nugget,
                    const MatrixXd& distances) {
  return kernel_matrix(scales, nugget, distances, [range](double d) {
    const double u = range * d;
    return u == 0.0 ? 1.0 : std::sin(u) / u;
  });
}

MatrixXd realize_kernel_noise(const KernelNoise& noise, const SiteGrid& grid) {
  if (noise.scales.size() != grid.size())
    throw ValidationError("kernel noise needs one scale per site");
  const MatrixXd d = anisotropic_distance(grid, noise.anisotropy);
  return noise.kind == KernelKind::Gauss ? gamma_gauss(noise.scales, noise.range, noise.nugget, d)
                                         : gamma_wave(noise.scales, noise.range, noise.nugget, d);
}

MatrixXd realize_kernel_noise(const KernelNoise& noise, const SiteOffsets& off) {
  const auto K = off.dlat_km.rows();
  MatrixXd d(K, K);
  for (Eigen::Index i = 0; i < K; ++i)
    for (Eigen::Index j = 0; j < K; ++j) {
      const double a = off.dlat_km(i, j), b = off.dlon_km(i, j);
      d(i, j) = i == j ? 0.0
                       : std::sqrt(std::max(0.0, a * a + noise.anisotropy.theta1 * b * b +
                                                     noise.anisotropy.theta2 * a * b));
    }
  return noise.kind == KernelKind::Gauss ? gamma_gauss(noise.scales, noise.range, noise.nugget, d)
                                         : gamma_wave(noise.scales, noise.range, noise.nugget, d);
}

LatitudeLevels latitude_levels(const SiteGrid& grid) {
  std::vector<double> distinct;
  for (const auto& s : grid.sites()) {
    const bool seen = std::any_of(distinct.begin(), distinct.end(),
                                  [&](double v) { return std::abs(v - s.lat) < 1e-9; });
    if (!seen) distinct.push_back(s.lat);
  }
  if (distinct.size() != 3)
    throw ValidationError("polynomial loading needs exactly 3 distinct latitudes, grid has " +
                          std::to_string(distinct.size()));
  std::sort(distinct.begin(), distinct.end());
  LatitudeLevels levels;
  std::copy(distinct.begin(), distinct.end(), levels.values.begin());
  for (const auto& s : grid.sites()) {
    int level = 0;
    while (std::abs(levels.values[static_cast<std::size_t>(level)] - s.lat) >= 1e-9) ++level;
    levels.level_of_site.push_back(level);
  }
  return levels;
}

MatrixXd polynomial_design(const SiteGrid& grid) {
  const LatitudeLevels levels = latitude_levels(grid);
  const VectorXd lon = grid.longitudes();
  const VectorXd l = lon.array() - lon.mean();
  const int K = grid.size();
  MatrixXd design = MatrixXd::Zero(K, 5);
  for (int i = 0; i < K; ++i) {
    design(i, levels.level_of_site[static_cast<std::size_t>(i)]) = 1.0;
    design(i, 3) = l(i);
    design(i, 4) = l(i) * l(i);
  }
  return design;
}

namespace {

Eigen::Matrix<double, 5, 3> stacked_coefficients(const PolynomialLoading& beta) {
  Eigen::Matrix<double, 5, 3> b;
  b.topRows<3>() = beta.intercept;
  b.row(3) = beta.linear.transpose();
  b.row(4) = beta.quadratic.transpose();
  return b;
}

}  // namespace

MatrixXd lambda_polynomial(const PolynomialLoading& beta, const SiteGrid& grid) {
  return polynomial_design(grid) * stacked_coefficients(beta);
}

std::array<MatrixXd, PolynomialLoading::kSize> polynomial_basis(const SiteGrid& grid) {
  const MatrixXd design = polynomial_design(grid);
  std::array<MatrixXd, PolynomialLoading::kSize> basis;
  for (int j = 0; j < PolynomialLoading::kSize; ++j) {
    VectorXd e = VectorXd::Zero(PolynomialLoading::kSize);
    e(j) = 1.0;
    basis[static_cast<std::size_t>(j)] =
        design * stacked_coefficients(PolynomialLoading::from_vector(e));
  }
  return basis;
}

PolynomialLoading fit_polynomial_loading(const MatrixXd& lambda, const SiteGrid& grid) {
  if (lambda.rows() != grid.size() || lambda.cols() != 3)
    throw ValidationError("loading target must be K x 3");
  const MatrixXd design = polynomial_design(grid);
  const MatrixXd b = design.colPivHouseholderQr().solve(lambda);
  PolynomialLoading beta;
  beta.intercept = b.topRows(3);
  beta.linear = b.row(3).transpose();
  beta.quadratic = b.row(4).transpose();
  return beta;
}

VectorXd kernel_to_free(const KernelNoise& noise) {
  const auto K = noise.scales.size();
  VectorXd free(K + 4);
  free.head(K) = noise.scales.array().log();
  free(K) = std::log(noise.range);
  free(K + 1) = std::log(std::max(noise.nugget, 1e-300));
  free(K + 2) = noise.anisotropy.theta2;
  free(K + 3) =
      std::log(noise.anisotropy.theta1 - noise.anisotropy.theta2 * noise.anisotropy.theta2 / 4.0);
  return free;
}

KernelNoise kernel_from_free(KernelKind kind, const VectorXd& free) {
  const auto K = free.size() - 4;
  KernelNoise noise;
  noise.kind = kind;
  noise.scales = free.head(K).array().exp();
  noise.range = std::exp(free(K));
  noise.nugget = std::exp(free(K + 1));
  noise.anisotropy.theta2 = free(K + 2);
  const double q = free(K + 2) * free(K + 2) / 4.0;
  noise.anisotropy.theta1 = std::exp(free(K + 3)) + q;
  // exp() can vanish against a large q in floating point
  if (!(noise.anisotropy.theta1 > q)) noise.anisotropy.theta1 = q + std::max(q * 1e-15, 1e-300);
  return noise;
}

KernelFit fit_kernel_noise(const MatrixXd& target, const SiteGrid& grid, KernelKind kind,
                           std::uint64_t seed) {
  const int K = grid.size();
  if (target.rows() != K || target.cols() != K || !target.allFinite())
    throw ValidationError("kernel fit target must be a finite K x K matrix");

  const SiteOffsets off = site_offsets_km(grid);
  auto residuals = [&](const VectorXd& free) -> VectorXd {
    MatrixXd diff = realize_kernel_noise(kernel_from_free(kind, free), off) - target;
    return Eigen::Map<VectorXd>(diff.data(), diff.size());
  };

  // Typical inter-site distance sets the range scale of the starting points.
  double typical = 0.0;
  {
    const MatrixXd d = anisotropic_distance(grid, Anisotropy{});
    std::vector<double> pos;
    for (int i = 0; i < K; ++i)
      for (int j = i + 1; j < K; ++j) pos.push_back(d(i, j));
    if (pos.empty()) {
      typical = 100.0;
    } else {
      std::nth_element(pos.begin(), pos.begin() + static_cast<long>(pos.size() / 2), pos.end());
      typical = std::max(pos[pos.size() / 2], 1e-6);
    }
  }

  std::vector<KernelNoise> starts;
  for (double theta1 : {1.0, 0.25}) {
    for (double mult : {0.5, 1.0, 2.0}) {
      KernelNoise s;
      s.kind = kind;
      s.nugget = 0.1;
      s.scales = VectorXd(K);
      for (int i = 0; i < K; ++i)
        s.scales(i) = std::sqrt(std::max(target(i, i), 1e-12) / (1.0 + s.nugget));
      s.range = kind == KernelKind::Gauss ? mult / (typical * typical)
                                          : mult * std::numbers::pi / (2.0 * typical);
      s.anisotropy = {theta1, 0.0};
      starts.push_back(s);
    }
  }
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  for (int extra = 0; extra < 2; ++extra) {
    KernelNoise s = starts[static_cast<std::size_t>(extra)];
    s.range *= std::exp(normal(gen));
    s.anisotropy.theta1 *= std::exp(0.5 * normal(gen));
    starts.push_back(s);
  }

  KernelFit best;
  best.residual = std::numeric_limits<double>::infinity();
  for (const auto& s : starts) {
    const OptimResult r = minimize_least_squares(residuals, kernel_to_free(s));
    if (r.value < best.residual) {
      best.residual = r.value;
      best.noise = kernel_from_free(kind, r.x);
      best.converged = r.converged;
    }
  }
  return best;
}

}  // namespace windssm
