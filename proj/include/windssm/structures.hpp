#pragma once

#include <array>
#include <cstdint>

#include "windssm/model.hpp"

namespace windssm {

/// Degrees to kilometers along a meridian.
inline constexpr double kKmPerDegree = 111.2;

/// Pairwise latitude and longitude offsets in km, (j minus i). Longitude
/// offsets are scaled by cos of the grid mean latitude.
struct SiteOffsets {
  MatrixXd dlat_km;
  MatrixXd dlon_km;
};

SiteOffsets site_offsets_km(const SiteGrid& grid);

/// d_ij = sqrt(dlat^2 + theta1 dlon^2 + theta2 dlat dlon), offsets in km.
/// Throws ValidationError unless theta1 > theta2^2 / 4.
MatrixXd anisotropic_distance(const SiteGrid& grid, const Anisotropy& aniso);

MatrixXd gamma_gauss(const VectorXd& scales, double range, double nugget,
                     const MatrixXd& distances);
/// The d = 0 kernel value is the sinc limit 1.
MatrixXd gamma_wave(const VectorXd& scales, double range, double nugget,
                    const MatrixXd& distances);

MatrixXd realize_kernel_noise(const KernelNoise& noise, const SiteGrid& grid);
/// Same, from precomputed offsets (no anisotropy validation; used inside
/// searches whose parametrization keeps it valid).
MatrixXd realize_kernel_noise(const KernelNoise& noise, const SiteOffsets& offsets);

/// Distinct grid latitudes in ascending order together with each site's
/// level. Throws ValidationError unless there are exactly three.
struct LatitudeLevels {
  std::array<double, 3> values{};
  std::vector<int> level_of_site;
};
LatitudeLevels latitude_levels(const SiteGrid& grid);

MatrixXd lambda_polynomial(const PolynomialLoading& beta, const SiteGrid& grid);

/// K x 5 design matrix (three latitude indicators, l, l^2) shared by all
/// three loading columns.
MatrixXd polynomial_design(const SiteGrid& grid);

/// d Lambda / d beta_j for the packed coefficient vector; linear map so
/// this is the realization of the j-th unit vector.
std::array<MatrixXd, PolynomialLoading::kSize> polynomial_basis(const SiteGrid& grid);

/// Least-squares projection of a K x 3 matrix on the polynomial structure.
PolynomialLoading fit_polynomial_loading(const MatrixXd& lambda, const SiteGrid& grid);

/// Unconstrained coordinates of a kernel noise: log scales, log range,
/// log nugget, theta2, log(theta1 - theta2^2/4). Any real vector maps to a
/// valid (positive-definite distance, positive scale) structure.
VectorXd kernel_to_free(const KernelNoise& noise);
KernelNoise kernel_from_free(KernelKind kind, const VectorXd& free);

struct KernelFit {
  KernelNoise noise;
  double residual = 0.0;  // sum of squared entrywise errors
  bool converged = false;
};

/// Least-squares fit of a kernel structure to a K x K target, best of
/// several deterministic starting points. Returns the best found
/// parameters; converged is false when the optimizer stalled.
KernelFit fit_kernel_noise(const MatrixXd& target, const SiteGrid& grid, KernelKind kind,
                           std::uint64_t seed = 1);

}  // namespace windssm
