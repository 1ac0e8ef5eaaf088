#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace windssm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Site {
  int id = 0;
  double lat = 0.0;  // degrees north
  double lon = 0.0;  // degrees east (west is negative)
};

/// Ordered set of observation sites. Site ids are unique and coordinates
/// finite; the order fixes the row order of every K-dimensional quantity.
class SiteGrid {
 public:
  SiteGrid() = default;
  explicit SiteGrid(std::vector<Site> sites);

  int size() const { return static_cast<int>(sites_.size()); }
  const std::vector<Site>& sites() const { return sites_; }
  const Site& operator[](int i) const { return sites_[static_cast<std::size_t>(i)]; }

  VectorXd latitudes() const;
  VectorXd longitudes() const;
  /// Position of `site_id` in the grid, or -1.
  int index_of(int site_id) const;

  bool operator==(const SiteGrid& other) const;

 private:
  std::vector<Site> sites_;
};

/// Scalar latent regional process: AR(1) when order == 1 (rho2 unused),
/// AR(2) X_{t+1} = rho1 X_t + rho2 X_{t-1} + sigma eps otherwise.
struct LatentSpec {
  int order = 1;
  double rho1 = 0.0;
  double rho2 = 0.0;
  double sigma = 1.0;

  static LatentSpec ar1(double rho, double sigma) { return {1, rho, 0.0, sigma}; }
  static LatentSpec ar2(double rho1, double rho2, double sigma) {
    return {2, rho1, rho2, sigma};
  }
};

bool is_stationary(const LatentSpec& latent);
/// Stationary variance of X. Throws ValidationError outside the
/// stationarity region.
double stationary_variance(const LatentSpec& latent);
/// gamma(0..max_lag) of the stationary latent chain.
std::vector<double> latent_autocovariance(const LatentSpec& latent, int max_lag);

/// Unstructured K x 3 loading matrix with columns (alpha_1, alpha_0, alpha_-1).
struct FullLoading {
  MatrixXd matrix;
};

/// Loading quadratic in (centered) longitude with one intercept per
/// latitude level:
///   Lambda(i, c) = intercept(level(i), c) + linear(c) * l_i + quadratic(c) * l_i^2
/// where l_i is the site longitude minus the grid mean longitude and
/// level(i) ranks the site latitude among the three distinct grid latitudes.
struct PolynomialLoading {
  Eigen::Matrix3d intercept = Eigen::Matrix3d::Zero();  // (latitude level, column)
  Eigen::Vector3d linear = Eigen::Vector3d::Zero();
  Eigen::Vector3d quadratic = Eigen::Vector3d::Zero();

  static constexpr int kSize = 15;
  /// Packed as intercept (column-major), linear, quadratic.
  VectorXd to_vector() const;
  static PolynomialLoading from_vector(const VectorXd& beta);
};

using LoadingSpec = std::variant<FullLoading, PolynomialLoading>;

enum class KernelKind { Gauss, Wave };

/// Quadratic-form coefficients of the anisotropic distance; positive
/// definite iff theta1 > theta2^2 / 4.
struct Anisotropy {
  double theta1 = 1.0;
  double theta2 = 0.0;
};

/// Gamma_ij = s_i s_j (k(d_ij) + nugget delta_ij) with k the Gaussian
/// kernel exp(-range d^2) or the wave kernel sin(range d) / (range d).
struct KernelNoise {
  KernelKind kind = KernelKind::Gauss;
  VectorXd scales;
  double range = 1.0;
  double nugget = 0.0;
  Anisotropy anisotropy;
};

struct FullNoise {
  MatrixXd matrix;
};

using NoiseSpec = std::variant<FullNoise, KernelNoise>;

struct ModelParams {
  LatentSpec latent;
  LoadingSpec loading;
  NoiseSpec noise;
  SiteGrid grid;

  /// Realized K x 3 loading matrix.
  MatrixXd lambda() const;
  /// Realized K x K observation-noise covariance.
  MatrixXd gamma() const;

  bool has_polynomial_loading() const {
    return std::holds_alternative<PolynomialLoading>(loading);
  }
  bool has_kernel_noise() const { return std::holds_alternative<KernelNoise>(noise); }
};

struct ValidationReport {
  bool stationary = false;
  bool unit_latent_variance = false;
  bool loading_independent = false;
  bool noise_positive_definite = false;
  double latent_variance = 0.0;
  double loading_singular_ratio = 0.0;  // smallest / largest singular value
  std::vector<std::string> messages;

  bool ok() const {
    return stationary && unit_latent_variance && loading_independent &&
           noise_positive_definite;
  }
};

inline constexpr double kLoadingRankTolerance = 1e-8;

/// Checks every identifiability and well-posedness rule. Never throws.
ValidationReport validate(const ModelParams& params);

/// Throws ValidationError unless the parameters define a proper stationary
/// Gaussian model (stationary latent, sigma > 0, dimensions consistent,
/// Gamma positive definite). Identifiability is not required.
void require_well_posed(const ModelParams& params);

/// Rescales the latent chain to unit stationary variance and the loading
/// by the inverse factor. The observed process law is unchanged.
ModelParams normalize(const ModelParams& params);

/// Flips the loading sign when the entries of alpha_0 sum to a negative
/// number.
ModelParams canonical_sign(const ModelParams& params);

enum class Stage { Raw, Transformed, TransformedCentered };

std::string to_string(Stage stage);
Stage stage_from_string(const std::string& text);

/// R independent replicates, each a T x K matrix (rows are time steps).
struct Panel {
  std::vector<MatrixXd> replicates;
  SiteGrid grid;
  Stage stage = Stage::TransformedCentered;
  double time_step_hours = 6.0;

  int R() const { return static_cast<int>(replicates.size()); }
  int T() const { return replicates.empty() ? 0 : static_cast<int>(replicates.front().rows()); }
  int K() const { return grid.size(); }
  long long observation_count() const {
    return static_cast<long long>(R()) * T() * K();
  }

  /// Throws ValidationError on shape mismatch, non-finite values or T < min_steps.
  void check(int min_steps = 4) const;
};

/// Exact draw from the stationary model: the latent chain starts from its
/// stationary law. Replicate r uses a generator seeded from (seed, r), so
/// replicates are independent of evaluation order.
Panel simulate(const ModelParams& params, int T, int R, std::uint64_t seed);

}  // namespace windssm
