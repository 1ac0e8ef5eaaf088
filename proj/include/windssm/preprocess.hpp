#pragma once

#include <atomic>
#include <vector>

#include "windssm/model.hpp"

namespace windssm {

/// Common Box-Cox power and the per-site means removed after transforming.
struct TransformSpec {
  double lambda = 1.0;
  VectorXd site_means;
};

/// (y^lambda - 1) / lambda, natural log at lambda = 0. Throws
/// ValidationError for y <= 0 or lambda < 0.
double boxcox(double value, double lambda);

/// Exact inverse of boxcox. Values outside the image of the transform
/// (lambda * value + 1 <= 0) clamp to 0 and bump inv_boxcox_clamp_count().
double inv_boxcox(double value, double lambda);

/// Number of clamped inv_boxcox calls since process start.
long long inv_boxcox_clamp_count();

/// (mean - median) / sd, sd with denominator n. Throws ValidationError for
/// fewer than 3 values or zero variance.
double hinkley_stat(const std::vector<double>& values);

struct LambdaSelection {
  std::vector<double> per_site;
  /// Sites where S had no sign change on [0, 2]; the endpoint with the
  /// smaller |S| was used.
  std::vector<int> unbracketed_sites;
  double lambda = 1.0;  // mean of per_site
};

inline constexpr double kLambdaLow = 0.0;
inline constexpr double kLambdaHigh = 2.0;
inline constexpr double kLambdaTolerance = 1e-4;

/// Per-site root of S(lambda) = 0 by bisection on [0, 2], pooling all
/// replicates and times of the site. The panel must be raw.
LambdaSelection select_lambda(const Panel& raw);

/// Applies boxcox with a common lambda; raw stage to transformed.
Panel transform(const Panel& raw, double lambda);

/// Subtracts per-site means pooled over replicates and time.
Panel center(const Panel& transformed, TransformSpec& spec);

/// Adds the per-site means back (inverse of center).
Panel add_back(const TransformSpec& spec, const Panel& centered);

/// Raw panel to transformed-centered panel with the common lambda.
Panel preprocess(const Panel& raw, TransformSpec& spec, LambdaSelection* selection = nullptr);

/// Centered Gaussian-scale values to wind speed: inv_boxcox(value + mean).
MatrixXd to_raw_scale(const TransformSpec& spec, const MatrixXd& centered);

}  // namespace windssm
