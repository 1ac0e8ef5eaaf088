#include "windssm/preprocess.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "windssm/errors.hpp"

namespace windssm {

namespace {
std::atomic<long long> clamp_count{0};
}

double boxcox(double value, double lambda) {
  if (!(value > 0.0)) throw ValidationError("boxcox needs a positive value, got " + std::to_string(value));
  if (!(lambda >= 0.0)) throw ValidationError("boxcox needs lambda >= 0");
  if (lambda == 0.0) return std::log(value);
  return std::expm1(lambda * std::log(value)) / lambda;
}

double inv_boxcox(double value, double lambda) {
  if (lambda == 0.0) return std::exp(value);
  const double base = lambda * value + 1.0;
  if (!(base > 0.0)) {
    clamp_count.fetch_add(1, std::memory_order_relaxed);
    return 0.0;
  }
  return std::exp(std::log1p(lambda * value) / lambda);
}

long long inv_boxcox_clamp_count() { return clamp_count.load(); }

double hinkley_stat(const std::vector<double>& values) {
  const auto n = values.size();
  if (n < 3) throw ValidationError("hinkley_stat needs at least 3 values");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  if (!(var > 0.0)) throw ValidationError("hinkley_stat: zero variance");

  std::vector<double> sorted = values;
  const auto mid = sorted.begin() + static_cast<long>(n / 2);
  std::nth_element(sorted.begin(), mid, sorted.end());
  double median = *mid;
  if (n % 2 == 0) median = 0.5 * (median + *std::max_element(sorted.begin(), mid));
  return (mean - median) / std::sqrt(var);
}

LambdaSelection select_lambda(const Panel& raw) {
  if (raw.stage != Stage::Raw) throw ValidationError("select_lambda needs a raw panel");
  raw.check(1);
  LambdaSelection out;
  const int K = raw.K();
  std::vector<double> series;
  std::vector<double> transformed;
  for (int k = 0; k < K; ++k) {
    series.clear();
    for (const auto& y : raw.replicates)
      for (Eigen::Index t = 0; t < y.rows(); ++t) series.push_back(y(t, k));
    for (double v : series)
      if (!(v > 0.0))
        throw ValidationError("site " + std::to_string(raw.grid[k].id) +
                              " has a non-positive wind value");

    const auto S = [&](double lambda) {
      transformed.resize(series.size());
      std::transform(series.begin(), series.end(), transformed.begin(),
                     [lambda](double v) { return boxcox(v, lambda); });
      try {
        return hinkley_stat(transformed);
      } catch (const ValidationError&) {
        throw ValidationError("site " + std::to_string(raw.grid[k].id) +
                              " has a degenerate series");
      }
    };
    double lo = kLambdaLow, hi = kLambdaHigh;
    double s_lo = S(lo), s_hi = S(hi);
    double root;
    if (s_lo == 0.0) {
      root = lo;
    } else if (s_hi == 0.0) {
      root = hi;
    } else if ((s_lo > 0.0) == (s_hi > 0.0)) {
      root = std::abs(s_lo) <= std::abs(s_hi) ? lo : hi;
      out.unbracketed_sites.push_back(raw.grid[k].id);
    } else {
      while (hi - lo > kLambdaTolerance) {
        const double m = 0.5 * (lo + hi);
        const double s_m = S(m);
        if (s_m == 0.0) {
          lo = hi = m;
          break;
        }
        if ((s_m > 0.0) == (s_lo > 0.0)) {
          lo = m;
          s_lo = s_m;
        } else {
          hi = m;
        }
      }
      root = 0.5 * (lo + hi);
    }
    out.per_site.push_back(root);
  }
  double sum = 0.0;
  for (double l : out.per_site) sum += l;
  out.lambda = sum / K;
  return out;
}

Panel transform(const Panel& raw, double lambda) {
  if (raw.stage != Stage::Raw) throw ValidationError("panel is already transformed");
  raw.check(1);
  Panel out = raw;
  for (auto& y : out.replicates) y = y.unaryExpr([lambda](double v) { return boxcox(v, lambda); });
  out.stage = Stage::Transformed;
  return out;
}

Panel center(const Panel& transformed, TransformSpec& spec) {
  if (transformed.stage != Stage::Transformed)
    throw ValidationError("center needs a transformed, not yet centered panel");
  transformed.check(1);
  VectorXd means = VectorXd::Zero(transformed.K());
  for (const auto& y : transformed.replicates) means += y.colwise().sum().transpose();
  means /= static_cast<double>(transformed.R()) * transformed.T();
  Panel out = transformed;
  for (auto& y : out.replicates) y.rowwise() -= means.transpose();
  out.stage = Stage::TransformedCentered;
  spec.site_means = means;
  return out;
}

Panel add_back(const TransformSpec& spec, const Panel& centered) {
  if (centered.stage != Stage::TransformedCentered)
    throw ValidationError("add_back needs a centered panel");
  if (spec.site_means.size() != centered.K())
    throw ValidationError("transform spec and panel have different site counts");
  Panel out = centered;
  for (auto& y : out.replicates) y.rowwise() += spec.site_means.transpose();
  out.stage = Stage::Transformed;
  return out;
}

Panel preprocess(const Panel& raw, TransformSpec& spec, LambdaSelection* selection) {
  const LambdaSelection sel = select_lambda(raw);
  spec.lambda = sel.lambda;
  Panel out = center(transform(raw, sel.lambda), spec);
  if (selection) *selection = sel;
  return out;
}

MatrixXd to_raw_scale(const TransformSpec& spec, const MatrixXd& centered) {
  if (spec.site_means.size() != centered.cols())
    throw ValidationError("transform spec and data have different site counts");
  MatrixXd out(centered.rows(), centered.cols());
  for (Eigen::Index t = 0; t < centered.rows(); ++t)
    for (Eigen::Index k = 0; k < centered.cols(); ++k)
      out(t, k) = inv_boxcox(centered(t, k) + spec.site_means(k), spec.lambda);
  return out;
}

}  // namespace windssm
