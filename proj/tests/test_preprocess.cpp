#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <numbers>

#include "support.hpp"
#include "windssm/errors.hpp"
#include "windssm/preprocess.hpp"

using namespace windssm;

namespace {

// Raw panel whose site k is Gaussian after a Box-Cox power lambdas[k].
Panel gaussian_after_power(const std::vector<double>& lambdas, int T, int R, std::uint64_t seed) {
  const int K = static_cast<int>(lambdas.size());
  std::vector<Site> sites;
  for (int k = 0; k < K; ++k) sites.push_back({k + 1, 45.0, -2.0 + k});
  Panel p;
  p.grid = SiteGrid(std::move(sites));
  p.stage = Stage::Raw;
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> n;
  for (int r = 0; r < R; ++r) {
    MatrixXd y(T, K);
    for (int t = 0; t < T; ++t)
      for (int k = 0; k < K; ++k) {
        const double level = boxcox(7.0 + k, lambdas[static_cast<std::size_t>(k)]);
        double z;
        do z = n(gen); while (std::abs(z) > 3.5);
        y(t, k) = inv_boxcox(level + 1.2 * z, lambdas[static_cast<std::size_t>(k)]);
      }
    p.replicates.push_back(y);
  }
  return p;
}

}  // namespace

TEST_CASE("boxcox values") {
  for (double lambda : {0.0, 0.3, 0.5, 1.0, 2.0}) CHECK(boxcox(1.0, lambda) == 0.0);
  CHECK(boxcox(4.0, 0.5) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(boxcox(std::numbers::e, 0.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(boxcox(3.0, 1e-12) == doctest::Approx(std::log(3.0)).epsilon(1e-10));
  CHECK(boxcox(3.0, 1.0) == doctest::Approx(2.0));
  CHECK_THROWS_AS(boxcox(0.0, 0.5), ValidationError);
  CHECK_THROWS_AS(boxcox(-1.0, 0.5), ValidationError);
  CHECK_THROWS_AS(boxcox(2.0, -0.1), ValidationError);
}

TEST_CASE("boxcox is increasing and inverted exactly") {
  for (double lambda : {0.0, 0.25, 0.5, 0.85, 1.0, 1.7}) {
    double prev = -std::numeric_limits<double>::infinity();
    for (double y = 0.05; y < 40.0; y *= 1.3) {
      const double v = boxcox(y, lambda);
      CHECK(v > prev);
      prev = v;
      CHECK(std::abs(inv_boxcox(v, lambda) - y) <= 1e-12 * std::max(1.0, y));
    }
  }
  for (double y : {0.1, 1.0, 30.0})
    for (double lambda : {0.0, 0.5, 0.85})
      CHECK(std::abs(inv_boxcox(boxcox(y, lambda), lambda) - y) <= 1e-12 * std::max(1.0, y));
  CHECK(inv_boxcox(2.0, 0.5) == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("inv_boxcox clamps outside the image") {
  const long long before = inv_boxcox_clamp_count();
  CHECK(inv_boxcox(-3.0, 0.5) == 0.0);
  CHECK(inv_boxcox(-2.0, 0.5) == 0.0);
  CHECK(inv_boxcox_clamp_count() == before + 2);
  CHECK(inv_boxcox(-3.0, 0.0) == doctest::Approx(std::exp(-3.0)));
  CHECK(inv_boxcox_clamp_count() == before + 2);
}

TEST_CASE("Hinkley statistic") {
  CHECK(hinkley_stat({-1.0, 0.0, 1.0}) == 0.0);
  CHECK(hinkley_stat({0.0, 0.0, 3.0}) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(hinkley_stat({0.0, 3.0, 0.0, 3.0}) == doctest::Approx(0.0));
  CHECK_THROWS_AS(hinkley_stat({2.0, 2.0, 2.0}), ValidationError);
  CHECK_THROWS_AS(hinkley_stat({1.0, 2.0}), ValidationError);

  std::mt19937_64 gen(1);
  std::lognormal_distribution<double> ln(0.0, 0.8);
  std::vector<double> v(20000);
  for (auto& x : v) x = ln(gen);
  CHECK(hinkley_stat(v) > 0.1);
}

TEST_CASE("lambda selection") {
  const Panel p = gaussian_after_power({0.85, 0.85, 0.85, 0.85}, 124, 33, 4);
  const LambdaSelection sel = select_lambda(p);
  CHECK(std::abs(sel.lambda - 0.85) < 0.1);
  CHECK(sel.unbracketed_sites.empty());
  const auto [lo, hi] = std::minmax_element(sel.per_site.begin(), sel.per_site.end());
  CHECK(sel.lambda >= *lo);
  CHECK(sel.lambda <= *hi);

  const LambdaSelection two = select_lambda(gaussian_after_power({0.6, 1.0}, 124, 33, 5));
  CHECK(two.per_site[0] == doctest::Approx(0.6).epsilon(0.1));
  CHECK(two.per_site[1] == doctest::Approx(1.0).epsilon(0.1));
  CHECK(two.lambda == doctest::Approx(0.8).epsilon(0.06));

  // Symmetric data needs no correction.
  const LambdaSelection one = select_lambda(gaussian_after_power({1.0, 1.0}, 200, 20, 6));
  for (double l : one.per_site) CHECK(std::abs(l - 1.0) < 0.15);
}

TEST_CASE("lambda selection is invariant under site reordering") {
  const Panel p = gaussian_after_power({0.5, 0.85, 1.2}, 60, 10, 7);
  Panel q = p;
  std::vector<Site> sites;
  for (int k : {2, 0, 1}) sites.push_back(p.grid[k]);
  q.grid = SiteGrid(sites);
  for (auto& y : q.replicates) {
    MatrixXd z(y.rows(), 3);
    z << y.col(2), y.col(0), y.col(1);
    y = z;
  }
  const LambdaSelection a = select_lambda(p), b = select_lambda(q);
  CHECK(a.lambda == doctest::Approx(b.lambda).epsilon(1e-14));
  CHECK(a.per_site[2] == b.per_site[0]);
}

TEST_CASE("lambda selection errors") {
  Panel p = gaussian_after_power({0.85, 0.85}, 20, 2, 8);
  Panel constant = p;
  for (auto& y : constant.replicates) y.col(1).setConstant(5.0);
  CHECK_THROWS_WITH_AS(select_lambda(constant), doctest::Contains("site 2"), ValidationError);
  Panel negative = p;
  negative.replicates[1](3, 0) = -1.0;
  CHECK_THROWS_WITH_AS(select_lambda(negative), doctest::Contains("site 1"), ValidationError);
  Panel wrong = p;
  wrong.stage = Stage::Transformed;
  CHECK_THROWS_AS(select_lambda(wrong), ValidationError);
}

TEST_CASE("centering and its inverse") {
  const Panel raw = gaussian_after_power({0.85, 0.7, 1.1}, 50, 6, 9);
  const Panel tr = transform(raw, 0.85);
  CHECK(tr.stage == Stage::Transformed);
  TransformSpec spec;
  spec.lambda = 0.85;
  const Panel c = center(tr, spec);
  CHECK(c.stage == Stage::TransformedCentered);

  VectorXd mean = VectorXd::Zero(3), cmean = VectorXd::Zero(3);
  for (std::size_t r = 0; r < tr.replicates.size(); ++r) {
    mean += tr.replicates[r].colwise().sum().transpose();
    cmean += c.replicates[r].colwise().sum().transpose();
  }
  mean /= 300.0;
  cmean /= 300.0;
  CHECK((spec.site_means - mean).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(cmean.cwiseAbs().maxCoeff() < 1e-12);

  const Panel back = add_back(spec, c);
  for (std::size_t r = 0; r < tr.replicates.size(); ++r)
    CHECK((back.replicates[r] - tr.replicates[r]).cwiseAbs().maxCoeff() < 1e-14);

  for (std::size_t r = 0; r < raw.replicates.size(); ++r)
    CHECK((to_raw_scale(spec, c.replicates[r]) - raw.replicates[r]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("full preprocess pipeline") {
  const Panel raw = gaussian_after_power({0.85, 0.85, 0.85}, 124, 33, 10);
  TransformSpec spec;
  LambdaSelection sel;
  const Panel c = preprocess(raw, spec, &sel);
  CHECK(spec.lambda == sel.lambda);
  CHECK(std::abs(spec.lambda - 0.85) < 0.1);
  CHECK(c.stage == Stage::TransformedCentered);
  CHECK_THROWS_AS(preprocess(c, spec), ValidationError);
}
