#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support.hpp"
#include "windssm/covariance.hpp"
#include "windssm/errors.hpp"
#include "windssm/model.hpp"

using namespace windssm;
using testing::random_params;

namespace {

ModelParams basic(double rho, double sigma) {
  ModelParams p;
  p.grid = testing::line_grid(3);
  p.latent = LatentSpec::ar1(rho, sigma);
  MatrixXd L(3, 3);
  L << 1.0, 0.2, 0.1, 0.3, 1.0, -0.4, 0.5, 0.1, 0.9;
  p.loading = FullLoading{L};
  p.noise = FullNoise{MatrixXd::Identity(3, 3)};
  return p;
}

double max_cov_diff(const ModelParams& a, const ModelParams& b, int lags) {
  const CovSet ca = theoretical_cov(a, lags), cb = theoretical_cov(b, lags);
  double d = 0.0;
  for (int k = 0; k <= lags; ++k) d = std::max(d, (ca[k] - cb[k]).cwiseAbs().maxCoeff());
  return d;
}

}  // namespace

TEST_CASE("site grid rejects duplicates and non-finite coordinates") {
  CHECK_THROWS_AS(SiteGrid({{1, 0.0, 0.0}, {1, 1.0, 1.0}}), ValidationError);
  CHECK_THROWS_AS(SiteGrid({{1, NAN, 0.0}}), ValidationError);
  CHECK_THROWS_AS(SiteGrid(std::vector<Site>{}), ValidationError);
  const SiteGrid g({{7, 1.0, 2.0}, {3, 4.0, 5.0}});
  CHECK(g.index_of(3) == 1);
  CHECK(g.index_of(9) == -1);
}

TEST_CASE("validate flags each rule") {
  const ModelParams ok = basic(0.5, std::sqrt(0.75));
  const ValidationReport r = validate(ok);
  CHECK(r.ok());
  CHECK(r.latent_variance == doctest::Approx(1.0));

  ModelParams unit_root = ok;
  unit_root.latent.rho1 = 1.0;
  CHECK_FALSE(validate(unit_root).stationary);
  CHECK_FALSE(validate(unit_root).ok());

  ModelParams dependent = ok;
  MatrixXd L = ok.lambda();
  L.col(2) = L.col(0) + L.col(1);
  dependent.loading = FullLoading{L};
  CHECK_FALSE(validate(dependent).loading_independent);
  CHECK(validate(dependent).stationary);

  ModelParams not_unit = basic(0.5, 1.0);
  CHECK_FALSE(validate(not_unit).unit_latent_variance);

  ModelParams indefinite = ok;
  MatrixXd G = MatrixXd::Identity(3, 3);
  G(0, 0) = -1.0;
  indefinite.noise = FullNoise{G};
  CHECK_FALSE(validate(indefinite).noise_positive_definite);
}

TEST_CASE("AR(2) stationarity region") {
  CHECK(is_stationary(LatentSpec::ar2(0.91, -0.11, 1.0)));
  CHECK_FALSE(is_stationary(LatentSpec::ar2(0.6, 0.5, 1.0)));
  CHECK_FALSE(is_stationary(LatentSpec::ar2(-0.6, 0.5, 1.0)));
  CHECK_FALSE(is_stationary(LatentSpec::ar2(0.0, -1.0, 1.0)));
  CHECK_THROWS_AS(stationary_variance(LatentSpec::ar2(0.6, 0.5, 1.0)), ValidationError);
}

TEST_CASE("latent autocovariance matches the moving-average oracle") {
  for (const auto& lat : {LatentSpec::ar1(0.76, 0.3), LatentSpec::ar2(0.91, -0.11, 0.7),
                          LatentSpec::ar2(-0.4, 0.3, 1.2)}) {
    const auto a = latent_autocovariance(lat, 8);
    const auto b = testing::ma_autocovariance(lat, 8);
    for (int h = 0; h <= 8; ++h) CHECK(a[h] == doctest::Approx(b[h]).epsilon(1e-12));
  }
}

TEST_CASE("normalize") {
  const ModelParams p = basic(0.5, 1.0);
  const ModelParams n = normalize(p);
  CHECK(n.latent.rho1 == 0.5);
  CHECK(n.latent.sigma == doctest::Approx(std::sqrt(0.75)).epsilon(1e-15));
  CHECK((n.lambda() - p.lambda() * std::sqrt(4.0 / 3.0)).cwiseAbs().maxCoeff() < 1e-14);

  const ModelParams twice = normalize(n);
  CHECK(twice.latent.sigma == n.latent.sigma);
  CHECK(twice.lambda() == n.lambda());

  std::mt19937_64 gen(3);
  for (int i = 0; i < 20; ++i) {
    const ModelParams raw = random_params(4, gen, 1 + i % 2, false);
    CHECK(max_cov_diff(raw, normalize(raw), 3) < 1e-12 * (1.0 + theoretical_cov(raw, 0)[0].norm()));
  }
  ModelParams bad = p;
  bad.latent.rho1 = 1.2;
  CHECK_THROWS_AS(normalize(bad), ValidationError);
}

TEST_CASE("canonical_sign") {
  ModelParams p = basic(0.5, std::sqrt(0.75));
  CHECK(canonical_sign(p).lambda() == p.lambda());
  MatrixXd L = p.lambda();
  p.loading = FullLoading{-L};
  CHECK(canonical_sign(p).lambda() == L);
  CHECK(max_cov_diff(p, canonical_sign(p), 4) < 1e-14);

  ModelParams poly;
  poly.grid = testing::square_grid();
  poly.latent = LatentSpec::ar1(0.3, std::sqrt(1 - 0.09));
  PolynomialLoading beta;
  beta.intercept << -1, 0.2, 0.1, 0.3, -1, 0.2, 0.1, 0.5, -1;
  beta.linear << 0.05, -0.02, 0.01;
  poly.loading = beta;
  poly.noise = FullNoise{MatrixXd::Identity(9, 9)};
  const ModelParams flipped = canonical_sign(poly);
  CHECK(flipped.lambda().col(1).sum() > 0.0);
  CHECK((flipped.lambda() + poly.lambda()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("simulate is deterministic and exact") {
  const ModelParams p = basic(0.76, std::sqrt(1 - 0.76 * 0.76));
  const Panel a = simulate(p, 20, 3, 42);
  const Panel b = simulate(p, 20, 3, 42);
  const Panel c = simulate(p, 20, 3, 43);
  REQUIRE(a.R() == 3);
  REQUIRE(a.T() == 20);
  for (int r = 0; r < 3; ++r) CHECK(a.replicates[r] == b.replicates[r]);
  CHECK(a.replicates[0] != c.replicates[0]);
  // Replicates are independent of how many are drawn.
  const Panel d = simulate(p, 20, 5, 42);
  CHECK(d.replicates[2] == a.replicates[2]);
  CHECK_THROWS_AS(simulate(p, 3, 1, 1), ValidationError);
  ModelParams bad = p;
  bad.latent.rho1 = 1.0;
  CHECK_THROWS_AS(simulate(bad, 10, 1, 1), ValidationError);
}

TEST_CASE("white-noise observation: C0 = I, C1 = 0") {
  ModelParams p;
  p.grid = testing::line_grid(2);
  p.latent = LatentSpec::ar1(0.5, std::sqrt(0.75));
  p.loading = FullLoading{MatrixXd::Zero(2, 3)};
  p.noise = FullNoise{MatrixXd::Identity(2, 2)};
  const Panel panel = simulate(p, 1000, 1000, 7);
  const CovSet c = empirical_cov(panel, 1);
  const double se = 1.0 / std::sqrt(1e6);
  CHECK((c[0] - MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 5 * std::sqrt(2.0) * se);
  CHECK(c[1].cwiseAbs().maxCoeff() < 5 * se);
}

TEST_CASE("simulated moments agree with the closed form within Monte Carlo error") {
  std::mt19937_64 gen(11);
  ModelParams p = random_params(6, gen);
  p.latent = LatentSpec::ar1(0.76, std::sqrt(1 - 0.76 * 0.76));
  const int R = 1000, T = 1000, L = 3;
  const Panel panel = simulate(p, T, R, 99);
  const CovSet truth = theoretical_cov(p, L);
  // Replicate-level estimates give the Monte Carlo standard error directly.
  std::vector<CovSet> per_rep;
  Panel one;
  one.grid = panel.grid;
  for (int r = 0; r < R; ++r) {
    one.replicates = {panel.replicates[r]};
    per_rep.push_back(empirical_cov(one, L));
  }
  int within3 = 0, total = 0;
  double worst = 0.0;
  const CovSet pooled = empirical_cov(panel, L);
  for (int k = 0; k <= L; ++k)
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) {
        double m = 0.0, s = 0.0;
        for (const auto& c : per_rep) m += c[k](i, j);
        m /= R;
        for (const auto& c : per_rep) s += (c[k](i, j) - m) * (c[k](i, j) - m);
        const double se = std::sqrt(s / (R - 1) / R);
        const double z = std::abs(pooled[k](i, j) - truth[k](i, j)) / se;
        worst = std::max(worst, z);
        within3 += z < 3.0;
        ++total;
      }
  CHECK(within3 >= 0.98 * total);
  CHECK(worst < 5.0);
}

TEST_CASE("ARMA(1,2) cut-off of the quasi-differenced observations") {
  std::mt19937_64 gen(5);
  ModelParams p = random_params(3, gen);
  const double rho = 0.7;
  p.latent = LatentSpec::ar1(rho, std::sqrt(1 - rho * rho));
  const Panel panel = simulate(p, 2000, 300, 17);
  Panel diff = panel;
  for (auto& y : diff.replicates) {
    const MatrixXd d = y.bottomRows(y.rows() - 1) - rho * y.topRows(y.rows() - 1);
    y = d;
  }
  const CovSet c = empirical_cov(diff, 4);
  const double scale = c[0].cwiseAbs().maxCoeff();
  CHECK(c[2].cwiseAbs().maxCoeff() > 0.05 * scale);
  CHECK(c[3].cwiseAbs().maxCoeff() < 0.02 * scale);
  CHECK(c[4].cwiseAbs().maxCoeff() < 0.02 * scale);
}

TEST_CASE("normalized latent has unit variance in simulation") {
  ModelParams p;
  p.grid = testing::line_grid(1);
  p.latent = LatentSpec::ar1(0.8, 2.0);
  MatrixXd L(1, 3);
  L << 0.0, 1.0, 0.0;
  p.loading = FullLoading{L};
  p.noise = FullNoise{MatrixXd::Identity(1, 1) * 1e-10};
  const ModelParams n = normalize(p);
  const double a0 = n.lambda()(0, 1);
  const Panel panel = simulate(n, 1000, 400, 8);
  CHECK(empirical_cov(panel, 0)[0](0, 0) / (a0 * a0) == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("AR(2) simulation matches the state-space covariances") {
  std::mt19937_64 gen(21);
  ModelParams p = random_params(2, gen);
  p.latent = LatentSpec::ar2(0.91, -0.11, 1.0);
  p = normalize(p);
  const Panel panel = simulate(p, 1000, 500, 3);
  const CovSet emp = empirical_cov(panel, 3);
  const CovSet th = theoretical_cov_ss(p, 3);
  for (int k = 0; k <= 3; ++k)
    CHECK((emp[k] - th[k]).cwiseAbs().maxCoeff() < 0.06 * th[0].cwiseAbs().maxCoeff());
}

TEST_CASE("simulated moments are invariant under canonical_sign") {
  std::mt19937_64 gen(2);
  ModelParams p = random_params(3, gen);
  ModelParams q = p;
  q.loading = FullLoading{-p.lambda()};
  const CovSet a = empirical_cov(simulate(p, 500, 200, 1), 2);
  const CovSet b = empirical_cov(simulate(canonical_sign(q), 500, 200, 1), 2);
  for (int k = 0; k <= 2; ++k) CHECK((a[k] - b[k]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("panel checks") {
  Panel p;
  p.grid = testing::line_grid(2);
  p.replicates = {MatrixXd::Zero(5, 2)};
  CHECK_NOTHROW(p.check());
  p.replicates.push_back(MatrixXd::Zero(4, 2));
  CHECK_THROWS_AS(p.check(), ValidationError);
  p.replicates = {MatrixXd::Zero(3, 2)};
  CHECK_THROWS_AS(p.check(), ValidationError);
  p.replicates = {MatrixXd::Constant(5, 2, NAN)};
  CHECK_THROWS_AS(p.check(), ValidationError);
  CHECK(stage_from_string(to_string(Stage::TransformedCentered)) == Stage::TransformedCentered);
  CHECK_THROWS_AS(stage_from_string("cooked"), ValidationError);
}
