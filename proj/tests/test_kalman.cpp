#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "support.hpp"
#include "windssm/covariance.hpp"
#include "windssm/errors.hpp"
#include "windssm/kalman.hpp"

using namespace windssm;
using testing::random_params;

namespace {

MatrixXd random_series(int T, int K, std::mt19937_64& gen) {
  std::normal_distribution<double> n;
  MatrixXd y(T, K);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = n(gen);
  return y;
}

bool psd(const MatrixXd& m, double tol) {
  return Eigen::SelfAdjointEigenSolver<MatrixXd>(0.5 * (m + m.transpose())).eigenvalues().minCoeff() > -tol;
}

}  // namespace

TEST_CASE("state-space assembly") {
  std::mt19937_64 gen(1);
  ModelParams p = random_params(3, gen);
  p.latent = LatentSpec::ar1(0.76, std::sqrt(1 - 0.76 * 0.76));
  const StateSpaceForm s = build_state_space(p);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(s.init_cov(i, j) == doctest::Approx(std::pow(0.76, std::abs(i - j))).epsilon(1e-13));
  CHECK(s.Q(0, 0) == doctest::Approx(1 - 0.76 * 0.76));
  CHECK(s.Q(1, 1) == 0.0);
  CHECK(s.H == p.lambda());
  CHECK(s.Rm == p.gamma());

  p.latent = LatentSpec::ar1(0.0, 1.0);
  CHECK((build_state_space(p).init_cov - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-15);

  p.latent = LatentSpec::ar2(0.91, -0.11, 1.0);
  const StateSpaceForm s2 = build_state_space(p);
  CHECK(s2.A(0, 1) == -0.11);
  CHECK(s2.A.eigenvalues().cwiseAbs().maxCoeff() < 1.0);

  p.latent = LatentSpec::ar1(1.0, 1.0);
  CHECK_THROWS_AS(build_state_space(p), ValidationError);
}

TEST_CASE("Lyapunov solver against the vectorized linear system") {
  std::mt19937_64 gen(2);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 10; ++trial) {
    MatrixXd A(4, 4), B(4, 4);
    for (int i = 0; i < 16; ++i) {
      A.data()[i] = n(gen);
      B.data()[i] = n(gen);
    }
    A /= 1.1 * A.eigenvalues().cwiseAbs().maxCoeff();
    const MatrixXd Q = B * B.transpose();
    const MatrixXd P = solve_discrete_lyapunov(A, Q);
    // vec(P) = (I - A kron A)^{-1} vec(Q)
    MatrixXd kron(16, 16);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) kron.block(4 * i, 4 * j, 4, 4) = A(i, j) * A;
    const VectorXd vq = Eigen::Map<const VectorXd>(Q.data(), 16);
    const VectorXd vp = (MatrixXd::Identity(16, 16) - kron).fullPivLu().solve(vq);
    CHECK((Eigen::Map<const VectorXd>(P.data(), 16) - vp).norm() < 1e-10 * vp.norm());
  }
  CHECK_THROWS_AS(solve_discrete_lyapunov(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2)),
                  NumericalError);
}

TEST_CASE("log-likelihood equals the joint Gaussian density") {
  std::mt19937_64 gen(3);
  std::uniform_int_distribution<int> kd(1, 4);
  for (int trial = 0; trial < 100; ++trial) {
    const int K = trial == 0 ? 2 : kd(gen);
    const int T = trial == 0 ? 4 : std::max(1, 32 / K - static_cast<int>(gen() % 3));
    const ModelParams p = random_params(K, gen, 1 + trial % 2, trial % 3 != 0);
    const MatrixXd y = random_series(T, K, gen);
    const double oracle = testing::gaussian_logpdf(testing::stack_rows(y), testing::joint_covariance(p, T));
    const double ll = filter(build_state_space(p), y).log_likelihood;
    CHECK(std::abs(ll - oracle) < 1e-8);
  }
}

TEST_CASE("zero loading likelihood is a product of noise densities") {
  std::mt19937_64 gen(4);
  ModelParams p = random_params(3, gen);
  p.loading = FullLoading{MatrixXd::Zero(3, 3)};
  const MatrixXd y = random_series(7, 3, gen);
  double expected = 0.0;
  for (int t = 0; t < 7; ++t) expected += testing::gaussian_logpdf(y.row(t).transpose(), p.gamma());
  CHECK(filter(build_state_space(p), y).log_likelihood == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("filter covariances do not depend on the data") {
  std::mt19937_64 gen(5);
  const ModelParams p = random_params(3, gen);
  const StateSpaceForm s = build_state_space(p);
  const FilterResult a = filter(s, random_series(10, 3, gen));
  const FilterResult b = filter(s, random_series(10, 3, gen));
  for (int t = 0; t < 10; ++t) {
    CHECK(a.filtered_cov[t] == b.filtered_cov[t]);
    CHECK(a.predicted_cov[t] == b.predicted_cov[t]);
    CHECK(psd(a.filtered_cov[t], 1e-12));
    CHECK((a.filtered_cov[t] - a.filtered_cov[t].transpose()).norm() == 0.0);
  }
}

TEST_CASE("smoother matches direct conditioning") {
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 10; ++trial) {
    const int T = trial == 0 ? 3 : 2 + trial;
    const ModelParams p = random_params(2, gen, 1 + trial % 2);
    const MatrixXd y = random_series(T, 2, gen);
    const SmootherResult s = smooth(build_state_space(p), y);
    const testing::Posterior o = testing::condition_on_series(p, y);
    for (int t = 0; t < T; ++t) {
      CHECK((s.mean[t] - o.mean[t]).cwiseAbs().maxCoeff() < 1e-8);
      CHECK((s.cov[t] - o.cov[t]).cwiseAbs().maxCoeff() < 1e-8);
      if (t > 0) CHECK((s.lag_one_cov[t] - o.lag_one[t]).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}

TEST_CASE("smoother boundary and variance reduction") {
  std::mt19937_64 gen(7);
  const ModelParams p = random_params(3, gen);
  const StateSpaceForm s = build_state_space(p);
  const MatrixXd y = random_series(25, 3, gen);
  const FilterResult f = filter(s, y);
  const SmootherResult sm = smooth(s, y);
  CHECK(sm.mean.back() == f.filtered_mean.back());
  CHECK(sm.cov.back() == f.filtered_cov.back());
  for (int t = 0; t < 25; ++t) CHECK(psd(f.filtered_cov[t] - sm.cov[t], 1e-12));
  CHECK(sm.log_likelihood == f.log_likelihood);
}

TEST_CASE("singular innovation covariance names the time index") {
  std::mt19937_64 gen(8);
  ModelParams p = random_params(2, gen);
  StateSpaceForm s = build_state_space(p);
  s.Rm = MatrixXd::Zero(2, 2);
  s.H = MatrixXd::Zero(2, 3);
  try {
    filter(s, random_series(3, 2, gen));
    FAIL("expected an exception");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("time index 0") != std::string::npos);
  }
}

TEST_CASE("forecasts") {
  std::mt19937_64 gen(9);
  ModelParams p = random_params(3, gen);
  const MatrixXd y = random_series(12, 3, gen);

  ModelParams zero = p;
  zero.loading = FullLoading{MatrixXd::Zero(3, 3)};
  for (const auto& step : forecast(build_state_space(zero), y, 4)) {
    CHECK(step.mean.cwiseAbs().maxCoeff() == 0.0);
    CHECK((step.cov - zero.gamma()).cwiseAbs().maxCoeff() < 1e-14);
  }

  const auto far = forecast(build_state_space(p), y, 200);
  CHECK(far.back().mean.cwiseAbs().maxCoeff() < 1e-6);
  CHECK((far.back().cov - theoretical_cov(p, 0)[0]).cwiseAbs().maxCoeff() < 1e-6);

  // The one-step forecast equals the filter's prediction of the next step.
  MatrixXd longer(13, 3);
  longer.topRows(12) = y;
  longer.row(12).setZero();
  const MatrixXd pred = one_step_predictions(build_state_space(p), longer);
  CHECK((far.front().mean - pred.row(12).transpose()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(forecast(build_state_space(p), y, 0), ValidationError);
}

TEST_CASE("one-step forecast error is below the series variance") {
  std::mt19937_64 gen(10);
  ModelParams p = random_params(4, gen);
  p.latent = LatentSpec::ar1(0.9, std::sqrt(1 - 0.81));
  const Panel panel = simulate(p, 300, 40, 2);
  const StateSpaceForm s = build_state_space(p);
  VectorXd err = VectorXd::Zero(4), var = VectorXd::Zero(4);
  for (const auto& y : panel.replicates) {
    const MatrixXd e = y - one_step_predictions(s, y);
    err += e.colwise().squaredNorm().transpose();
    var += y.colwise().squaredNorm().transpose();
  }
  for (int k = 0; k < 4; ++k) CHECK(err(k) <= var(k));
}

TEST_CASE("likelihood invariances") {
  std::mt19937_64 gen(11);
  const ModelParams p = random_params(3, gen, 1, false);
  const Panel panel = simulate(p, 30, 4, 1);
  const double ll = log_likelihood(p, panel);
  ModelParams flipped = p;
  flipped.loading = FullLoading{-p.lambda()};
  CHECK(log_likelihood(flipped, panel) == doctest::Approx(ll).epsilon(1e-12));
  CHECK(log_likelihood(normalize(p), panel) == doctest::Approx(ll).epsilon(1e-12));

  Panel reversed = panel;
  std::reverse(reversed.replicates.begin(), reversed.replicates.end());
  CHECK(log_likelihood(p, reversed) == doctest::Approx(ll).epsilon(1e-13));

  double sum = 0.0;
  for (const auto& y : panel.replicates) sum += filter(build_state_space(p), y).log_likelihood;
  CHECK(sum == doctest::Approx(ll).epsilon(1e-13));
}
