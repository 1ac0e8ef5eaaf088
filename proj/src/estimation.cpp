#include "windssm/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>

#include "windssm/errors.hpp"
#include "windssm/kalman.hpp"
#include "windssm/optimize.hpp"
#include "windssm/structures.hpp"

namespace windssm {

std::string to_string(Method method) { return method == Method::GMM ? "gmm" : "ml"; }

Method method_from_string(const std::string& text) {
  if (text == "gmm" || text == "GMM") return Method::GMM;
  if (text == "ml" || text == "ML") return Method::ML;
  throw ValidationError("unknown fit method '" + text + "' (expected gmm or ml)");
}

ModelStructure structure_from_name(const std::string& name) {
  if (name == "M") return {1, false, std::nullopt};
  if (name == "M2") return {2, false, std::nullopt};
  if (name == "MLambda" || name == "M_Lambda") return {1, true, std::nullopt};
  if (name == "MGamma-gauss" || name == "M_Gamma-gauss") return {1, false, KernelKind::Gauss};
  if (name == "MGamma-wave" || name == "M_Gamma-wave") return {1, false, KernelKind::Wave};
  throw ValidationError("unknown model variant '" + name +
                        "' (expected M, M2, MLambda, MGamma-gauss, MGamma-wave)");
}

std::string structure_name(const ModelStructure& s) {
  std::string name = s.latent_order == 2 ? "M2" : "M";
  if (s.polynomial_loading) name += "Lambda";
  if (s.kernel) name += *s.kernel == KernelKind::Gauss ? "Gamma-gauss" : "Gamma-wave";
  return name;
}

ModelStructure structure_of(const ModelParams& params) {
  ModelStructure s;
  s.latent_order = params.latent.order;
  s.polynomial_loading = params.has_polynomial_loading();
  if (const auto* k = std::get_if<KernelNoise>(&params.noise)) s.kernel = k->kind;
  return s;
}

int parameter_count(const ModelStructure& s, int K) {
  const int latent = s.latent_order;
  const int loading = s.polynomial_loading ? PolynomialLoading::kSize : 3 * K;
  const int noise = s.kernel ? K + 4 : K * (K + 1) / 2;
  return latent + loading + noise;
}

namespace {

constexpr int kGmmLags = 3;

// Latent part of C_k: Lambda G_k Lambda' with G_k(a, b) = gamma(|k + a - b|);
// column a of Lambda loads X_{t+1-a}.
MatrixXd latent_part(const MatrixXd& lambda, const std::vector<double>& acov, int k) {
  Eigen::Matrix3d G;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) G(a, b) = acov[static_cast<std::size_t>(std::abs(k + a - b))];
  return lambda * G * lambda.transpose();
}

LatentSpec unit_variance_latent(int order, double rho1, double rho2) {
  LatentSpec lat = order == 1 ? LatentSpec::ar1(rho1, 1.0) : LatentSpec::ar2(rho1, rho2, 1.0);
  lat.sigma = 1.0 / std::sqrt(stationary_variance(lat));
  return lat;
}

// Maps a structure's parameters to an unconstrained vector and back. The
// latent variance is pinned to one, so sigma is not a coordinate.
class Codec {
 public:
  Codec(ModelStructure structure, SiteGrid grid)
      : s_(structure), grid_(std::move(grid)), K_(grid_.size()) {
    if (s_.kernel) offsets_ = site_offsets_km(grid_);
    if (s_.polynomial_loading) design_ = polynomial_design(grid_);
  }

  int latent_size() const { return s_.latent_order; }
  int loading_size() const { return s_.polynomial_loading ? PolynomialLoading::kSize : 3 * K_; }
  int noise_size() const { return s_.kernel ? K_ + 4 : K_ * (K_ + 1) / 2; }
  int size() const { return latent_size() + loading_size() + noise_size(); }

  VectorXd pack(const ModelParams& p) const {
    VectorXd x(size());
    int o = 0;
    if (s_.latent_order == 1) {
      x(o++) = std::atanh(std::clamp(p.latent.rho1, -0.999999, 0.999999));
    } else {
      const double phi2 = p.latent.rho2;
      const double phi1 = p.latent.rho1 / (1.0 - phi2);
      x(o++) = std::atanh(std::clamp(phi1, -0.999999, 0.999999));
      x(o++) = std::atanh(std::clamp(phi2, -0.999999, 0.999999));
    }
    if (s_.polynomial_loading) {
      x.segment(o, PolynomialLoading::kSize) = std::get<PolynomialLoading>(p.loading).to_vector();
    } else {
      const MatrixXd lambda = p.lambda();
      x.segment(o, 3 * K_) = Eigen::Map<const VectorXd>(lambda.data(), 3 * K_);
    }
    o += loading_size();
    if (s_.kernel) {
      x.segment(o, K_ + 4) = kernel_to_free(std::get<KernelNoise>(p.noise));
    } else {
      Eigen::LLT<MatrixXd> llt(p.gamma());
      if (llt.info() != Eigen::Success) throw NumericalError("noise covariance is not positive definite");
      const MatrixXd L = llt.matrixL();
      for (int j = 0; j < K_; ++j)
        for (int i = j; i < K_; ++i) x(o++) = i == j ? std::log(L(i, i)) : L(i, j);
    }
    return x;
  }

  LatentSpec latent(const VectorXd& x) const {
    if (s_.latent_order == 1) return unit_variance_latent(1, std::tanh(x(0)), 0.0);
    const double phi1 = std::tanh(x(0)), phi2 = std::tanh(x(1));
    return unit_variance_latent(2, phi1 * (1.0 - phi2), phi2);
  }

  MatrixXd lambda(const VectorXd& x) const {
    const VectorXd seg = x.segment(latent_size(), loading_size());
    if (s_.polynomial_loading) {
      const PolynomialLoading beta = PolynomialLoading::from_vector(seg);
      Eigen::Matrix<double, 5, 3> b;
      b.topRows<3>() = beta.intercept;
      b.row(3) = beta.linear.transpose();
      b.row(4) = beta.quadratic.transpose();
      return design_ * b;
    }
    return Eigen::Map<const MatrixXd>(seg.data(), K_, 3);
  }

  MatrixXd gamma(const VectorXd& x) const {
    const int o = latent_size() + loading_size();
    if (s_.kernel) {
      return realize_kernel_noise(kernel_from_free(*s_.kernel, x.segment(o, K_ + 4)), offsets_);
    }
    MatrixXd L = MatrixXd::Zero(K_, K_);
    int idx = o;
    for (int j = 0; j < K_; ++j)
      for (int i = j; i < K_; ++i) {
        L(i, j) = i == j ? std::exp(x(idx)) : x(idx);
        ++idx;
      }
    return L * L.transpose();
  }

  ModelParams unpack(const VectorXd& x) const {
    ModelParams p;
    p.grid = grid_;
    p.latent = latent(x);
    const VectorXd seg = x.segment(latent_size(), loading_size());
    if (s_.polynomial_loading)
      p.loading = PolynomialLoading::from_vector(seg);
    else
      p.loading = FullLoading{Eigen::Map<const MatrixXd>(seg.data(), K_, 3)};
    if (s_.kernel)
      p.noise = kernel_from_free(*s_.kernel, x.segment(latent_size() + loading_size(), K_ + 4));
    else
      p.noise = FullNoise{gamma(x)};
    return p;
  }

  /// Stacked vec(C_hat_k - C_k(x)) for k = 0..3.
  VectorXd moment_residuals(const VectorXd& x, const CovSet& emp) const {
    const LatentSpec lat = latent(x);
    const auto acov = latent_autocovariance(lat, kGmmLags + 2);
    const MatrixXd lam = lambda(x);
    VectorXd r((kGmmLags + 1) * K_ * K_);
    for (int k = 0; k <= kGmmLags; ++k) {
      MatrixXd diff = emp[k] - latent_part(lam, acov, k);
      if (k == 0) diff -= gamma(x);
      r.segment(k * K_ * K_, K_ * K_) = Eigen::Map<const VectorXd>(diff.data(), K_ * K_);
    }
    return r;
  }

 private:
  ModelStructure s_;
  SiteGrid grid_;
  int K_;
  SiteOffsets offsets_;
  MatrixXd design_;
};

ModelParams finalize(const ModelParams& p) { return canonical_sign(normalize(p)); }

// Symmetric part of g with eigenvalues raised to 1e-8 trace(ref) / K.
MatrixXd clip_eigenvalues(const MatrixXd& g, const MatrixXd& ref) {
  const MatrixXd sym = 0.5 * (g + g.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(sym);
  const double floor =
      1e-8 * std::max(std::abs(ref.trace()), 1e-300) / static_cast<double>(g.rows());
  const VectorXd clipped = eig.eigenvalues().cwiseMax(floor);
  MatrixXd out = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

}  // namespace

double gmm_objective(const ModelParams& params, const CovSet& empirical) {
  if (empirical.max_lag() < kGmmLags) throw ValidationError("GMM objective needs lags 0..3");
  const CovSet model = theoretical_cov(params, kGmmLags);
  double total = 0.0;
  for (int k = 0; k <= kGmmLags; ++k) total += (empirical[k] - model[k]).squaredNorm();
  return total;
}

double init_rho(const CovSet& cov) {
  if (cov.max_lag() < 3) throw ValidationError("init_rho needs lags up to 3");
  const MatrixXd& c2 = cov[2];
  const MatrixXd& c3 = cov[3];
  const double cutoff = 1e-6 * c2.cwiseAbs().maxCoeff();
  double sum = 0.0;
  int count = 0;
  for (Eigen::Index i = 0; i < c2.rows(); ++i)
    for (Eigen::Index j = 0; j < c2.cols(); ++j)
      if (std::abs(c2(i, j)) >= cutoff && c2(i, j) != 0.0) {
        sum += c3(i, j) / c2(i, j);
        ++count;
      }
  if (count == 0) throw ValidationError("init_rho: every lag-2 covariance entry is negligible");
  return std::clamp(sum / count, -0.999, 0.999);
}

MatrixXd init_lambda(const CovSet& cov, double rho0, std::uint64_t seed, int restarts) {
  if (cov.max_lag() < 2) throw ValidationError("init_lambda needs lags up to 2");
  const auto K = cov[0].rows();
  const auto acov = latent_autocovariance(unit_variance_latent(1, rho0, 0.0), 4);
  auto residuals = [&](const VectorXd& x) -> VectorXd {
    const Eigen::Map<const MatrixXd> lam(x.data(), K, 3);
    VectorXd r(2 * K * K);
    for (int k = 1; k <= 2; ++k) {
      const MatrixXd diff = cov[k] - latent_part(lam, acov, k);
      r.segment((k - 1) * K * K, K * K) = Eigen::Map<const VectorXd>(diff.data(), K * K);
    }
    return r;
  };

  const double scale = std::sqrt(std::max(cov[0].trace() / static_cast<double>(K), 1e-12) / 3.0);
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  VectorXd best_x;
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(restarts, 1); ++r) {
    VectorXd x0(3 * K);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0(i) = scale * normal(gen);
    const OptimResult res = minimize_least_squares(residuals, x0);
    if (std::isfinite(res.value) && res.value < best) {
      best = res.value;
      best_x = res.x;
    }
  }
  if (!std::isfinite(best)) throw NumericalError("init_lambda: optimizer failed on every restart");
  // The origin is a stationary point; never return something worse.
  if (residuals(VectorXd::Zero(3 * K)).squaredNorm() <= best) return MatrixXd::Zero(K, 3);
  return Eigen::Map<const MatrixXd>(best_x.data(), K, 3);
}

MatrixXd init_gamma(const CovSet& cov, double rho0, const MatrixXd& lambda0) {
  const auto acov = latent_autocovariance(unit_variance_latent(1, rho0, 0.0), 2);
  return clip_eigenvalues(cov[0] - latent_part(lambda0, acov, 0), cov[0]);
}

ModelParams initial_params(const CovSet& cov, const SiteGrid& grid,
                           const ModelStructure& structure, std::uint64_t seed, int restarts) {
  const double rho0 = init_rho(cov);
  const MatrixXd lambda0 = init_lambda(cov, rho0, seed, restarts);

  ModelParams p;
  p.grid = grid;
  p.latent = structure.latent_order == 1 ? unit_variance_latent(1, rho0, 0.0)
                                         : unit_variance_latent(2, rho0, 0.0);
  MatrixXd lambda_used = lambda0;
  if (structure.polynomial_loading) {
    const PolynomialLoading beta = fit_polynomial_loading(lambda0, grid);
    p.loading = beta;
    lambda_used = lambda_polynomial(beta, grid);
  } else {
    p.loading = FullLoading{lambda0};
  }
  const MatrixXd gamma0 = init_gamma(cov, rho0, lambda_used);
  if (structure.kernel) {
    KernelNoise k = fit_kernel_noise(gamma0, grid, *structure.kernel, seed).noise;
    // A least-squares fit to a poorly matching target can collapse a scale
    // or the nugget; keep the starting point well conditioned.
    const double typical = std::sqrt(std::max(gamma0.trace(), 1e-300) / gamma0.rows());
    k.nugget = std::max(k.nugget, 1e-3);
    k.scales = k.scales.cwiseMax(0.1 * typical / std::sqrt(1.0 + k.nugget));
    p.noise = k;
  } else
    p.noise = FullNoise{gamma0};
  return p;
}

FitReport gmm_fit(const Panel& panel, const ModelStructure& structure, const FitOptions& opts) {
  panel.check(5);
  const CovSet emp = empirical_cov(panel, kGmmLags);
  const Codec codec(structure, panel.grid);
  const ModelParams init = initial_params(emp, panel.grid, structure, opts.seed, opts.restarts);

  auto residuals = [&](const VectorXd& x) { return codec.moment_residuals(x, emp); };
  LeastSquaresOptions lsq;
  lsq.max_evaluations = opts.optimizer_budget;

  const VectorXd x_init = codec.pack(init);
  OptimResult best = minimize_least_squares(residuals, x_init, lsq);
  std::mt19937_64 gen(opts.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal;
  for (int r = 1; r < opts.restarts; ++r) {
    VectorXd x0 = x_init;
    for (Eigen::Index i = 0; i < x0.size(); ++i)
      x0(i) += 0.1 * std::max(std::abs(x0(i)), 0.1) * normal(gen);
    OptimResult res = minimize_least_squares(residuals, x0, lsq);
    if (res.value < best.value) best = std::move(res);
  }

  FitReport rep;
  rep.method = Method::GMM;
  rep.structure = structure;
  rep.initializer = init;
  const double init_objective = residuals(x_init).squaredNorm();
  if (best.value > init_objective) {
    // Perturbed restarts can only win; keep the initializer otherwise.
    best.x = x_init;
    best.value = init_objective;
  }
  rep.params = finalize(codec.unpack(best.x));
  // The moment fit may drive a free noise covariance to the edge of the
  // cone; lift it back so the likelihood exists.
  if (auto* full = std::get_if<FullNoise>(&rep.params.noise))
    full->matrix = clip_eigenvalues(full->matrix, emp[0]);
  rep.gmm_params = rep.params;
  rep.trace = best.trace;
  rep.converged = best.converged;
  rep.iterations = best.iterations;
  rep.gmm_objective = best.value;
  try {
    rep.log_likelihood = log_likelihood(rep.params, panel);
  } catch (const Error& e) {
    rep.log_likelihood = -std::numeric_limits<double>::infinity();
    rep.message = e.what();
  }
  return rep;
}

namespace {

// Smoothed sufficient statistics pooled over replicates.
struct SufficientStats {
  Eigen::Matrix3d Szz = Eigen::Matrix3d::Zero();  // sum_t E[Z_t Z_t']
  MatrixXd Syz;                                   // sum_t y_t E[Z_t]'
  MatrixXd Syy;                                   // sum_t y_t y_t'
  Eigen::Matrix3d E0 = Eigen::Matrix3d::Zero();   // sum_r E[Z_0 Z_0']
  double N = 0.0;                                 // R * T
  int R = 0;
  int T = 0;
  double log_likelihood = 0.0;
};

SufficientStats e_step(const ModelParams& params, const Panel& panel) {
  panel.check(2);
  const StateSpaceForm ssm = build_state_space(params);
  const int T = panel.T(), K = panel.K();
  const CovariancePass cov = covariance_pass(ssm, T, true);

  SufficientStats st;
  st.R = panel.R();
  st.T = T;
  st.N = static_cast<double>(st.R) * T;
  st.Syz = MatrixXd::Zero(K, 3);
  st.Syy = MatrixXd::Zero(K, K);
  Eigen::Matrix3d sum_cov = Eigen::Matrix3d::Zero();
  for (const auto& P : cov.smoothed_cov) sum_cov += P;

  double ll = 0.0, comp = 0.0;
  for (const auto& y : panel.replicates) {
    const MeanPass m = mean_pass(ssm, cov, y, true);
    MatrixXd Z(T, 3);
    for (int t = 0; t < T; ++t) Z.row(t) = m.smoothed_mean[static_cast<std::size_t>(t)].transpose();
    st.Szz.noalias() += Z.transpose() * Z;
    st.Syz.noalias() += y.transpose() * Z;
    st.Syy.noalias() += y.transpose() * y;
    st.E0 += m.smoothed_mean[0] * m.smoothed_mean[0].transpose();
    // Neumaier summation of per-replicate likelihoods.
    const double v = m.log_likelihood;
    const double t = ll + v;
    comp += std::abs(ll) >= std::abs(v) ? (ll - t) + v : (v - t) + ll;
    ll = t;
  }
  st.Szz += st.R * sum_cov;
  st.E0 += st.R * cov.smoothed_cov[0];
  st.Szz = 0.5 * (st.Szz + st.Szz.transpose());
  st.Syy = 0.5 * (st.Syy + st.Syy.transpose());
  st.log_likelihood = ll + comp;
  return st;
}

// Expected complete-data log-density of the latent chain X_{-1}..X_T
// (constants dropped), stationary start included.
double latent_q(const LatentSpec& lat, const SufficientStats& st) {
  const double s2 = lat.sigma * lat.sigma;
  const double n_total = static_cast<double>(st.R) * (st.T + 2);
  const Eigen::Matrix3d& S = st.Szz;
  const Eigen::Matrix3d& E = st.E0;
  if (lat.order == 1) {
    const double rho = lat.rho1;
    const double a = E(1, 1) + S(0, 0), b = E(1, 2) + S(0, 1), c = E(2, 2) + S(1, 1);
    const double quad = (1.0 - rho * rho) * E(2, 2) + a - 2.0 * rho * b + rho * rho * c;
    return 0.5 * st.R * std::log(1.0 - rho * rho) - 0.5 * n_total * std::log(s2) -
           quad / (2.0 * s2);
  }
  const double r1 = lat.rho1, r2 = lat.rho2;
  const auto g = latent_autocovariance(LatentSpec::ar2(r1, r2, 1.0), 1);
  Eigen::Matrix2d G;
  G << g[0], g[1], g[1], g[0];
  Eigen::Matrix2d M0;
  M0 << E(2, 2), E(2, 1), E(1, 2), E(1, 1);
  const double init_quad = (G.inverse() * M0).trace();
  const double trans = S(0, 0) - 2.0 * r1 * S(0, 1) - 2.0 * r2 * S(0, 2) + r1 * r1 * S(1, 1) +
                       2.0 * r1 * r2 * S(1, 2) + r2 * r2 * S(2, 2);
  return -0.5 * st.R * std::log(G.determinant()) - 0.5 * n_total * std::log(s2) -
         (init_quad + trans) / (2.0 * s2);
}

// sigma maximizing latent_q at fixed autoregressive coefficients.
LatentSpec with_optimal_sigma(LatentSpec lat, const SufficientStats& st) {
  const double n_total = static_cast<double>(st.R) * (st.T + 2);
  // latent_q is -n/2 log s2 - c / (2 s2) + const; recover c from two evaluations.
  lat.sigma = 1.0;
  const double q1 = latent_q(lat, st);
  lat.sigma = std::sqrt(2.0);
  const double q2 = latent_q(lat, st);
  // q1 - q2 = n/2 log 2 - c/2 + c/4
  const double c = 4.0 * (0.5 * n_total * std::log(2.0) - (q1 - q2));
  lat.sigma = std::sqrt(std::max(c / n_total, 1e-300));
  return lat;
}

struct BlockUpdate {
  LatentSpec latent;
  bool improved = false;
};

BlockUpdate latent_m_step(const LatentSpec& current, const SufficientStats& st) {
  const double q_now = latent_q(current, st);
  LatentSpec cand;
  if (current.order == 1) {
    const auto profile = [&](double rho) {
      return -latent_q(with_optimal_sigma(LatentSpec::ar1(rho, 1.0), st), st);
    };
    const ScalarResult r = minimize_scalar(profile, -0.9999, 0.9999);
    cand = with_optimal_sigma(LatentSpec::ar1(r.x, 1.0), st);
  } else {
    const auto to_spec = [](const VectorXd& x) {
      const double phi1 = std::tanh(x(0)), phi2 = std::tanh(x(1));
      return LatentSpec::ar2(phi1 * (1.0 - phi2), phi2, 1.0);
    };
    const auto profile = [&](const VectorXd& x) {
      return -latent_q(with_optimal_sigma(to_spec(x), st), st);
    };
    VectorXd x0(2);
    x0 << std::atanh(std::clamp(current.rho1 / (1.0 - current.rho2), -0.9999, 0.9999)),
        std::atanh(std::clamp(current.rho2, -0.9999, 0.9999));
    SimplexOptions so;
    so.initial_step = 0.05;
    so.size_tolerance = 1e-10;
    const OptimResult r = minimize_simplex(profile, x0, so);
    cand = with_optimal_sigma(to_spec(r.x), st);
  }
  // Fall back to the sigma update alone if the profile search lost ground.
  if (latent_q(cand, st) < q_now) cand = with_optimal_sigma(current, st);
  const bool improved = latent_q(cand, st) > q_now;
  return {improved ? cand : current, improved};
}

// Expected complete-data log-density of the observations (constants dropped).
double observation_q(const MatrixXd& lambda, const MatrixXd& gamma, const SufficientStats& st) {
  Eigen::LLT<MatrixXd> llt(gamma);
  if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
  const MatrixXd W = st.Syy - lambda * st.Syz.transpose() - st.Syz * lambda.transpose() +
                     lambda * st.Szz * lambda.transpose();
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * st.N * logdet - 0.5 * llt.solve(W).trace();
}

MatrixXd ols_loading(const SufficientStats& st) {
  return st.Szz.ldlt().solve(st.Syz.transpose()).transpose();
}

MatrixXd residual_moment(const MatrixXd& lambda, const SufficientStats& st) {
  MatrixXd W = st.Syy - lambda * st.Syz.transpose() - st.Syz * lambda.transpose() +
               lambda * st.Szz * lambda.transpose();
  return 0.5 * (W + W.transpose());
}

PolynomialLoading gls_polynomial_loading(const SiteGrid& grid, const MatrixXd& gamma,
                                         const SufficientStats& st) {
  const auto basis = polynomial_basis(grid);
  constexpr int n = PolynomialLoading::kSize;
  const Eigen::LLT<MatrixXd> llt(gamma);
  std::array<MatrixXd, n> ginv_basis;
  for (int j = 0; j < n; ++j)
    ginv_basis[static_cast<std::size_t>(j)] = llt.solve(basis[static_cast<std::size_t>(j)]);
  Eigen::Matrix<double, n, n> M;
  Eigen::Matrix<double, n, 1> b;
  for (int j = 0; j < n; ++j) {
    const auto uj = static_cast<std::size_t>(j);
    // tr(G^-1 E_k Szz E_j') and tr(G^-1 Syz E_j')
    b(j) = (ginv_basis[uj].transpose() * st.Syz).trace();
    for (int k = 0; k < n; ++k) {
      const auto uk = static_cast<std::size_t>(k);
      M(j, k) = (basis[uj].transpose() * ginv_basis[uk] * st.Szz).trace();
    }
  }
  M = 0.5 * (M + M.transpose());
  const VectorXd beta = M.colPivHouseholderQr().solve(b);
  return PolynomialLoading::from_vector(beta);
}

// Zero loading is a saddle the E-step cannot leave: E[Z | Y] vanishes,
// so the loading update is zero again. Reseed it from the moment
// initializer and keep the candidate only if the likelihood rises.
std::optional<ModelParams> escape_zero_loading(const ModelParams& params, const Panel& panel,
                                               double ll) {
  if (params.lambda().cwiseAbs().maxCoeff() > 0.0 || panel.T() <= kGmmLags) return std::nullopt;
  std::optional<ModelParams> best;
  double best_ll = ll;
  try {
    const CovSet emp = empirical_cov(panel, kGmmLags);
    const double rho0 = init_rho(emp);
    const MatrixXd lambda0 = init_lambda(emp, rho0, 1, 3);
    if (lambda0.cwiseAbs().maxCoeff() == 0.0) return std::nullopt;
    ModelParams cand = params;
    MatrixXd lambda_used = lambda0;
    if (params.has_polynomial_loading()) {
      const PolynomialLoading beta = fit_polynomial_loading(lambda0, params.grid);
      cand.loading = beta;
      lambda_used = lambda_polynomial(beta, params.grid);
    } else {
      cand.loading = FullLoading{lambda0};
    }
    ModelParams with_noise = cand;
    const MatrixXd gamma0 = init_gamma(emp, rho0, lambda_used);
    if (const auto* kernel = std::get_if<KernelNoise>(&params.noise))
      with_noise.noise = fit_kernel_noise(gamma0, params.grid, kernel->kind).noise;
    else
      with_noise.noise = FullNoise{gamma0};
    for (const ModelParams* c : {&cand, &with_noise}) {
      const double v = log_likelihood(*c, panel);
      if (v > best_ll) {
        best_ll = v;
        best = finalize(*c);
      }
    }
  } catch (const Error&) {
    return std::nullopt;
  }
  return best;
}

}  // namespace

StepResult em_step(const ModelParams& params, const Panel& panel) {
  if (params.has_polynomial_loading() || params.has_kernel_noise())
    throw ValidationError("em_step needs unstructured loading and noise; use gem_step");
  const SufficientStats st = e_step(params, panel);
  if (auto moved = escape_zero_loading(params, panel, st.log_likelihood))
    return {*moved, st.log_likelihood, false};

  ModelParams next = params;
  next.latent = latent_m_step(params.latent, st).latent;
  const MatrixXd lambda = ols_loading(st);
  const MatrixXd gamma = residual_moment(lambda, st) / st.N;
  if (Eigen::LLT<MatrixXd>(gamma).info() != Eigen::Success)
    throw NumericalError("em_step: updated noise covariance is not positive definite");
  next.loading = FullLoading{lambda};
  next.noise = FullNoise{gamma};
  return {finalize(next), st.log_likelihood, false};
}

StepResult gem_step(const ModelParams& params, const Panel& panel) {
  const SufficientStats st = e_step(params, panel);
  if (auto moved = escape_zero_loading(params, panel, st.log_likelihood))
    return {*moved, st.log_likelihood, false};
  ModelParams next = params;
  bool improved = false;

  // Loading block at the current noise covariance.
  const MatrixXd gamma_now = params.gamma();
  const MatrixXd lambda_now = params.lambda();
  const double q_lambda_before = observation_q(lambda_now, gamma_now, st);
  if (params.has_polynomial_loading()) {
    const PolynomialLoading beta = gls_polynomial_loading(params.grid, gamma_now, st);
    const MatrixXd cand = lambda_polynomial(beta, params.grid);
    if (observation_q(cand, gamma_now, st) > q_lambda_before) {
      next.loading = beta;
      improved = true;
    }
  } else {
    const MatrixXd cand = ols_loading(st);
    if (observation_q(cand, gamma_now, st) > q_lambda_before) {
      next.loading = FullLoading{cand};
      improved = true;
    }
  }

  // Noise block at the updated loading.
  const MatrixXd lambda = next.lambda();
  const double q_gamma_before = observation_q(lambda, gamma_now, st);
  const MatrixXd W = residual_moment(lambda, st);
  if (const auto* kernel = std::get_if<KernelNoise>(&params.noise)) {
    const SiteOffsets off = site_offsets_km(params.grid);
    const KernelKind kind = kernel->kind;
    const auto neg_q = [&](const VectorXd& free) {
      constexpr double inf = std::numeric_limits<double>::infinity();
      if (free.cwiseAbs().maxCoeff() > 50.0) return inf;
      const Eigen::LLT<MatrixXd> llt(realize_kernel_noise(kernel_from_free(kind, free), off));
      if (llt.info() != Eigen::Success) return inf;
      // Near-singular noise makes Q meaningless in floating point.
      const VectorXd d = llt.matrixLLT().diagonal();
      if (d.minCoeff() < 1e-6 * d.maxCoeff()) return inf;
      const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
      return 0.5 * st.N * logdet + 0.5 * llt.solve(W).trace();
    };
    SimplexOptions so;
    so.initial_step = 0.1;
    so.size_tolerance = 1e-11;
    so.max_iterations = 20000;
    OptimResult r = minimize_simplex(neg_q, kernel_to_free(*kernel), so);
    // A restart from the best point refreshes a collapsed simplex.
    r = minimize_simplex(neg_q, r.x, so);
    const KernelNoise cand = kernel_from_free(kind, r.x);
    if (-r.value > q_gamma_before) {
      next.noise = cand;
      improved = true;
    }
  } else {
    const MatrixXd cand = W / st.N;
    if (observation_q(lambda, cand, st) > q_gamma_before) {
      next.noise = FullNoise{cand};
      improved = true;
    }
  }

  const BlockUpdate lat = latent_m_step(params.latent, st);
  if (lat.improved) {
    next.latent = lat.latent;
    improved = true;
  }
  if (!improved) return {params, st.log_likelihood, true};
  return {finalize(next), st.log_likelihood, false};
}

FitReport ml_refine(const ModelParams& start, const Panel& panel, const FitOptions& opts) {
  FitReport rep;
  rep.method = Method::ML;
  rep.structure = structure_of(start);
  rep.initializer = start;
  const bool generalized = rep.structure.is_reduced();

  ModelParams cur = finalize(start);
  double prev = std::numeric_limits<double>::quiet_NaN();
  int it = 0;
  for (; it < opts.max_iterations; ++it) {
    StepResult step;
    try {
      step = generalized ? gem_step(cur, panel) : em_step(cur, panel);
    } catch (const NumericalError& e) {
      rep.message = e.what();
      break;
    }
    rep.trace.push_back(step.log_likelihood);
    const bool small_change =
        std::isfinite(prev) &&
        std::abs(step.log_likelihood - prev) <= opts.tolerance * std::abs(prev);
    prev = step.log_likelihood;
    cur = step.params;
    if (step.stalled || small_change) {
      rep.converged = true;
      ++it;
      break;
    }
  }
  rep.iterations = it;
  rep.params = cur;
  rep.log_likelihood = log_likelihood(cur, panel);
  rep.trace.push_back(rep.log_likelihood);
  return rep;
}

FitReport ml_fit(const Panel& panel, const ModelStructure& structure, const FitOptions& opts) {
  const FitReport gmm = gmm_fit(panel, structure, opts);
  FitReport rep = ml_refine(gmm.params, panel, opts);
  rep.structure = structure;
  rep.initializer = gmm.initializer;
  rep.gmm_params = gmm.params;
  rep.gmm_objective = gmm.gmm_objective;
  return rep;
}

FitReport fit(const Panel& panel, const ModelStructure& structure, const FitOptions& opts) {
  return opts.method == Method::GMM ? gmm_fit(panel, structure, opts)
                                    : ml_fit(panel, structure, opts);
}

}  // namespace windssm
