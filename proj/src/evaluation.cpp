#include "windssm/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <mutex>
#include <numbers>
#include <thread>

#include "windssm/errors.hpp"
#include "windssm/kalman.hpp"

namespace windssm {

VectorXd mspe(const std::vector<MatrixXd>& observed, const std::vector<MatrixXd>& forecasts,
              int skip) {
  if (observed.empty() || observed.size() != forecasts.size())
    throw ValidationError("mspe: observed and forecast replicate counts differ");
  const auto K = observed.front().cols();
  const auto T = observed.front().rows();
  if (T <= skip) throw ValidationError("mspe: no rows left to score");
  for (std::size_t r = 0; r < observed.size(); ++r)
    if (observed[r].rows() != T || observed[r].cols() != K || forecasts[r].rows() != T ||
        forecasts[r].cols() != K)
      throw ValidationError("mspe: observed and forecast shapes differ");

  VectorXd out(K);
  for (Eigen::Index k = 0; k < K; ++k) {
    double n = 0.0, ys = 0.0, yss = 0.0, es = 0.0, ess = 0.0;
    for (std::size_t r = 0; r < observed.size(); ++r)
      for (Eigen::Index t = skip; t < T; ++t) {
        const double y = observed[r](t, k);
        const double e = y - forecasts[r](t, k);
        n += 1.0;
        ys += y;
        yss += y * y;
        es += e;
        ess += e * e;
      }
    const double var_y = yss / n - (ys / n) * (ys / n);
    const double var_e = std::max(0.0, ess / n - (es / n) * (es / n));
    if (!(var_y > 1e-300)) throw ValidationError("mspe: site " + std::to_string(k) + " has zero variance");
    out(k) = var_e / var_y;
  }
  return out;
}

std::vector<MatrixXd> persistence_forecast(const std::vector<MatrixXd>& series) {
  std::vector<MatrixXd> out;
  out.reserve(series.size());
  for (const auto& y : series) {
    if (y.rows() < 2) throw ValidationError("persistence forecast needs at least 2 steps");
    MatrixXd f(y.rows(), y.cols());
    f.row(0) = y.row(0);
    f.bottomRows(y.rows() - 1) = y.topRows(y.rows() - 1);
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<MatrixXd> model_forecast(const ModelParams& params,
                                     const std::vector<MatrixXd>& series) {
  const StateSpaceForm ssm = build_state_space(params);
  std::vector<MatrixXd> out;
  out.reserve(series.size());
  for (const auto& y : series) out.push_back(one_step_predictions(ssm, y));
  return out;
}

Var1Model var1_fit(const Panel& panel) {
  panel.check(2);
  const int K = panel.K();
  if (static_cast<long long>(panel.R()) * (panel.T() - 1) <= K)
    throw ValidationError("VAR(1) fit needs more lagged observations than sites");
  MatrixXd sxx = MatrixXd::Zero(K, K), syx = MatrixXd::Zero(K, K);
  for (const auto& y : panel.replicates) {
    const auto n = y.rows() - 1;
    sxx.noalias() += y.topRows(n).transpose() * y.topRows(n);
    syx.noalias() += y.bottomRows(n).transpose() * y.topRows(n);
  }
  const Eigen::LDLT<MatrixXd> ldlt(sxx);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 1e-12 * sxx.trace() / K))
    throw ValidationError("VAR(1) design matrix is singular");
  Var1Model m;
  m.coef = ldlt.solve(syx.transpose()).transpose();
  MatrixXd s = MatrixXd::Zero(K, K);
  double count = 0.0;
  for (const auto& y : panel.replicates) {
    const auto n = y.rows() - 1;
    const MatrixXd e = y.bottomRows(n) - y.topRows(n) * m.coef.transpose();
    s.noalias() += e.transpose() * e;
    count += static_cast<double>(n);
  }
  m.noise = 0.5 * (s + s.transpose()) / count;
  return m;
}

std::vector<MatrixXd> var1_forecast(const Var1Model& model, const std::vector<MatrixXd>& series) {
  std::vector<MatrixXd> out;
  out.reserve(series.size());
  for (const auto& y : series) {
    MatrixXd f = MatrixXd::Zero(y.rows(), y.cols());
    if (y.rows() > 1) f.bottomRows(y.rows() - 1) = y.topRows(y.rows() - 1) * model.coef.transpose();
    out.push_back(std::move(f));
  }
  return out;
}

namespace {

double gaussian_logdensity_sum(const Eigen::LLT<MatrixXd>& llt, const MatrixXd& rows) {
  const auto K = rows.cols();
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const MatrixXd z = llt.matrixL().solve(rows.transpose());
  return -0.5 * (static_cast<double>(rows.rows()) * (K * std::log(2.0 * std::numbers::pi) + logdet) +
                 z.squaredNorm());
}

}  // namespace

double var1_log_likelihood(const Var1Model& model, const Panel& panel) {
  panel.check(1);
  const Eigen::LLT<MatrixXd> noise(model.noise);
  if (noise.info() != Eigen::Success) throw NumericalError("VAR(1) noise covariance is not positive definite");
  std::optional<Eigen::LLT<MatrixXd>> stationary;
  if (model.coef.eigenvalues().cwiseAbs().maxCoeff() < 1.0) {
    const MatrixXd P = solve_discrete_lyapunov(model.coef, model.noise);
    stationary.emplace(0.5 * (P + P.transpose()));
    if (stationary->info() != Eigen::Success) stationary.reset();
  }
  double ll = 0.0;
  for (const auto& y : panel.replicates) {
    const auto n = y.rows() - 1;
    if (stationary) ll += gaussian_logdensity_sum(*stationary, y.topRows(1));
    if (n > 0)
      ll += gaussian_logdensity_sum(noise,
                                    y.bottomRows(n) - y.topRows(n) * model.coef.transpose());
  }
  return ll;
}

int var1_parameter_count(int K) { return K * K + K * (K + 1) / 2; }

double bic(double log_likelihood, double n_params, double n_obs) {
  if (!(n_obs >= 1.0)) throw ValidationError("BIC needs at least one observation");
  return -2.0 * log_likelihood + n_params * std::log(n_obs);
}

std::pair<Panel, Panel> split_replicates(const Panel& panel, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ValidationError("train fraction must lie strictly between 0 and 1");
  const int R = panel.R();
  if (R < 2) throw ValidationError("a train/validation split needs at least 2 replicates");
  const int n_train = std::clamp(static_cast<int>(std::lround(train_fraction * R)), 1, R - 1);
  Panel train = panel, valid = panel;
  train.replicates.assign(panel.replicates.begin(), panel.replicates.begin() + n_train);
  valid.replicates.assign(panel.replicates.begin() + n_train, panel.replicates.end());
  return {std::move(train), std::move(valid)};
}

Evaluation evaluate(const Panel& centered, const TransformSpec* spec, const EvalConfig& config) {
  if (centered.stage != Stage::TransformedCentered)
    throw ValidationError("evaluation needs a transformed-centered panel");
  centered.check(5);
  auto [train, valid] = split_replicates(centered, config.train_fraction);

  Evaluation ev;
  ev.train_replicates = train.R();
  ev.validation_replicates = valid.R();
  ev.split = "replicates 1-" + std::to_string(train.R()) + " train, " +
             std::to_string(train.R() + 1) + "-" + std::to_string(centered.R()) + " validation";

  const auto raw = [&](const std::vector<MatrixXd>& data) {
    if (!spec) return data;
    std::vector<MatrixXd> out;
    out.reserve(data.size());
    for (const auto& m : data) out.push_back(to_raw_scale(*spec, m));
    return out;
  };
  const std::vector<MatrixXd> observed = raw(valid.replicates);
  const double n_obs = static_cast<double>(centered.observation_count());

  for (const auto& structure : config.models) {
    const FitReport fit_rep = fit(train, structure, config.fit);
    EvalReport rep;
    rep.model = structure_name(structure);
    rep.converged = fit_rep.converged;
    rep.mspe = mspe(observed, raw(model_forecast(fit_rep.params, valid.replicates)));
    rep.log_likelihood = log_likelihood(fit_rep.params, centered);
    rep.n_params = parameter_count(structure, centered.K());
    rep.n_obs = centered.observation_count();
    rep.bic = bic(rep.log_likelihood, rep.n_params, n_obs);
    for (const auto& [name, count] : config.n_params_override)
      if (name == rep.model) {
        rep.n_params_override = count;
        rep.bic_override = bic(rep.log_likelihood, count, n_obs);
      }
    ev.reports.push_back(std::move(rep));
  }
  if (config.var1) {
    const Var1Model var = var1_fit(train);
    EvalReport rep;
    rep.model = "VAR1";
    rep.mspe = mspe(observed, raw(var1_forecast(var, valid.replicates)));
    rep.log_likelihood = var1_log_likelihood(var, centered);
    rep.n_params = var1_parameter_count(centered.K());
    rep.n_obs = centered.observation_count();
    rep.bic = bic(rep.log_likelihood, rep.n_params, n_obs);
    ev.reports.push_back(std::move(rep));
  }
  if (config.persistence) {
    EvalReport rep;
    rep.model = "persistence";
    rep.mspe = mspe(observed, persistence_forecast(observed));
    rep.log_likelihood = std::numeric_limits<double>::quiet_NaN();
    rep.bic = std::numeric_limits<double>::quiet_NaN();
    rep.n_obs = centered.observation_count();
    ev.reports.push_back(std::move(rep));
  }
  return ev;
}

void parallel_for(int n, int threads, const std::function<void(int)>& body) {
  const int workers = std::clamp(threads, 1, std::max(n, 1));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          const std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

// Entries of one parameter group in a fixed order.
std::vector<double> group_values(const ModelParams& p, int group) {
  std::vector<double> v;
  if (group == 0) {
    v.push_back(p.latent.rho1);
    if (p.latent.order == 2) v.push_back(p.latent.rho2);
    return v;
  }
  if (group <= 3) {
    const MatrixXd lambda = p.lambda();
    const VectorXd col = lambda.col(group - 1);
    return {col.data(), col.data() + col.size()};
  }
  const MatrixXd g = p.gamma();
  for (Eigen::Index j = 0; j < g.cols(); ++j)
    for (Eigen::Index i = 0; i <= j; ++i) v.push_back(g(i, j));
  return v;
}

StudyCell summarize(const std::vector<std::vector<double>>& estimates,
                    const std::vector<double>& truth) {
  StudyCell cell;
  bool first = true;
  for (std::size_t e = 0; e < truth.size(); ++e) {
    double mean = 0.0;
    for (const auto& est : estimates) mean += est[e];
    mean /= static_cast<double>(estimates.size());
    double var = 0.0, mse = 0.0;
    for (const auto& est : estimates) {
      var += (est[e] - mean) * (est[e] - mean);
      mse += (est[e] - truth[e]) * (est[e] - truth[e]);
    }
    const double n = static_cast<double>(estimates.size());
    const double bias = mean - truth[e];
    const double sd = estimates.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    const double rmse = std::sqrt(mse / n);
    if (first) {
      cell = {bias, bias, sd, sd, rmse, rmse};
      first = false;
    } else {
      cell.bias_min = std::min(cell.bias_min, bias);
      cell.bias_max = std::max(cell.bias_max, bias);
      cell.sd_min = std::min(cell.sd_min, sd);
      cell.sd_max = std::max(cell.sd_max, sd);
      cell.rmse_min = std::min(cell.rmse_min, rmse);
      cell.rmse_max = std::max(cell.rmse_max, rmse);
    }
  }
  return cell;
}

}  // namespace

StudyResult simulation_study(const StudyConfig& config) {
  if (config.fits < 1) throw ValidationError("simulation study needs at least one fit");
  if (config.methods.empty()) throw ValidationError("simulation study needs at least one method");
  const ModelParams truth = canonical_sign(normalize(config.truth));
  const ModelStructure structure = structure_of(truth);

  StudyResult out;
  out.methods = config.methods;
  const auto n_methods = config.methods.size();
  out.estimates.assign(n_methods, std::vector<std::optional<ModelParams>>(
                                      static_cast<std::size_t>(config.fits)));

  parallel_for(config.fits, config.threads, [&](int i) {
    const std::uint64_t seed = config.seed * 1000003ULL + static_cast<std::uint64_t>(i);
    const Panel panel = simulate(truth, config.T, config.R, seed);
    FitOptions opts = config.fit;
    opts.seed = seed;
    std::optional<FitReport> gmm;
    for (std::size_t m = 0; m < n_methods; ++m) {
      try {
        opts.method = config.methods[m];
        FitReport rep;
        if (opts.method == Method::GMM) {
          rep = gmm_fit(panel, structure, opts);
          gmm = rep;
        } else if (gmm) {
          // Reuse the GMM stage already computed for this panel.
          rep = ml_refine(gmm->params, panel, opts);
        } else {
          rep = ml_fit(panel, structure, opts);
        }
        if (!rep.message.empty()) continue;
        out.estimates[m][static_cast<std::size_t>(i)] = rep.params;
      } catch (const Error&) {
      }
    }
  });

  const char* names[] = {"rho", "alpha1", "alpha0", "alpha-1", "Gamma"};
  for (int group = 0; group < 5; ++group) {
    const std::vector<double> tv = group_values(truth, group);
    std::vector<StudyRow> rows;
    if (group == 0 && truth.latent.order == 2) {
      rows.push_back({"rho1", {}});
      rows.push_back({"rho2", {}});
    } else {
      rows.push_back({names[group], {}});
    }
    for (std::size_t m = 0; m < n_methods; ++m) {
      std::vector<std::vector<double>> est;
      for (const auto& e : out.estimates[m])
        if (e) est.push_back(group_values(*e, group));
      if (est.empty()) {
        for (auto& row : rows) row.cells.push_back({});
        continue;
      }
      if (rows.size() == 1) {
        rows[0].cells.push_back(summarize(est, tv));
      } else {
        for (std::size_t j = 0; j < rows.size(); ++j) {
          std::vector<std::vector<double>> single;
          for (const auto& e : est) single.push_back({e[j]});
          rows[j].cells.push_back(summarize(single, {tv[j]}));
        }
      }
    }
    for (auto& row : rows) out.rows.push_back(std::move(row));
  }

  out.attempted = config.fits * static_cast<int>(n_methods);
  for (const auto& per_method : out.estimates)
    for (const auto& e : per_method)
      if (!e) ++out.failures;
  out.ok = out.failures * 5 <= out.attempted;
  return out;
}

std::string format_study_table(const StudyResult& study) {
  const auto range = [](double lo, double hi) {
    char buf[64];
    if (std::abs(hi - lo) < 5e-4)
      std::snprintf(buf, sizeof buf, "%.3f", lo);
    else
      std::snprintf(buf, sizeof buf, "[%.3f; %.3f]", lo, hi);
    return std::string(buf);
  };
  std::string out = "parameter";
  for (const auto m : study.methods) {
    const std::string tag = to_string(m) == "gmm" ? "GMM" : "ML";
    out += " | " + tag + " Bias | " + tag + " Sd | " + tag + " RMSE";
  }
  out += '\n';
  for (const auto& row : study.rows) {
    out += row.parameter;
    for (const auto& c : row.cells)
      out += " | " + range(c.bias_min, c.bias_max) + " | " + range(c.sd_min, c.sd_max) + " | " +
             range(c.rmse_min, c.rmse_max);
    out += '\n';
  }
  char tail[96];
  std::snprintf(tail, sizeof tail, "failed fits: %d of %d\n", study.failures, study.attempted);
  return out + tail;
}

}  // namespace windssm
