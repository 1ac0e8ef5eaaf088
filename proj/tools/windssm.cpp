// windssm command-line front end.

#include <charconv>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "windssm/covariance.hpp"
#include "windssm/errors.hpp"
#include "windssm/estimation.hpp"
#include "windssm/evaluation.hpp"
#include "windssm/io.hpp"
#include "windssm/kalman.hpp"
#include "windssm/optimize.hpp"
#include "windssm/preprocess.hpp"

namespace fs = std::filesystem;
using namespace windssm;

namespace {

constexpr const char* kVersion = "1.0.0";

// Output files of one run; removed again unless the run commits.
class Outputs {
 public:
  explicit Outputs(const std::string& dir) : dir_(dir) {
    std::error_code ec;
    if (!fs::exists(dir_)) {
      if (!fs::create_directories(dir_, ec) || ec) throw IoError("cannot create '" + dir + "'");
      created_dir_ = true;
    } else if (!fs::is_directory(dir_)) {
      throw IoError("'" + dir + "' is not a directory");
    }
  }
  Outputs(const Outputs&) = delete;
  Outputs& operator=(const Outputs&) = delete;
  ~Outputs() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& f : files_)
      if (fs::is_regular_file(f, ec)) fs::remove(f, ec);
    if (created_dir_ && fs::is_empty(dir_, ec)) fs::remove(dir_, ec);
  }

  std::string path(const std::string& name) {
    const fs::path p = dir_ / name;
    files_.push_back(p);
    return p.string();
  }
  void commit() { committed_ = true; }

 private:
  fs::path dir_;
  std::vector<fs::path> files_;
  bool created_dir_ = false;
  bool committed_ = false;
};

struct Common {
  std::string out = "out";
  std::uint64_t seed = 1;
  int threads = std::max(1u, std::thread::hardware_concurrency());
};

struct FitFlags {
  std::string model = "M";
  std::string method = "ml";
  int max_iter = 500;
  double tol = 1e-8;
  int budget = 20000;
  int restarts = 3;

  FitOptions options(std::uint64_t seed) const {
    FitOptions o;
    o.method = method_from_string(method);
    o.max_iterations = max_iter;
    o.tolerance = tol;
    o.optimizer_budget = budget;
    o.restarts = restarts;
    o.seed = seed;
    if (!(o.tolerance > 0.0)) throw ValidationError("--tol must be positive");
    if (o.max_iterations < 1) throw ValidationError("--max-iter must be at least 1");
    if (o.restarts < 1) throw ValidationError("--restarts must be at least 1");
    return o;
  }
};

void add_fit_flags(CLI::App* cmd, FitFlags& f) {
  cmd->add_option("--model", f.model, "M, M2, MLambda, MGamma-gauss or MGamma-wave");
  cmd->add_option("--method", f.method, "gmm or ml")->check(CLI::IsMember({"gmm", "ml"}));
  cmd->add_option("--max-iter", f.max_iter, "EM iteration cap");
  cmd->add_option("--tol", f.tol, "relative log-likelihood tolerance");
  cmd->add_option("--budget", f.budget, "evaluation budget of inner numerical searches");
  cmd->add_option("--restarts", f.restarts, "random restarts of the moment fits");
}

json fit_flags_json(const FitFlags& f) {
  return {{"model", f.model}, {"method", f.method}, {"max_iter", f.max_iter},
          {"tol", f.tol},     {"budget", f.budget}, {"restarts", f.restarts}};
}

void write_manifest(Outputs& out, const std::string& command, const std::vector<std::string>& argv,
                    const Common& common, json config, double seconds) {
  json versions{{"windssm", kVersion}};
  for (const auto& [name, v] : backend_versions()) versions[name] = v;
  json manifest{{"command", command},
                {"argv", argv},
                {"seed", common.seed},
                {"threads", common.threads},
                {"config", std::move(config)},
                {"versions", versions},
                {"wall_seconds", seconds}};
  write_json(out.path("manifest.json"), manifest);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian state-space wind-field model: simulate, fit, forecast, evaluate"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Common common;
  const auto add_common = [&](CLI::App* cmd, bool seeded) {
    cmd->add_option("--out", common.out, "output directory")->capture_default_str();
    if (seeded) cmd->add_option("--seed", common.seed, "random seed")->capture_default_str();
    cmd->add_option("--threads", common.threads, "worker threads")->check(CLI::PositiveNumber);
  };

  std::string panel_path, sites_path, params_path, transform_path;
  FitFlags fit_flags;

  auto* pre = app.add_subcommand("preprocess", "Box-Cox transform and center a raw panel");
  pre->add_option("--panel", panel_path, "raw panel CSV")->required();
  pre->add_option("--sites", sites_path, "sites CSV")->required();
  add_common(pre, false);

  auto* fitc = app.add_subcommand("fit", "estimate model parameters (GMM, then EM)");
  fitc->add_option("--panel", panel_path, "transformed-centered panel CSV")->required();
  fitc->add_option("--sites", sites_path, "sites CSV")->required();
  add_fit_flags(fitc, fit_flags);
  add_common(fitc, true);

  int sim_T = 124, sim_R = 33;
  auto* sim = app.add_subcommand("simulate", "draw panels from a parameter file");
  sim->add_option("--params", params_path, "parameter JSON")->required();
  sim->add_option("-T,--steps", sim_T, "time steps per replicate")->check(CLI::Range(4, 100000000));
  sim->add_option("-R,--replicates", sim_R, "replicates")->check(CLI::PositiveNumber);
  add_common(sim, true);

  int horizon = 1;
  std::optional<int> fc_replicate;
  auto* fc = app.add_subcommand("forecast", "h-step Kalman forecasts from the end of a series");
  fc->add_option("--params", params_path, "parameter JSON")->required();
  fc->add_option("--panel", panel_path, "transformed-centered panel CSV")->required();
  fc->add_option("--sites", sites_path, "sites CSV")->required();
  fc->add_option("--horizon", horizon, "forecast horizon")->check(CLI::PositiveNumber);
  fc->add_option("--replicate", fc_replicate, "replicate index (0-based, default last)");
  add_common(fc, false);

  std::vector<std::string> eval_models{"M", "M2"};
  std::vector<std::string> np_override;
  double train_frac = 0.76;
  auto* ev = app.add_subcommand("evaluate", "train/validation forecast comparison and BIC");
  ev->add_option("--panel", panel_path, "transformed-centered panel CSV")->required();
  ev->add_option("--sites", sites_path, "sites CSV")->required();
  ev->add_option("--transform", transform_path, "transform JSON; MSPE on the raw scale");
  ev->add_option("--models", eval_models, "model variants to fit")->delimiter(',');
  ev->add_option("--train-frac", train_frac, "fraction of replicates used for fitting");
  ev->add_option("--np-override", np_override, "alternative parameter count, NAME=COUNT")
      ->delimiter(',');
  add_fit_flags(ev, fit_flags);
  add_common(ev, true);

  int study_fits = 100;
  std::vector<std::string> study_methods{"gmm", "ml"};
  auto* st = app.add_subcommand("study", "simulation study of estimator quality");
  st->add_option("--params", params_path, "true parameter JSON")->required();
  st->add_option("--fits", study_fits, "number of simulated panels")->check(CLI::PositiveNumber);
  st->add_option("-T,--steps", sim_T, "time steps per replicate")->check(CLI::Range(5, 100000000));
  st->add_option("-R,--replicates", sim_R, "replicates")->check(CLI::PositiveNumber);
  st->add_option("--methods", study_methods, "gmm and/or ml")->delimiter(',');
  FitFlags study_flags;
  st->add_option("--max-iter", study_flags.max_iter, "EM iteration cap");
  st->add_option("--tol", study_flags.tol, "relative log-likelihood tolerance");
  st->add_option("--budget", study_flags.budget, "evaluation budget of inner numerical searches");
  st->add_option("--restarts", study_flags.restarts, "random restarts of the moment fits");
  add_common(st, true);

  int lags = 3, direction_lag = 1;
  auto* dg = app.add_subcommand("diagnose", "covariances, symmetry and directional tables");
  dg->add_option("--panel", panel_path, "transformed-centered panel CSV");
  dg->add_option("--sites", sites_path, "sites CSV");
  dg->add_option("--params", params_path, "parameter JSON (theoretical covariances)");
  dg->add_option("--lags", lags, "maximum lag")->check(CLI::Range(2, 1000));
  dg->add_option("--direction-lag", direction_lag, "lag of the directional table");
  add_common(dg, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::vector<std::string> args(argv, argv + argc);
  const auto start = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  try {
    if (pre->parsed()) {
      const Panel raw = read_panel(panel_path, sites_path, Stage::Raw);
      if (raw.stage != Stage::Raw)
        throw ValidationError("panel is tagged '" + to_string(raw.stage) +
                              "'; preprocess needs raw wind speeds");
      Outputs out(common.out);
      TransformSpec spec;
      LambdaSelection sel;
      const Panel centered = preprocess(raw, spec, &sel);
      write_panel(centered, out.path("panel.csv"));
      write_sites(centered.grid, out.path("sites.csv"));
      json tj = to_json(spec);
      tj["per_site_lambda"] = sel.per_site;
      tj["unbracketed_sites"] = sel.unbracketed_sites;
      write_json(out.path("transform.json"), tj);
      for (int k = 0; k < raw.K(); ++k)
        std::printf("site %d lambda %.4f\n", raw.grid[k].id, sel.per_site[static_cast<std::size_t>(k)]);
      std::printf("common lambda %.4f\n", sel.lambda);
      write_manifest(out, "preprocess", args, common,
                     {{"panel", panel_path}, {"sites", sites_path}}, elapsed());
      out.commit();
    } else if (fitc->parsed()) {
      const FitOptions opts = fit_flags.options(common.seed);
      const ModelStructure structure = structure_from_name(fit_flags.model);
      const Panel panel = read_panel(panel_path, sites_path);
      if (panel.stage != Stage::TransformedCentered)
        throw ValidationError("fit needs a transformed-centered panel");
      Outputs out(common.out);
      const FitReport rep = fit(panel, structure, opts);
      write_json(out.path("fit.json"), to_json(rep));
      write_json(out.path("params.json"), to_json(rep.params));
      std::printf("%s %s: log-likelihood %.6f, %s after %d iterations\n",
                  structure_name(structure).c_str(), to_string(opts.method).c_str(),
                  rep.log_likelihood, rep.converged ? "converged" : "not converged",
                  rep.iterations);
      json cfg = fit_flags_json(fit_flags);
      cfg["panel"] = panel_path;
      cfg["sites"] = sites_path;
      write_manifest(out, "fit", args, common, cfg, elapsed());
      out.commit();
    } else if (sim->parsed()) {
      const ModelParams params = params_from_json(read_json(params_path));
      Outputs out(common.out);
      const Panel panel = simulate(params, sim_T, sim_R, common.seed);
      write_panel(panel, out.path("panel.csv"));
      write_sites(panel.grid, out.path("sites.csv"));
      write_manifest(out, "simulate", args, common,
                     {{"params", params_path}, {"T", sim_T}, {"R", sim_R}}, elapsed());
      out.commit();
    } else if (fc->parsed()) {
      const ModelParams params = params_from_json(read_json(params_path));
      const Panel panel = read_panel(panel_path, sites_path);
      if (panel.stage != Stage::TransformedCentered)
        throw ValidationError("forecast needs a transformed-centered panel");
      if (!(panel.grid == params.grid)) throw ValidationError("panel sites differ from the parameter sites");
      const int r = fc_replicate.value_or(panel.R() - 1);
      if (r < 0 || r >= panel.R()) throw ValidationError("--replicate out of range");
      Outputs out(common.out);
      const StateSpaceForm ssm = build_state_space(params);
      const auto steps = forecast(ssm, panel.replicates[static_cast<std::size_t>(r)], horizon);
      write_text(out.path("forecast.csv"), forecast_csv(steps, panel.grid));
      write_manifest(out, "forecast", args, common,
                     {{"params", params_path}, {"panel", panel_path}, {"horizon", horizon},
                      {"replicate", r}},
                     elapsed());
      out.commit();
    } else if (ev->parsed()) {
      EvalConfig cfg;
      cfg.fit = fit_flags.options(common.seed);
      cfg.train_fraction = train_frac;
      for (const auto& m : eval_models) cfg.models.push_back(structure_from_name(m));
      for (const auto& item : np_override) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ValidationError("--np-override expects NAME=COUNT");
        int count = 0;
        const std::string digits = item.substr(eq + 1);
        const auto [end, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), count);
        if (ec != std::errc{} || end != digits.data() + digits.size() || count < 0)
          throw ValidationError("--np-override count must be a non-negative integer: " + item);
        cfg.n_params_override.emplace_back(item.substr(0, eq), count);
      }
      const Panel panel = read_panel(panel_path, sites_path);
      std::optional<TransformSpec> spec;
      if (!transform_path.empty()) spec = transform_spec_from_json(read_json(transform_path));
      Outputs out(common.out);
      const Evaluation result = evaluate(panel, spec ? &*spec : nullptr, cfg);
      write_json(out.path("evaluation.json"), to_json(result));
      write_text(out.path("evaluation.csv"), evaluation_csv(result));
      write_text(out.path("mspe.csv"), mspe_csv(result, panel.grid));
      for (const auto& rep : result.reports)
        std::printf("%-14s MSPE [%.3f; %.3f]  BIC %s\n", rep.model.c_str(), rep.mspe.minCoeff(),
                    rep.mspe.maxCoeff(), format_double(rep.bic).c_str());
      json cj = fit_flags_json(fit_flags);
      cj["models"] = eval_models;
      cj["train_frac"] = train_frac;
      cj["transform"] = transform_path;
      write_manifest(out, "evaluate", args, common, cj, elapsed());
      out.commit();
    } else if (st->parsed()) {
      StudyConfig cfg;
      cfg.truth = params_from_json(read_json(params_path));
      cfg.fits = study_fits;
      cfg.T = sim_T;
      cfg.R = sim_R;
      cfg.methods.clear();
      for (const auto& m : study_methods) cfg.methods.push_back(method_from_string(m));
      cfg.fit = study_flags.options(common.seed);
      cfg.seed = common.seed;
      cfg.threads = common.threads;
      Outputs out(common.out);
      const StudyResult result = simulation_study(cfg);
      write_json(out.path("study.json"), to_json(result));
      write_text(out.path("study.csv"), study_csv(result));
      const std::string table = format_study_table(result);
      write_text(out.path("study.txt"), table);
      std::cout << table;
      write_manifest(out, "study", args, common,
                     {{"params", params_path}, {"fits", study_fits}, {"T", sim_T}, {"R", sim_R},
                      {"methods", study_methods}},
                     elapsed());
      if (!result.ok) throw NumericalError("more than 20% of the study fits failed");
      out.commit();
    } else if (dg->parsed()) {
      const bool from_panel = !panel_path.empty();
      if (from_panel == !params_path.empty())
        throw ValidationError("diagnose needs either --panel/--sites or --params");
      CovSet cov;
      SiteGrid grid;
      std::optional<ModelParams> params;
      if (from_panel) {
        if (sites_path.empty()) throw ValidationError("--panel needs --sites");
        const Panel panel = read_panel(panel_path, sites_path);
        cov = empirical_cov(panel, lags);
        grid = panel.grid;
      } else {
        params = params_from_json(read_json(params_path));
        cov = theoretical_cov(*params, lags);
        grid = params->grid;
      }
      if (direction_lag < 0 || direction_lag > lags)
        throw ValidationError("--direction-lag must lie in [0, --lags]");
      Outputs out(common.out);
      const DiagnosticsReport diag = symmetry_diagnostics(cov);
      const auto table = directional_cross_correlation(cov, grid, direction_lag);
      json dj = to_json(diag);
      const DirectionalSummary lon = summarize_by_longitude(table);
      const DirectionalSummary latd = summarize_by_latitude(table);
      dj["directional_lag"] = direction_lag;
      dj["mean_corr_dlon_positive"] = lon.mean_positive;
      dj["mean_corr_dlon_negative"] = lon.mean_negative;
      dj["mean_corr_dlat_positive"] = latd.mean_positive;
      dj["mean_corr_dlat_negative"] = latd.mean_negative;
      if (params) dj["validation"] = to_json(validate(*params));
      write_json(out.path("covariances.json"), to_json(cov));
      write_text(out.path("covariances.csv"), covset_csv(cov, grid));
      write_json(out.path("diagnostics.json"), dj);
      write_text(out.path("directional.csv"), directional_csv(table));
      std::printf("asymmetry %.6g  rank1_ratio %.6g  rho_hat %.6g\n", diag.asymmetry,
                  diag.rank1_ratio, diag.rho_hat);
      std::printf("lag-%d correlation, dlon > 0: %.4f  dlon < 0: %.4f\n", direction_lag,
                  lon.mean_positive, lon.mean_negative);
      write_manifest(out, "diagnose", args, common,
                     {{"panel", panel_path}, {"params", params_path}, {"lags", lags}}, elapsed());
      out.commit();
    }
  } catch (const ValidationError& e) {
    std::cerr << "windssm: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "windssm: numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << "windssm: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "windssm: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
