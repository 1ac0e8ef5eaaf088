#include "windssm/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "windssm/errors.hpp"

namespace windssm {

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

namespace {

json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double as_double(const json& v, const char* what) {
  if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
  if (!v.is_number()) throw ValidationError(std::string("expected a number for ") + what);
  return v.get<double>();
}

json matrix_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(number(m(i, j)));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatrixXd matrix_from_json(const json& rows, const char* what) {
  if (!rows.is_array() || rows.empty()) throw ValidationError(std::string(what) + " must be a non-empty array of rows");
  const auto n = rows.size();
  const auto m = rows[0].is_array() ? rows[0].size() : 0;
  MatrixXd out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < n; ++i) {
    if (!rows[i].is_array() || rows[i].size() != m)
      throw ValidationError(std::string(what) + " has ragged rows");
    for (std::size_t j = 0; j < m; ++j)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = as_double(rows[i][j], what);
  }
  return out;
}

json vector_json(const VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(number(v(i)));
  return a;
}

VectorXd vector_from_json(const json& a, const char* what) {
  if (!a.is_array()) throw ValidationError(std::string(what) + " must be an array");
  VectorXd v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = as_double(a[i], what);
  return v;
}

const json& field(const json& doc, const char* key) {
  if (!doc.is_object() || !doc.contains(key))
    throw ValidationError(std::string("missing field '") + key + "'");
  return doc.at(key);
}

std::string kernel_tag(KernelKind kind) { return kind == KernelKind::Gauss ? "gauss" : "wave"; }

}  // namespace

json to_json(const ModelParams& p) {
  json doc;
  json latent{{"order", p.latent.order}, {"sigma", number(p.latent.sigma)}};
  latent["rho"] = p.latent.order == 1 ? json::array({number(p.latent.rho1)})
                                      : json::array({number(p.latent.rho1), number(p.latent.rho2)});
  doc["latent"] = latent;

  if (const auto* full = std::get_if<FullLoading>(&p.loading)) {
    doc["loading"] = {{"variant", "full"}, {"matrix", matrix_json(full->matrix)}};
  } else {
    const auto& poly = std::get<PolynomialLoading>(p.loading);
    doc["loading"] = {{"variant", "polynomial"},
                      {"longitude", "centered"},
                      {"intercept", matrix_json(poly.intercept)},
                      {"linear", vector_json(poly.linear)},
                      {"quadratic", vector_json(poly.quadratic)}};
  }

  if (const auto* full = std::get_if<FullNoise>(&p.noise)) {
    doc["noise"] = {{"variant", "full"}, {"matrix", matrix_json(full->matrix)}};
  } else {
    const auto& k = std::get<KernelNoise>(p.noise);
    doc["noise"] = {{"variant", kernel_tag(k.kind)},
                    {"scales", vector_json(k.scales)},
                    {"range", number(k.range)},
                    {"nugget", number(k.nugget)},
                    {"theta1", number(k.anisotropy.theta1)},
                    {"theta2", number(k.anisotropy.theta2)}};
  }

  json sites = json::array();
  for (const auto& s : p.grid.sites())
    sites.push_back({{"site_id", s.id}, {"lat", s.lat}, {"lon", s.lon}});
  doc["sites"] = sites;
  return doc;
}

ModelParams params_from_json(const json& doc) {
  ModelParams p;
  const json& lat = field(doc, "latent");
  const int order = field(lat, "order").get<int>();
  const VectorXd rho = vector_from_json(field(lat, "rho"), "latent.rho");
  if (order != 1 && order != 2) throw ValidationError("latent.order must be 1 or 2");
  if (rho.size() != order) throw ValidationError("latent.rho must have one entry per lag");
  const double sigma = as_double(field(lat, "sigma"), "latent.sigma");
  p.latent = order == 1 ? LatentSpec::ar1(rho(0), sigma) : LatentSpec::ar2(rho(0), rho(1), sigma);

  std::vector<Site> sites;
  for (const auto& s : field(doc, "sites"))
    sites.push_back({field(s, "site_id").get<int>(), as_double(field(s, "lat"), "lat"),
                     as_double(field(s, "lon"), "lon")});
  p.grid = SiteGrid(std::move(sites));

  const json& loading = field(doc, "loading");
  const auto lv = field(loading, "variant").get<std::string>();
  if (lv == "full") {
    p.loading = FullLoading{matrix_from_json(field(loading, "matrix"), "loading.matrix")};
  } else if (lv == "polynomial") {
    PolynomialLoading poly;
    const MatrixXd ic = matrix_from_json(field(loading, "intercept"), "loading.intercept");
    const VectorXd li = vector_from_json(field(loading, "linear"), "loading.linear");
    const VectorXd qu = vector_from_json(field(loading, "quadratic"), "loading.quadratic");
    if (ic.rows() != 3 || ic.cols() != 3 || li.size() != 3 || qu.size() != 3)
      throw ValidationError("polynomial loading needs a 3x3 intercept and 3-vectors");
    poly.intercept = ic;
    poly.linear = li;
    poly.quadratic = qu;
    p.loading = poly;
  } else {
    throw ValidationError("unknown loading variant '" + lv + "'");
  }

  const json& noise = field(doc, "noise");
  const auto nv = field(noise, "variant").get<std::string>();
  if (nv == "full") {
    p.noise = FullNoise{matrix_from_json(field(noise, "matrix"), "noise.matrix")};
  } else if (nv == "gauss" || nv == "wave") {
    KernelNoise k;
    k.kind = nv == "gauss" ? KernelKind::Gauss : KernelKind::Wave;
    k.scales = vector_from_json(field(noise, "scales"), "noise.scales");
    k.range = as_double(field(noise, "range"), "noise.range");
    k.nugget = as_double(field(noise, "nugget"), "noise.nugget");
    k.anisotropy.theta1 = as_double(field(noise, "theta1"), "noise.theta1");
    k.anisotropy.theta2 = as_double(field(noise, "theta2"), "noise.theta2");
    p.noise = k;
  } else {
    throw ValidationError("unknown noise variant '" + nv + "'");
  }
  if (p.lambda().rows() != p.grid.size() || p.gamma().rows() != p.grid.size())
    throw ValidationError("parameter dimensions do not match the site list");
  return p;
}

json to_json(const CovSet& cov) {
  json lags = json::array();
  for (int k = 0; k <= cov.max_lag(); ++k) lags.push_back({{"lag", k}, {"matrix", matrix_json(cov[k])}});
  return {{"source", cov.source == CovSource::Empirical ? "empirical" : "theoretical"},
          {"lags", lags}};
}

CovSet covset_from_json(const json& doc) {
  CovSet cov;
  cov.source = field(doc, "source").get<std::string>() == "empirical" ? CovSource::Empirical
                                                                      : CovSource::Theoretical;
  for (const auto& entry : field(doc, "lags")) {
    if (field(entry, "lag").get<int>() != cov.max_lag() + 1)
      throw ValidationError("covariance lags must be consecutive from 0");
    cov.lags.push_back(matrix_from_json(field(entry, "matrix"), "lag matrix"));
  }
  return cov;
}

json to_json(const FitReport& r) {
  json trace = json::array();
  for (double v : r.trace) trace.push_back(number(v));
  return {{"method", to_string(r.method)},
          {"model", structure_name(r.structure)},
          {"converged", r.converged},
          {"iterations", r.iterations},
          {"log_likelihood", number(r.log_likelihood)},
          {"gmm_objective", number(r.gmm_objective)},
          {"trace", trace},
          {"message", r.message},
          {"params", to_json(r.params)},
          {"gmm_params", to_json(r.gmm_params)},
          {"initializer", to_json(r.initializer)}};
}

json to_json(const TransformSpec& spec) {
  return {{"lambda", spec.lambda}, {"site_means", vector_json(spec.site_means)}};
}

TransformSpec transform_spec_from_json(const json& doc) {
  TransformSpec spec;
  spec.lambda = as_double(field(doc, "lambda"), "lambda");
  spec.site_means = vector_from_json(field(doc, "site_means"), "site_means");
  return spec;
}

json to_json(const Evaluation& ev) {
  json reports = json::array();
  for (const auto& r : ev.reports) {
    json j{{"model", r.model},
           {"mspe", vector_json(r.mspe)},
           {"log_likelihood", number(r.log_likelihood)},
           {"n_params", r.n_params},
           {"bic", number(r.bic)},
           {"n_obs", r.n_obs},
           {"converged", r.converged}};
    if (r.n_params_override) j["n_params_override"] = *r.n_params_override;
    if (r.bic_override) j["bic_override"] = number(*r.bic_override);
    reports.push_back(std::move(j));
  }
  return {{"split", ev.split},
          {"train_replicates", ev.train_replicates},
          {"validation_replicates", ev.validation_replicates},
          {"reports", reports}};
}

json to_json(const StudyResult& s) {
  json methods = json::array();
  for (const auto m : s.methods) methods.push_back(to_string(m));
  json rows = json::array();
  for (const auto& row : s.rows) {
    json cells = json::array();
    for (const auto& c : row.cells)
      cells.push_back({{"bias", {number(c.bias_min), number(c.bias_max)}},
                       {"sd", {number(c.sd_min), number(c.sd_max)}},
                       {"rmse", {number(c.rmse_min), number(c.rmse_max)}}});
    rows.push_back({{"parameter", row.parameter}, {"cells", cells}});
  }
  return {{"methods", methods},
          {"rows", rows},
          {"failures", s.failures},
          {"attempted", s.attempted},
          {"ok", s.ok}};
}

json to_json(const ValidationReport& r) {
  return {{"ok", r.ok()},
          {"stationary", r.stationary},
          {"unit_latent_variance", r.unit_latent_variance},
          {"loading_independent", r.loading_independent},
          {"noise_positive_definite", r.noise_positive_definite},
          {"latent_variance", number(r.latent_variance)},
          {"loading_singular_ratio", number(r.loading_singular_ratio)},
          {"messages", r.messages}};
}

json to_json(const DiagnosticsReport& r) {
  return {{"asymmetry", number(r.asymmetry)},
          {"rank1_ratio", number(r.rank1_ratio)},
          {"rho_hat", number(r.rho_hat)},
          {"geometric_residual", number(r.geometric_residual)}};
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& c : out) {
    const auto b = c.find_first_not_of(" \t\r");
    const auto e = c.find_last_not_of(" \t\r");
    c = b == std::string::npos ? std::string() : c.substr(b, e - b + 1);
  }
  return out;
}

std::string where(const std::string& path, long line) {
  return path + ":" + std::to_string(line) + ": ";
}

long long parse_int(const std::string& s, const std::string& path, long line) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size()) throw IoError(where(path, line) + "expected an integer, got '" + s + "'");
  return v;
}

double parse_double(const std::string& s, const std::string& path, long line) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size() || !std::isfinite(v))
    throw IoError(where(path, line) + "expected a finite number, got '" + s + "'");
  return v;
}

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  return in;
}

bool is_blank(const std::string& line) {
  return line.find_first_not_of(" \t\r") == std::string::npos;
}

}  // namespace

SiteGrid read_sites(const std::string& path) {
  std::ifstream in = open_input(path);
  std::string line;
  long n = 0;
  bool header = false;
  std::vector<Site> sites;
  while (std::getline(in, line)) {
    ++n;
    if (is_blank(line) || line[0] == '#') continue;
    const auto cells = split_csv(line);
    if (!header) {
      if (cells != std::vector<std::string>{"site_id", "lat", "lon"})
        throw IoError(where(path, n) + "expected header 'site_id,lat,lon'");
      header = true;
      continue;
    }
    if (cells.size() != 3) throw IoError(where(path, n) + "expected 3 fields");
    sites.push_back({static_cast<int>(parse_int(cells[0], path, n)), parse_double(cells[1], path, n),
                     parse_double(cells[2], path, n)});
  }
  if (!header) throw IoError(path + ": empty sites file");
  try {
    return SiteGrid(std::move(sites));
  } catch (const ValidationError& e) {
    throw IoError(path + ": " + e.what());
  }
}

void write_sites(const SiteGrid& grid, const std::string& path) {
  std::string out = "site_id,lat,lon\n";
  for (const auto& s : grid.sites())
    out += std::to_string(s.id) + "," + format_double(s.lat) + "," + format_double(s.lon) + "\n";
  write_text(path, out);
}

Panel read_panel(const std::string& panel_path, const std::string& sites_path,
                 Stage default_stage) {
  Panel panel;
  panel.grid = read_sites(sites_path);
  panel.stage = default_stage;
  const int K = panel.grid.size();

  std::ifstream in = open_input(panel_path);
  std::string line;
  long n = 0;
  bool header = false;
  std::map<std::tuple<long long, long long, int>, double> cells;
  std::set<long long> reps, times;
  std::map<std::tuple<long long, long long, int>, long> first_line;
  while (std::getline(in, line)) {
    ++n;
    if (is_blank(line)) continue;
    if (line[0] == '#') {
      const auto pos = line.find("stage:");
      if (pos != std::string::npos && !header) {
        std::string tag = line.substr(pos + 6);
        tag.erase(0, tag.find_first_not_of(" \t"));
        tag.erase(tag.find_last_not_of(" \t\r") + 1);
        try {
          panel.stage = stage_from_string(tag);
        } catch (const ValidationError& e) {
          throw IoError(where(panel_path, n) + e.what());
        }
      }
      continue;
    }
    const auto f = split_csv(line);
    if (!header) {
      if (f != std::vector<std::string>{"replicate", "time", "site_id", "value"})
        throw IoError(where(panel_path, n) + "expected header 'replicate,time,site_id,value'");
      header = true;
      continue;
    }
    if (f.size() != 4) throw IoError(where(panel_path, n) + "expected 4 fields");
    const long long r = parse_int(f[0], panel_path, n);
    const long long t = parse_int(f[1], panel_path, n);
    const auto site = parse_int(f[2], panel_path, n);
    const double v = parse_double(f[3], panel_path, n);
    const int k = panel.grid.index_of(static_cast<int>(site));
    if (k < 0) throw IoError(where(panel_path, n) + "site_id " + f[2] + " is not in " + sites_path);
    const auto key = std::make_tuple(r, t, k);
    if (!cells.emplace(key, v).second)
      throw IoError(where(panel_path, n) + "duplicate entry for replicate " + f[0] + ", time " +
                    f[1] + ", site " + f[2] + " (first at line " +
                    std::to_string(first_line[key]) + ")");
    first_line[key] = n;
    reps.insert(r);
    times.insert(t);
  }
  if (!header) throw IoError(panel_path + ": empty panel file");
  if (cells.empty()) throw IoError(panel_path + ": no data rows");
  const auto expected = reps.size() * times.size() * static_cast<std::size_t>(K);
  if (cells.size() != expected)
    throw IoError(panel_path + ": incomplete panel, " + std::to_string(cells.size()) + " of " +
                  std::to_string(expected) + " (replicate, time, site) cells present");

  std::map<long long, Eigen::Index> time_index;
  for (const auto t : times) time_index.emplace(t, static_cast<Eigen::Index>(time_index.size()));
  std::map<long long, std::size_t> rep_index;
  for (const auto r : reps) rep_index.emplace(r, rep_index.size());
  panel.replicates.assign(reps.size(), MatrixXd(static_cast<Eigen::Index>(times.size()), K));
  for (const auto& [key, v] : cells) {
    const auto& [r, t, k] = key;
    panel.replicates[rep_index[r]](time_index[t], k) = v;
  }
  return panel;
}

void write_panel(const Panel& panel, const std::string& panel_path) {
  std::string out = "# stage: " + to_string(panel.stage) + "\nreplicate,time,site_id,value\n";
  for (int r = 0; r < panel.R(); ++r) {
    const auto& y = panel.replicates[static_cast<std::size_t>(r)];
    for (Eigen::Index t = 0; t < y.rows(); ++t)
      for (int k = 0; k < panel.K(); ++k)
        out += std::to_string(r) + "," + std::to_string(t) + "," +
               std::to_string(panel.grid[k].id) + "," + format_double(y(t, k)) + "\n";
  }
  write_text(panel_path, out);
}

json read_json(const std::string& path) {
  std::ifstream in = open_input(path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path + "'");
}

void write_json(const std::string& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

std::string directional_csv(const std::vector<DirectionalEntry>& table) {
  std::string out = "dlat,dlon,corr,from_site,to_site\n";
  for (const auto& e : table)
    out += format_double(e.dlat) + "," + format_double(e.dlon) + "," + format_double(e.corr) + "," +
           std::to_string(e.from_site) + "," + std::to_string(e.to_site) + "\n";
  return out;
}

std::string forecast_csv(const std::vector<ForecastStep>& steps, const SiteGrid& grid) {
  std::string out = "horizon,site_id,mean,var\n";
  for (std::size_t h = 0; h < steps.size(); ++h)
    for (int k = 0; k < grid.size(); ++k)
      out += std::to_string(h + 1) + "," + std::to_string(grid[k].id) + "," +
             format_double(steps[h].mean(k)) + "," + format_double(steps[h].cov(k, k)) + "\n";
  return out;
}

std::string evaluation_csv(const Evaluation& ev) {
  std::string out = "model,n_params,n_params_override,log_likelihood,bic,bic_override,mspe_min,mspe_max,mspe_mean\n";
  for (const auto& r : ev.reports) {
    out += r.model + "," + (r.model == "persistence" ? "" : std::to_string(r.n_params)) + "," +
           (r.n_params_override ? std::to_string(*r.n_params_override) : "") + "," +
           (std::isfinite(r.log_likelihood) ? format_double(r.log_likelihood) : "") + "," +
           (std::isfinite(r.bic) ? format_double(r.bic) : "") + "," +
           (r.bic_override ? format_double(*r.bic_override) : "") + "," +
           format_double(r.mspe.minCoeff()) + "," + format_double(r.mspe.maxCoeff()) + "," +
           format_double(r.mspe.mean()) + "\n";
  }
  return out;
}

std::string mspe_csv(const Evaluation& ev, const SiteGrid& grid) {
  std::string out = "site_id";
  for (const auto& r : ev.reports) out += "," + r.model;
  out += "\n";
  for (int k = 0; k < grid.size(); ++k) {
    out += std::to_string(grid[k].id);
    for (const auto& r : ev.reports) out += "," + format_double(r.mspe(k));
    out += "\n";
  }
  return out;
}

std::string study_csv(const StudyResult& s) {
  std::string out = "parameter,method,bias_min,bias_max,sd_min,sd_max,rmse_min,rmse_max\n";
  for (const auto& row : s.rows)
    for (std::size_t m = 0; m < row.cells.size(); ++m) {
      const auto& c = row.cells[m];
      out += row.parameter + "," + to_string(s.methods[m]) + "," + format_double(c.bias_min) + "," +
             format_double(c.bias_max) + "," + format_double(c.sd_min) + "," +
             format_double(c.sd_max) + "," + format_double(c.rmse_min) + "," +
             format_double(c.rmse_max) + "\n";
    }
  return out;
}

std::string covset_csv(const CovSet& cov, const SiteGrid& grid) {
  std::string out = "lag,site_i,site_j,cov\n";
  for (int k = 0; k <= cov.max_lag(); ++k)
    for (int i = 0; i < grid.size(); ++i)
      for (int j = 0; j < grid.size(); ++j)
        out += std::to_string(k) + "," + std::to_string(grid[i].id) + "," +
               std::to_string(grid[j].id) + "," + format_double(cov[k](i, j)) + "\n";
  return out;
}

}  // namespace windssm
