#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "windssm/covariance.hpp"
#include "windssm/estimation.hpp"
#include "windssm/evaluation.hpp"
#include "windssm/kalman.hpp"
#include "windssm/model.hpp"
#include "windssm/preprocess.hpp"

namespace windssm {

using nlohmann::json;

/// 17 significant digits; "nan", "inf", "-inf" for non-finite values.
std::string format_double(double value);

json to_json(const ModelParams& params);
ModelParams params_from_json(const json& doc);

json to_json(const CovSet& cov);
CovSet covset_from_json(const json& doc);

json to_json(const FitReport& report);
json to_json(const TransformSpec& spec);
TransformSpec transform_spec_from_json(const json& doc);
json to_json(const Evaluation& evaluation);
json to_json(const StudyResult& study);
json to_json(const ValidationReport& report);
json to_json(const DiagnosticsReport& report);

SiteGrid read_sites(const std::string& path);
void write_sites(const SiteGrid& grid, const std::string& path);

/// Panel CSV `replicate,time,site_id,value`, optionally preceded by a
/// `# stage: <raw|transformed|transformed-centered>` line; `default_stage`
/// applies when that line is absent. Replicate and time labels may be any
/// integers; they are sorted, and every (replicate, time, site) cell must
/// appear exactly once. Errors carry the offending line number.
Panel read_panel(const std::string& panel_path, const std::string& sites_path,
                 Stage default_stage = Stage::TransformedCentered);
void write_panel(const Panel& panel, const std::string& panel_path);

json read_json(const std::string& path);
void write_text(const std::string& path, const std::string& text);
void write_json(const std::string& path, const json& doc);

std::string directional_csv(const std::vector<DirectionalEntry>& table);
/// `horizon,site_id,mean,var`, one block per horizon.
std::string forecast_csv(const std::vector<ForecastStep>& steps, const SiteGrid& grid);
/// One row per model: name, parameter counts, log-likelihood, BIC, MSPE range.
std::string evaluation_csv(const Evaluation& evaluation);
/// Per-site MSPE, one column per model.
std::string mspe_csv(const Evaluation& evaluation, const SiteGrid& grid);
std::string study_csv(const StudyResult& study);
std::string covset_csv(const CovSet& cov, const SiteGrid& grid);

}  // namespace windssm
