#pragma once

// Individual and bag metrics, posterior calibration coverage, paired
// signed-rank tests and deterministic report files.

#include "aggva/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace aggva {

/// NaN when the truth needed for a metric is missing; +inf when some
/// prediction gives zero likelihood (counted in n_infinite).
struct IndividualMetrics {
  double nll = 0.0;
  double mse = 0.0;
  Index n = 0;
  Index n_infinite = 0;
};

/// rate_hat: per-unit predictions. NLL needs true_y; MSE compares with
/// true_rate, or with observed y / p when the rate is unknown.
IndividualMetrics individual_metrics(const VectorXd& rate_hat, const VectorXd& p,
                                     const std::optional<VectorXd>& true_rate, const std::optional<VectorXd>& true_y,
                                     Likelihood lik, double tau = 1.0);

/// Per-individual NLL of y given the predicted mean p * rate_hat.
double individual_nll(Likelihood lik, double y, double rate_hat, double p, double tau = 1.0);

struct BagMetrics {
  double nll = 0.0;
  double mse = 0.0;
  double mse_log = 0.0;  // over bags where both y and prediction are positive
  Index n = 0;
  Index n_log_flagged = 0;
};

/// pred_total[a] = sum_i p_i rate_hat_i; w_sq_sum[a] = sum_i p_i^2 (Normal only, may be empty).
BagMetrics bag_metrics(const VectorXd& pred_total, const VectorXd& y, Likelihood lik, double tau = 1.0,
                       const VectorXd& w_sq_sum = {});

struct CoverageRow {
  double level = 0.0;
  double coverage = 0.0;
  double abs_error = 0.0;
};

std::vector<double> default_coverage_levels();

/// Fraction of truths inside the closed central interval [q((1-a)/2), q((1+a)/2)].
std::vector<CoverageRow> calibration_coverage(const std::vector<PredictiveDist>& dists, const VectorXd& truths,
                                              const std::vector<double>& levels = default_coverage_levels());

struct WilcoxonResult {
  double p_value = 1.0;
  double statistic = 0.0;  // W+: rank sum of positive differences a - b
  Index n = 0;             // nonzero differences
  bool exact = false;
  bool all_zero = false;
};

/// One-sided test of H1: a tends to be smaller than b (a - b shifted below 0).
/// Exact null distribution for n <= 20, normal approximation with continuity
/// and tie correction above. Requires at least 5 pairs.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

// ---------------------------------------------------------------------------
// Reports

struct ModelReport {
  std::string model;
  std::map<std::string, double> metrics;
  std::vector<CoverageRow> calibration;
};

struct EvalReport {
  std::vector<ModelReport> models;
  int repetition = 0;
  std::uint64_t seed = 0;
  std::string config_digest;
};

struct EvalOptions {
  Split individual_split = Split::Train;
  Split bag_split = Split::Test;
  std::vector<double> levels = default_coverage_levels();
};

ModelReport evaluate_model(const FittedModel& model, const BaggedDataset& ds, const SplitSpec& splits,
                           const EvalOptions& opts = {});

/// Keys are sorted; non-finite metrics are written as null and listed under "flags".
nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

/// 64-bit FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string digest(const nlohmann::json& j);
std::string digest(const std::string& bytes);

void emit_report(const EvalReport& r, const std::filesystem::path& path);

/// individual_id,bag_id,pred_mean,pred_m,pred_s,link
void write_predictions_csv(const BaggedDataset& ds, const std::vector<Index>& rows,
                           const std::vector<PredictiveDist>& preds, const std::filesystem::path& path);

}  // namespace aggva
