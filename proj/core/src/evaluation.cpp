#include "aggva/evaluation.hpp"

#include "aggva/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

namespace aggva {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kLog2Pi = 1.8378770664093453;

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

}  // namespace

double individual_nll(Likelihood lik, double y, double rate_hat, double p, double tau) {
  switch (lik) {
    case Likelihood::Poisson: {
      const double mu = p * rate_hat;
      if (mu <= 0.0) return y == 0.0 ? 0.0 : kInf;
      return mu - y * std::log(mu) + std::lgamma(y + 1.0);
    }
    case Likelihood::Normal: {
      const double D = tau * p * p;
      const double r = y - p * rate_hat;
      return 0.5 * r * r / D + 0.5 * (kLog2Pi + std::log(D));
    }
    case Likelihood::Exponential:
      if (rate_hat <= 0.0) return kInf;
      return std::log(rate_hat) + y / rate_hat;
  }
  return kNaN;
}

IndividualMetrics individual_metrics(const VectorXd& rate_hat, const VectorXd& p,
                                     const std::optional<VectorXd>& true_rate, const std::optional<VectorXd>& true_y,
                                     Likelihood lik, double tau) {
  const Index n = rate_hat.size();
  if (p.size() != n || (true_rate && true_rate->size() != n) || (true_y && true_y->size() != n))
    throw DimensionMismatch("individual metrics: vectors are not aligned");
  IndividualMetrics m;
  m.n = n;
  if (n == 0) {
    m.nll = m.mse = kNaN;
    return m;
  }
  if (true_y) {
    double s = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double v = individual_nll(lik, (*true_y)(i), rate_hat(i), p(i), tau);
      if (std::isinf(v)) ++m.n_infinite;
      s += v;
    }
    m.nll = s / static_cast<double>(n);
  } else {
    m.nll = kNaN;
  }
  if (true_rate) {
    m.mse = (rate_hat - *true_rate).squaredNorm() / static_cast<double>(n);
  } else if (true_y) {
    m.mse = (p.cwiseProduct(rate_hat) - *true_y).squaredNorm() / static_cast<double>(n);
  } else {
    m.mse = kNaN;
  }
  return m;
}

BagMetrics bag_metrics(const VectorXd& pred_total, const VectorXd& y, Likelihood lik, double tau,
                       const VectorXd& w_sq_sum) {
  const Index n = y.size();
  if (pred_total.size() != n) throw DimensionMismatch("bag metrics: vectors are not aligned");
  BagMetrics m;
  m.n = n;
  if (n == 0) {
    m.nll = m.mse = m.mse_log = kNaN;
    return m;
  }
  double nll = 0.0;
  double mse = 0.0;
  double mse_log = 0.0;
  Index n_log = 0;
  for (Index a = 0; a < n; ++a) {
    const double w2 = w_sq_sum.size() ? w_sq_sum(a) : 1.0;
    nll += bag_nll_from_mean(lik, y(a), pred_total(a), tau, w2);
    const double r = y(a) - pred_total(a);
    mse += r * r;
    if (y(a) > 0.0 && pred_total(a) > 0.0) {
      const double lr = std::log(y(a)) - std::log(pred_total(a));
      mse_log += lr * lr;
      ++n_log;
    } else {
      ++m.n_log_flagged;
    }
  }
  m.nll = nll / static_cast<double>(n);
  m.mse = mse / static_cast<double>(n);
  m.mse_log = n_log ? mse_log / static_cast<double>(n_log) : kNaN;
  return m;
}

std::vector<double> default_coverage_levels() { return {0.70, 0.75, 0.80, 0.85, 0.90, 0.95}; }

std::vector<CoverageRow> calibration_coverage(const std::vector<PredictiveDist>& dists, const VectorXd& truths,
                                              const std::vector<double>& levels) {
  if (static_cast<Index>(dists.size()) != truths.size())
    throw DimensionMismatch("calibration: predictions and truths are not aligned");
  std::vector<CoverageRow> out;
  for (double a : levels) {
    if (!(a > 0.0 && a < 1.0)) throw ConfigError("coverage levels must lie in (0, 1)");
    Index inside = 0;
    for (std::size_t i = 0; i < dists.size(); ++i) {
      const double lo = predictive_quantile(dists[i], 0.5 * (1.0 - a));
      const double hi = predictive_quantile(dists[i], 0.5 * (1.0 + a));
      const double t = truths(static_cast<Index>(i));
      if (t >= lo && t <= hi) ++inside;
    }
    const double cov = dists.empty() ? kNaN : static_cast<double>(inside) / static_cast<double>(dists.size());
    out.push_back({a, cov, std::abs(cov - a)});
  }
  return out;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionMismatch("wilcoxon: paired vectors differ in length");
  if (a.size() < 5) throw ConfigError("wilcoxon signed-rank test needs at least 5 pairs");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  WilcoxonResult r;
  r.n = static_cast<Index>(d.size());
  if (d.empty()) {
    r.all_zero = true;
    r.p_value = 1.0;
    r.exact = true;
    return r;
  }
  const std::size_t n = d.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  // Doubled (integer) average ranks.
  std::vector<long> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const long avg2 = static_cast<long>(i + 1 + j + 1);  // 2 * (mean of ranks i+1..j+1)
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = avg2;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  long w2 = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (d[i] > 0.0) w2 += rank2[i];
  r.statistic = 0.5 * static_cast<double>(w2);

  if (n <= 20) {
    r.exact = true;
    long total2 = 0;
    for (long v : rank2) total2 += v;
    std::vector<double> count(static_cast<std::size_t>(total2) + 1, 0.0);
    count[0] = 1.0;
    long reach = 0;
    for (long v : rank2) {
      for (long s = reach; s >= 0; --s)
        if (count[static_cast<std::size_t>(s)] != 0.0) count[static_cast<std::size_t>(s + v)] += count[static_cast<std::size_t>(s)];
      reach += v;
    }
    double le = 0.0;
    for (long s = 0; s <= w2; ++s) le += count[static_cast<std::size_t>(s)];
    r.p_value = le / std::ldexp(1.0, static_cast<int>(n));
  } else {
    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    const double z = (r.statistic - mean + 0.5) / std::sqrt(var);
    r.p_value = normal_cdf(z);
  }
  r.p_value = std::clamp(r.p_value, std::numeric_limits<double>::min(), 1.0);
  return r;
}

// ---------------------------------------------------------------------------

ModelReport evaluate_model(const FittedModel& model, const BaggedDataset& ds, const SplitSpec& splits,
                           const EvalOptions& opts) {
  ModelReport rep;
  rep.model = model.name();
  const Likelihood lik = model.likelihood();
  const double tau = model.tau();

  const auto ind_bags = splits.bags_in(ds, opts.individual_split);
  const auto rows = member_rows(ds, ind_bags);
  const auto preds = model.predict_rows(ds, rows);
  VectorXd rate_hat(static_cast<Index>(rows.size()));
  VectorXd p(static_cast<Index>(rows.size()));
  std::optional<VectorXd> tr, ty;
  if (ds.true_rate) tr = VectorXd(static_cast<Index>(rows.size()));
  if (ds.true_y) ty = VectorXd(static_cast<Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto i = static_cast<Index>(k);
    rate_hat(i) = predictive_mean(preds[k]);
    p(i) = ds.p(rows[k]);
    if (tr) (*tr)(i) = (*ds.true_rate)(rows[k]);
    if (ty) (*ty)(i) = (*ds.true_y)(rows[k]);
  }
  const IndividualMetrics im = individual_metrics(rate_hat, p, tr, ty, lik, tau);
  rep.metrics["individual_nll"] = im.nll;
  rep.metrics["individual_mse"] = im.mse;
  rep.metrics["individual_count"] = static_cast<double>(im.n);
  if (tr && !rows.empty()) rep.calibration = calibration_coverage(preds, *tr, opts.levels);

  for (Split s : kAllSplits) {
    const auto pos = splits.bags_in(ds, s);
    if (pos.empty()) continue;
    const auto brows = member_rows(ds, pos);
    const auto bp = model.predict_rows(ds, brows);
    VectorXd total(static_cast<Index>(pos.size()));
    VectorXd y(static_cast<Index>(pos.size()));
    VectorXd w2(static_cast<Index>(pos.size()));
    std::size_t k = 0;
    for (std::size_t a = 0; a < pos.size(); ++a) {
      const auto& bag = ds.bags[static_cast<std::size_t>(pos[a])];
      double t = 0.0;
      double ww = 0.0;
      for (std::size_t i = 0; i < bag.members.size(); ++i, ++k) {
        t += bp[k].weight * predictive_mean(bp[k]);
        ww += bp[k].weight * bp[k].weight;
      }
      total(static_cast<Index>(a)) = t;
      y(static_cast<Index>(a)) = bag.y;
      w2(static_cast<Index>(a)) = ww;
    }
    const BagMetrics bm = bag_metrics(total, y, lik, tau, w2);
    const std::string suffix = "_" + std::string(to_string(s));
    rep.metrics["bag_nll" + suffix] = bm.nll;
    rep.metrics["bag_mse" + suffix] = bm.mse;
    rep.metrics["bag_mse_log" + suffix] = bm.mse_log;
    if (s == opts.bag_split) {
      rep.metrics["bag_nll"] = bm.nll;
      rep.metrics["bag_mse"] = bm.mse;
      rep.metrics["bag_mse_log"] = bm.mse_log;
    }
  }
  if (!rep.calibration.empty()) {
    double s = 0.0;
    for (const auto& c : rep.calibration) s += c.abs_error;
    rep.metrics["calibration_mean_abs_error"] = s / static_cast<double>(rep.calibration.size());
  }
  return rep;
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json models = nlohmann::json::array();
  for (const auto& m : r.models) {
    nlohmann::json metrics = nlohmann::json::object();
    nlohmann::json flags = nlohmann::json::array();
    for (const auto& [k, v] : m.metrics) {
      if (std::isfinite(v)) {
        metrics[k] = v;
      } else {
        metrics[k] = nullptr;
        flags.push_back(k + (std::isnan(v) ? ":undefined" : (v > 0 ? ":+inf" : ":-inf")));
      }
    }
    nlohmann::json cal = nlohmann::json::array();
    for (const auto& c : m.calibration)
      cal.push_back({{"level", c.level}, {"coverage", c.coverage}, {"abs_error", c.abs_error}});
    models.push_back({{"model", m.model}, {"metrics", metrics}, {"flags", flags}, {"calibration", cal}});
  }
  return nlohmann::json{{"models", models},
                        {"repetition", r.repetition},
                        {"seed", r.seed},
                        {"config_digest", r.config_digest}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.repetition = j.value("repetition", 0);
  r.seed = j.value("seed", std::uint64_t{0});
  r.config_digest = j.value("config_digest", std::string());
  for (const auto& mj : j.at("models")) {
    ModelReport m;
    m.model = mj.at("model").get<std::string>();
    for (const auto& [k, v] : mj.at("metrics").items()) m.metrics[k] = v.is_null() ? kNaN : v.get<double>();
    for (const auto& f : mj.value("flags", nlohmann::json::array())) {
      const auto s = f.get<std::string>();
      const auto colon = s.rfind(':');
      const std::string key = s.substr(0, colon);
      const std::string what = s.substr(colon + 1);
      if (what == "+inf") m.metrics[key] = kInf;
      if (what == "-inf") m.metrics[key] = -kInf;
    }
    for (const auto& c : mj.value("calibration", nlohmann::json::array()))
      m.calibration.push_back({c.at("level").get<double>(), c.at("coverage").get<double>(), c.at("abs_error").get<double>()});
    r.models.push_back(std::move(m));
  }
  return r;
}

std::string digest(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string digest(const nlohmann::json& j) { return digest(j.dump()); }

void emit_report(const EvalReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write report " + path.string());
  out << report_to_json(r).dump(2) << '\n';
}

void write_predictions_csv(const BaggedDataset& ds, const std::vector<Index>& rows,
                           const std::vector<PredictiveDist>& preds, const std::filesystem::path& path) {
  if (rows.size() != preds.size()) throw DimensionMismatch("predictions do not match rows");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "individual_id,bag_id,pred_mean,pred_m,pred_s,link\n";
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const Index i = rows[k];
    out << ds.individual_id[static_cast<std::size_t>(i)] << ','
        << ds.bags[static_cast<std::size_t>(ds.bag_of[static_cast<std::size_t>(i)])].id << ','
        << format_number(predictive_mean(preds[k])) << ',' << format_number(preds[k].m) << ','
        << format_number(preds[k].s) << ',' << to_string(preds[k].link) << '\n';
  }
}

}  // namespace aggva
