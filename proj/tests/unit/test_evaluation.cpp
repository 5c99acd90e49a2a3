#include "aggva/evaluation.hpp"

#include "builders.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace aggva;
namespace fs = std::filesystem;

TEST_CASE("individual metrics") {
  VectorXd one = VectorXd::Ones(1);
  auto m = individual_metrics(one, one, std::nullopt, VectorXd(one), Likelihood::Poisson);
  CHECK(m.nll == doctest::Approx(1.0));
  CHECK(individual_nll(Likelihood::Poisson, 3.0, 3.0, 1.0) == doctest::Approx(3 - 3 * std::log(3.0) + std::log(6.0)));
  CHECK(individual_nll(Likelihood::Poisson, 3.0, 3.0, 1.0) == doctest::Approx(1.495922).epsilon(1e-6));

  VectorXd rate(3);
  rate << 1.0, 2.0, 0.5;
  auto perfect = individual_metrics(rate, VectorXd::Ones(3), VectorXd(rate), std::nullopt, Likelihood::Poisson);
  CHECK(perfect.mse == 0.0);
  CHECK(std::isnan(perfect.nll));

  VectorXd y(1);
  y << 2.0;
  auto inf = individual_metrics(VectorXd::Zero(1), VectorXd::Ones(1), std::nullopt, VectorXd(y), Likelihood::Poisson);
  CHECK(std::isinf(inf.nll));
  CHECK(inf.n_infinite == 1);
}

TEST_CASE("bag metrics") {
  VectorXd y(1), pred(1);
  y << 4.0;
  pred << 4.0;
  CHECK(bag_metrics(pred, y, Likelihood::Poisson).mse_log == 0.0);

  y << 0.0;
  pred << 0.5;
  CHECK(bag_metrics(pred, y, Likelihood::Poisson).nll == doctest::Approx(0.5));

  y << std::exp(2.0);
  pred << std::exp(1.0);
  CHECK(bag_metrics(pred, y, Likelihood::Poisson).mse_log == doctest::Approx(1.0));

  VectorXd y2(2), p2(2);
  y2 << 0.0, 3.0;
  p2 << 1.0, 3.0;
  auto bm = bag_metrics(p2, y2, Likelihood::Poisson);
  CHECK(bm.n_log_flagged == 1);
  CHECK(bm.mse == doctest::Approx(0.5));
}

TEST_CASE("calibration coverage") {
  std::vector<PredictiveDist> point{{Link::Exp, std::log(2.0), 0.0, 1.0}};
  VectorXd truth = VectorXd::Constant(1, 2.0);
  for (const auto& row : calibration_coverage(point, truth)) CHECK(row.coverage == 1.0);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const int n = 100000;
  for (Link link : {Link::Exp, Link::Sq}) {
    std::vector<PredictiveDist> dists;
    VectorXd truths(n);
    for (int i = 0; i < n; ++i) {
      PredictiveDist d{link, u(rng), 0.2 + 0.5 * (u(rng) + 1.0), 1.0};
      double f = d.m + std::sqrt(d.s) * z(rng);
      truths(i) = link_apply(link, f);
      dists.push_back(d);
    }
    for (const auto& row : calibration_coverage(dists, truths)) CHECK(row.abs_error <= 0.01);
  }

  std::vector<PredictiveDist> sym;
  VectorXd tr(n);
  for (int i = 0; i < n; ++i) {
    sym.push_back({Link::Identity, 0.0, 1.0, 1.0});
    tr(i) = z(rng);
  }
  auto half = calibration_coverage(sym, tr, {0.5});
  CHECK(half[0].coverage == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("wilcoxon signed rank") {
  std::vector<double> a{1, 2, 3, 4, 5}, b{2, 4, 6, 8, 10};
  auto r = wilcoxon_signed_rank(a, b);
  CHECK(r.exact);
  CHECK(r.p_value == doctest::Approx(0.03125));
  auto rev = wilcoxon_signed_rank(b, a);
  CHECK(rev.p_value == doctest::Approx(1.0));

  // with distinct magnitudes the two one-sided exact p-values sum to 1 + P(W = w);
  // the point mass comes from enumerating all 2^6 sign patterns over ranks 1..6
  std::vector<double> c{0.1, -0.2, 0.4, -0.8, 1.6, 3.2}, zero(6, 0.0);
  auto lo = wilcoxon_signed_rank(c, zero), hi = wilcoxon_signed_rank(zero, c);
  int w_obs = 0;
  for (int r = 0; r < 6; ++r)
    if (c[static_cast<std::size_t>(r)] > 0) w_obs += r + 1;
  int hits = 0;
  for (int mask = 0; mask < 64; ++mask) {
    int w = 0;
    for (int r = 0; r < 6; ++r)
      if (mask >> r & 1) w += r + 1;
    hits += w == w_obs;
  }
  CHECK(lo.p_value + hi.p_value == doctest::Approx(1.0 + hits / 64.0).epsilon(1e-12));

  std::mt19937_64 rng(2);
  std::normal_distribution<double> z;
  double mean_p = 0.0;
  const int reps = 400;
  for (int k = 0; k < reps; ++k) {
    std::vector<double> x(30), y(30);
    for (int i = 0; i < 30; ++i) {
      x[static_cast<std::size_t>(i)] = z(rng);
      y[static_cast<std::size_t>(i)] = z(rng);
    }
    mean_p += wilcoxon_signed_rank(x, y).p_value / reps;
  }
  CHECK(mean_p == doctest::Approx(0.5).epsilon(0.1));

  std::vector<double> e(5, 1.0);
  auto same = wilcoxon_signed_rank(e, e);
  CHECK(same.all_zero);
}

namespace {

EvalReport sample_report() {
  EvalReport r;
  r.repetition = 2;
  r.seed = 77;
  r.config_digest = "abc";
  ModelReport m;
  m.model = "vbagg-sq";
  m.metrics = {{"individual_nll", 1.25}, {"bag_mse", 0.5}, {"broken", std::nan("")}};
  m.calibration = {{0.5, 0.48, 0.02}, {0.9, 0.93, 0.03}};
  r.models.push_back(m);
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("reports") {
  auto dir = fs::temp_directory_path() / "aggva_test_eval";
  fs::remove_all(dir);
  auto r = sample_report();
  emit_report(r, dir / "a" / "report.json");
  emit_report(r, dir / "b" / "report.json");
  CHECK(slurp(dir / "a" / "report.json") == slurp(dir / "b" / "report.json"));

  auto j = report_to_json(r);
  CHECK(j["models"][0]["metrics"]["broken"].is_null());
  auto back = report_from_json(nlohmann::json::parse(slurp(dir / "a" / "report.json")));
  CHECK(report_to_json(back) == j);

  auto r2 = r;
  r2.models[0].metrics["bag_mse"] = 0.5000001;
  CHECK(digest(report_to_json(r2)) != digest(j));
  CHECK(digest(j).size() == 16);
  fs::remove_all(dir);
}
