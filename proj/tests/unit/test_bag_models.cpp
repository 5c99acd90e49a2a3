#include "aggva/bag_models.hpp"
#include "aggva/error.hpp"

#include "builders.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace aggva;
using testing_support::make_bag;
using testing_support::random_matrix;

namespace {

/// State whose marginals at the landmark rows are N(eta, ~0): the stored log diagonal is very negative.
VariationalState point_state(const MatrixXd& W, const VectorXd& eta) {
  auto s = VariationalState::from_prior(W, KernelSpec::rbf(1.0), 0.0);
  s.eta = eta;
  s.sigma_factor = MatrixXd::Zero(W.rows(), W.rows());
  s.sigma_factor.diagonal().setConstant(-30.0);
  return s;
}

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST_CASE("taylor expansion examples") {
  VectorXd m = vec({1.0, -2.0, 0.5});
  VectorXd p = vec({1.0, 2.0, 3.0});
  MatrixXd Z = MatrixXd::Zero(3, 3);
  CHECK(taylor_log_quadform(m, Z, p) == doctest::Approx(std::log(1.0 + 8.0 + 0.75)).epsilon(1e-14));

  // zero-weight coordinates drop out
  std::mt19937_64 rng(1);
  MatrixXd S = oracle::random_spd(3, rng);
  VectorXd p0 = vec({1.5, 0.0, 2.0});
  std::vector<Index> keep{0, 2};
  VectorXd mr(2), pr(2);
  MatrixXd Sr(2, 2);
  for (Index a = 0; a < 2; ++a) {
    mr(a) = m(keep[a]);
    pr(a) = p0(keep[a]);
    for (Index b = 0; b < 2; ++b) Sr(a, b) = S(keep[a], keep[b]);
  }
  CHECK(taylor_log_quadform(m, S, p0) == doctest::Approx(taylor_log_quadform(mr, Sr, pr)).epsilon(1e-13));

  CHECK_THROWS_AS(taylor_log_quadform(m, Z, VectorXd::Zero(3)), DegenerateBag);
}

TEST_CASE("taylor expansion against Monte Carlo at large mean") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z;
  std::vector<double> v;
  v.reserve(1000000);
  for (int i = 0; i < 1000000; ++i) {
    double x = 10.0 + z(rng);
    v.push_back(std::log(x * x));
  }
  auto mc = oracle::mc_mean(v);
  double zeta = taylor_log_quadform(vec({10.0}), MatrixXd::Identity(1, 1), vec({1.0}));
  CHECK(std::abs(zeta - mc.mean) <= 1e-2);
}

TEST_CASE("taylor gradient") {
  std::mt19937_64 rng(3);
  VectorXd m = vec({1.0, -0.7, 2.0});
  VectorXd p = vec({0.5, 1.5, 1.0});
  MatrixXd S = oracle::random_spd(3, rng, 0.5);
  VectorXd gm;
  MatrixXd gS;
  taylor_log_quadform(m, S, p, gm, gS);
  auto fm = [&](const VectorXd& x) { return taylor_log_quadform(x, S, p); };
  CHECK((gm - oracle::fd_gradient(fm, m)).cwiseAbs().maxCoeff() < 1e-7);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j <= i; ++j) {
      MatrixXd Sp = S, Sm = S;
      const double h = 1e-6;
      Sp(i, j) += h;
      Sm(i, j) -= h;
      if (i != j) {
        Sp(j, i) += h;
        Sm(j, i) -= h;
      }
      double num = (taylor_log_quadform(m, Sp, p) - taylor_log_quadform(m, Sm, p)) / (2 * h);
      double ana = i == j ? gS(i, i) : gS(i, j) + gS(j, i);
      CHECK(ana == doctest::Approx(num).epsilon(1e-6));
    }
}

TEST_CASE("log-sum lower bound examples") {
  CHECK(logsum_lower_bound(vec({0.7}), vec({1.0})) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(logsum_lower_bound(vec({0.0, 0.0}), vec({1.0, 1.0})) == doctest::Approx(0.693147).epsilon(1e-6));
  VectorXd m = vec({0.3, -1.2, 2.0});
  VectorXd w = vec({1.0, 2.0, 0.5});
  CHECK(logsum_lower_bound((m.array() + 3.5).matrix(), w) ==
        doctest::Approx(logsum_lower_bound(m, w) + 3.5).epsilon(1e-13));
  CHECK(logsum_lower_bound(vec({800.0, 799.0}), vec({1.0, 1.0})) == doctest::Approx(800.0 + std::log1p(std::exp(-1.0))));
  CHECK_THROWS_AS(logsum_lower_bound(m, VectorXd::Zero(3)), DegenerateBag);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> z;
  std::vector<double> v;
  for (int i = 0; i < 1000000; ++i) v.push_back(std::log(std::exp(z(rng)) + std::exp(z(rng))));
  auto mc = oracle::mc_mean(v);
  CHECK(mc.mean + 3 * mc.stderr_ >= std::log(2.0));
}

TEST_CASE("exponential F-term bound") {
  VectorXd m = vec({0.2, -0.4, 1.0});
  VectorXd s = vec({0.3, 0.8, 0.1});
  VectorXd w = vec({1.0, 2.0, 0.5});
  double ref = 0.0;
  for (Index i = 0; i < 3; ++i) ref += w(i) * std::exp(m(i) - s(i) / 2);
  CHECK(exponential_fterm_bound(m, s, w) == doctest::Approx(-1.0 / ref).epsilon(1e-14));
  // homogeneity in the weights
  CHECK(exponential_fterm_bound(m, s, 4.0 * w) == doctest::Approx(exponential_fterm_bound(m, s, w) / 4.0));

  std::mt19937_64 rng(5);
  std::normal_distribution<double> z;
  std::vector<double> v;
  for (int k = 0; k < 1000000; ++k) {
    double t = 0.0;
    for (Index i = 0; i < 3; ++i) t += w(i) * std::exp(m(i) + std::sqrt(s(i)) * z(rng));
    v.push_back(-1.0 / t);
  }
  auto mc = oracle::mc_mean(v);
  CHECK(exponential_fterm_bound(m, s, w) <= mc.mean + 3 * mc.stderr_);
}

TEST_CASE("poisson ELBO closed cases") {
  MatrixXd W(1, 2);
  W << 0.3, -0.1;
  auto bag = make_bag(W, vec({1.0}), 0.0);
  std::vector<BagData> bags{bag};
  auto batch = BagBatch::all(bags);

  auto s1 = point_state(W, vec({1.0}));
  CHECK(poisson_elbo_sq(s1, batch) == doctest::Approx(-1.0 - kl_term(s1)).epsilon(1e-10));
  auto s0 = point_state(W, vec({0.0}));
  CHECK(poisson_elbo_exp(s0, batch) == doctest::Approx(-1.0 - kl_term(s0)).epsilon(1e-10));

  // deterministic f: Poisson log-likelihood at rate N_a
  std::mt19937_64 rng(6);
  MatrixXd W2 = random_matrix(3, 2, rng);
  auto s = point_state(W2, VectorXd::Zero(3));
  std::vector<BagData> b2{make_bag(W2.topRows(2), vec({1.0, 1.0}), 3.0, 0), make_bag(W2.bottomRows(1), vec({1.0}), 0.0, 1)};
  double exact = oracle::poisson_logpmf(3.0, 2.0) + oracle::poisson_logpmf(0.0, 1.0);
  CHECK(poisson_elbo_exp(s, BagBatch::all(b2)) == doctest::Approx(exact - kl_term(s)).epsilon(1e-9));

  auto prior = VariationalState::from_prior(W2, KernelSpec::rbf(1.0), 0.4);
  CHECK(std::abs(kl_term(prior)) < 1e-10);
}

TEST_CASE("normal ELBO closed cases") {
  std::mt19937_64 rng(7);
  MatrixXd W = random_matrix(2, 2, rng);
  VectorXd eta = vec({0.8, 1.7});
  auto s = point_state(W, eta);
  std::vector<BagData> bags{make_bag(W, vec({1.0, 1.0}), eta.sum())};
  auto batch = BagBatch::all(bags);
  double base = normal_elbo(s, batch, VectorXd::Zero(1));
  CHECK(base == doctest::Approx(-0.5 * std::log(2 * M_PI * 2.0) - kl_term(s)).epsilon(1e-9));
  double doubled = normal_elbo(s, batch, VectorXd::Constant(1, std::log(2.0)));
  CHECK(base - doubled == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("exponential ELBO closed cases") {
  MatrixXd W(1, 1);
  W << 0.0;
  auto s = point_state(W, vec({0.4}));
  std::vector<BagData> bags{make_bag(W, vec({1.0}), 2.5)};
  auto batch = BagBatch::all(bags);
  CHECK(exponential_elbo(s, batch) ==
        doctest::Approx(-2.5 * std::exp(-0.4) - 0.4 - kl_term(s)).epsilon(1e-10));
  CHECK_THROWS_AS(exponential_elbo(s, batch, Link::Sq), Unsupported);
}

TEST_CASE("exponential ELBO lower-bounds the expected log-likelihood") {
  std::mt19937_64 rng(8);
  MatrixXd W = random_matrix(3, 2, rng);
  MatrixXd X = random_matrix(3, 2, rng);
  auto s = testing_support::random_state(W, KernelSpec::rbf(1.2), rng, -0.3);
  VectorXd w = vec({1.0, 0.5, 2.0});
  std::vector<BagData> bags{make_bag(X, w, 1.7)};
  double elbo = exponential_elbo(s, BagBatch::all(bags)) + kl_term(s);

  auto mm = marginal_moments(s, X, CovMode::Full);
  MatrixXd F = oracle::gaussian_samples(mm.mean, mm.cov, 1000000, rng);
  std::vector<double> v;
  v.reserve(F.rows());
  for (Index k = 0; k < F.rows(); ++k) {
    double mu = 0.0;
    for (Index i = 0; i < 3; ++i) mu += w(i) * std::exp(F(k, i));
    v.push_back(-std::log(mu) - 1.7 / mu);
  }
  auto mc = oracle::mc_mean(v);
  CHECK(elbo <= mc.mean + 3 * mc.stderr_);
}

TEST_CASE("ELBOs lower-bound a quadrature log-evidence") {
  // individuals sit on the two landmarks, so f = u and the evidence is a 2-D integral
  std::mt19937_64 rng(9);
  MatrixXd W(2, 1);
  W << -0.5, 0.7;
  auto kernel = KernelSpec::rbf(1.0, 1.0);
  std::vector<BagData> bags{make_bag(W, vec({1.0, 2.0}), 4.0, 0), make_bag(W, vec({2.0, 0.5}), 3.0, 1)};
  auto batch = BagBatch::all(bags);
  const double mu0 = 0.8;
  MatrixXd K = kernel_matrix(kernel, W);

  for (Link link : {Link::Sq, Link::Exp}) {
    auto loglik = [&](const VectorXd& u) {
      double t = 0.0;
      for (const auto& b : bags) {
        double mean = 0.0;
        for (Index i = 0; i < 2; ++i) mean += b.weights(i) * link_apply(link, u(i));
        t += oracle::poisson_logpmf(b.y, mean);
      }
      return t;
    };
    double evidence = oracle::log_expect_gauss(VectorXd::Constant(2, mu0), K, 200, loglik);
    for (int rep = 0; rep < 10; ++rep) {
      auto s = testing_support::random_state(W, kernel, rng, mu0);
      double elbo = link == Link::Sq ? poisson_elbo_sq(s, batch) : poisson_elbo_exp(s, batch);
      CHECK(elbo <= evidence + 1e-6);
    }
  }
}

TEST_CASE("vbagg_elbo agrees with the family functions") {
  std::mt19937_64 rng(10);
  MatrixXd W = random_matrix(3, 2, rng);
  std::vector<BagData> bags{make_bag(random_matrix(2, 2, rng), vec({1.0, 2.0}), 3.0, 0),
                            make_bag(random_matrix(3, 2, rng), vec({0.5, 1.0, 1.0}), 1.0, 1)};
  BagBatch batch{{&bags[0]}, 2};
  VbaggModel model;
  model.state = testing_support::random_state(W, KernelSpec::rbf(1.0), rng);
  model.link = Link::Sq;
  CHECK(vbagg_elbo(model, batch, false).value == doctest::Approx(poisson_elbo_sq(model.state, batch)));
  model.link = Link::Exp;
  CHECK(vbagg_elbo(model, batch, false).value == doctest::Approx(poisson_elbo_exp(model.state, batch)));
  // half the bags carry half the KL
  double kl = kl_term(model.state);
  BagBatch full = BagBatch::all(bags);
  BagBatch second{{&bags[1]}, 2};
  CHECK(poisson_elbo_exp(model.state, batch) + poisson_elbo_exp(model.state, second) ==
        doctest::Approx(poisson_elbo_exp(model.state, full)).epsilon(1e-12));
  CHECK(kl > 0.0);
}

TEST_CASE("predictive summaries") {
  PredictiveDist e0{Link::Exp, 0.0, 0.0, 1.0};
  CHECK(predictive_mean(e0) == doctest::Approx(1.0));
  CHECK(predictive_cdf(e0, 0.999) == 0.0);
  CHECK(predictive_cdf(e0, 1.0) == 1.0);
  CHECK(predictive_mean(PredictiveDist{Link::Sq, 2.0, 1.0, 1.0}) == doctest::Approx(5.0));
  CHECK(predictive_mean(PredictiveDist{Link::Exp, 0.0, 2.0, 1.0}) == doctest::Approx(std::exp(1.0)));
  CHECK(predictive_quantile(PredictiveDist{Link::Exp, 0.0, 1.0, 1.0}, 0.5) == doctest::Approx(1.0));
  CHECK(predictive_cdf(PredictiveDist{Link::Sq, 0.0, 1.0, 1.0}, 1.0) == doctest::Approx(0.682689).epsilon(1e-6));
  CHECK(normal_cdf(0.0) == doctest::Approx(0.5));
}

TEST_CASE("predictive cdf and quantile are inverse") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (Link link : {Link::Exp, Link::Sq, Link::Identity})
    for (int rep = 0; rep < 30; ++rep) {
      PredictiveDist d{link, u(rng) * 4 - 2, u(rng) * 2, 1.0};
      double t = predictive_quantile(d, u(rng));
      CHECK(predictive_quantile(d, predictive_cdf(d, t)) == doctest::Approx(t).epsilon(1e-6));
    }
}

TEST_CASE("predictive of a landmark equals the marginal diagonal") {
  std::mt19937_64 rng(12);
  MatrixXd W = random_matrix(3, 2, rng);
  auto s = testing_support::random_state(W, KernelSpec::rbf(0.9), rng);
  VectorXd x = random_matrix(1, 2, rng).row(0).transpose();
  auto d = predictive_individual(s, x, Link::Sq);
  auto mm = marginal_moments(s, x.transpose(), CovMode::Full);
  CHECK(d.m == doctest::Approx(mm.mean(0)).epsilon(1e-12));
  CHECK(d.s == doctest::Approx(mm.cov(0, 0)).epsilon(1e-10));
  auto d2 = predictive_individual(s, x, Link::Sq);
  CHECK(d2.m == d.m);
  CHECK(d2.s == d.s);
  auto rows = predictive_rows(s, x.transpose(), Link::Sq);
  CHECK(rows[0].m == doctest::Approx(d.m).epsilon(1e-12));
}
