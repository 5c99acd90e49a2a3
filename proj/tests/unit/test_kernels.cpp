#include "aggva/error.hpp"
#include "aggva/kernels.hpp"

#include "builders.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace aggva;

TEST_CASE("rbf values") {
  auto k = KernelSpec::rbf(1.0, 1.0);
  VectorXd x(2), y(2);
  x << 0.0, 0.0;
  y << 1.0, 1.0;
  CHECK(kernel_eval(k, x, x) == doctest::Approx(1.0));
  CHECK(kernel_eval(k, x, y) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  CHECK(kernel_eval(k, x, y) == doctest::Approx(0.367879).epsilon(1e-6));
}

TEST_CASE("matern32 at zero distance equals the scale") {
  for (double rho : {0.1, 1.0, 7.0}) {
    auto k = KernelSpec::matern32(rho, 2.0);
    VectorXd x = VectorXd::Constant(3, 0.4);
    CHECK(kernel_eval(k, x, x) == doctest::Approx(2.0));
  }
}

TEST_CASE("matern32 matches its closed form") {
  auto k = KernelSpec::matern32(1.5, 0.7);
  VectorXd x(1), y(1);
  x << 0.2;
  y << 1.3;
  double r = std::sqrt(3.0) * 1.1 / 1.5;
  CHECK(kernel_eval(k, x, y) == doctest::Approx(0.7 * (1 + r) * std::exp(-r)));
}

TEST_CASE("ard uses one lengthscale per dimension") {
  auto k = KernelSpec::ard({1.0, 4.0}, 1.0);
  VectorXd x(2), y(2);
  x << 0.0, 0.0;
  y << 1.0, 2.0;
  CHECK(kernel_eval(k, x, y) == doctest::Approx(std::exp(-0.5 * (1.0 + 4.0 / 4.0))));
}

TEST_CASE("active dims select covariates") {
  auto k = KernelSpec::rbf(1.0, 1.0, {1});
  VectorXd x(2), y(2);
  x << 0.0, 0.0;
  y << 100.0, 0.0;
  CHECK(kernel_eval(k, x, y) == doctest::Approx(1.0));
  CHECK_THROWS_AS(k.validate(1), DimensionMismatch);
}

TEST_CASE("kernel matrix shapes and duplicates") {
  auto k = KernelSpec::rbf(0.7, 2.5);
  MatrixXd X(1, 3);
  X << 1, 2, 3;
  MatrixXd K = kernel_matrix(k, X);
  REQUIRE(K.rows() == 1);
  CHECK(K(0, 0) == doctest::Approx(2.5));

  MatrixXd D(2, 3);
  D.row(0) << 1, 2, 3;
  D.row(1) << 1, 2, 3;
  MatrixXd K2 = kernel_matrix(k, D);
  CHECK((K2.array() - 2.5).abs().maxCoeff() < 1e-14);
}

TEST_CASE("random rbf gram matrix is positive semidefinite") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    MatrixXd X = testing_support::random_matrix(5, 3, rng);
    MatrixXd K = kernel_matrix(KernelSpec::rbf(0.8, 1.3), X);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(K);
    CHECK(es.eigenvalues().minCoeff() >= -1e-9);
  }
}

TEST_CASE("safe_cholesky examples") {
  auto I = safe_cholesky(MatrixXd::Identity(3, 3));
  CHECK(I.jitter() == 0.0);
  CHECK((I.L() - MatrixXd::Identity(3, 3)).norm() == 0.0);

  MatrixXd A(2, 2);
  A << 4, 2, 2, 2;
  auto f = safe_cholesky(A);
  CHECK(f.jitter() == 0.0);
  CHECK(f.L()(0, 0) == doctest::Approx(2.0));
  CHECK(f.L()(0, 1) == 0.0);
  CHECK(f.L()(1, 0) == doctest::Approx(1.0));
  CHECK(f.L()(1, 1) == doctest::Approx(1.0));

  MatrixXd ones = MatrixXd::Ones(3, 3);
  auto g = safe_cholesky(ones);
  CHECK(g.jitter() > 0.0);
  double err = (g.L() * g.L().transpose() - ones).cwiseAbs().maxCoeff();
  CHECK(err <= g.jitter() + 1e-12);
}

TEST_CASE("safe_cholesky gives up on indefinite input") {
  MatrixXd A(2, 2);
  A << 1, 0, 0, -1;
  try {
    (void)safe_cholesky(A, 1e-6, "test-role");
    FAIL("expected NotPositiveDefinite");
  } catch (const NotPositiveDefinite& e) {
    CHECK(e.role() == "test-role");
  }
}

TEST_CASE("cholesky solve and log det") {
  std::mt19937_64 rng(5);
  MatrixXd A = oracle::random_spd(4, rng);
  auto f = safe_cholesky(A);
  VectorXd b = VectorXd::LinSpaced(4, -1, 2);
  CHECK((A * f.solve(b) - b).norm() < 1e-9);
  CHECK(f.log_det() == doctest::Approx(std::log(A.determinant())).epsilon(1e-10));
}

namespace {

void check_param_grad(const KernelSpec& spec, const MatrixXd& X, const MatrixXd& Y) {
  std::mt19937_64 rng(17);
  MatrixXd G = testing_support::random_matrix(X.rows(), Y.rows(), rng);
  VectorXd theta = spec.params();
  auto f = [&](const VectorXd& t) {
    KernelSpec s = spec;
    s.set_params(t);
    return (kernel_matrix(s, X, Y).array() * G.array()).sum();
  };
  VectorXd analytic = kernel_param_contract(spec, X, Y, G);
  VectorXd numeric = oracle::fd_gradient(f, theta, 1e-5);
  CHECK((analytic - numeric).cwiseAbs().maxCoeff() < 1e-6 * std::max(1.0, numeric.norm()));

  // inputs
  MatrixXd gin = kernel_input_contract(spec, X, Y, G);
  for (Index j = 0; j < Y.rows(); ++j)
    for (Index c = 0; c < Y.cols(); ++c) {
      MatrixXd Yp = Y, Ym = Y;
      Yp(j, c) += 1e-5;
      Ym(j, c) -= 1e-5;
      double num = ((kernel_matrix(spec, X, Yp) - kernel_matrix(spec, X, Ym)).array() * G.array()).sum() / 2e-5;
      CHECK(gin(j, c) == doctest::Approx(num).epsilon(1e-5).scale(1.0));
    }
}

}  // namespace

TEST_CASE("kernel gradients agree with finite differences") {
  std::mt19937_64 rng(9);
  MatrixXd X = testing_support::random_matrix(4, 3, rng);
  MatrixXd Y = testing_support::random_matrix(3, 3, rng);
  SUBCASE("rbf") { check_param_grad(KernelSpec::rbf(1.1, 0.9), X, Y); }
  SUBCASE("ard") { check_param_grad(KernelSpec::ard({0.5, 1.2, 2.0}, 1.4), X, Y); }
  SUBCASE("matern32") { check_param_grad(KernelSpec::matern32(1.3, 0.8), X, Y); }
  SUBCASE("additive") {
    check_param_grad(KernelSpec::additive({KernelSpec::rbf(1.0, 1.0, {0, 1}), KernelSpec::matern32(2.0, 0.5, {2})}),
                     X, Y);
  }
}

TEST_CASE("kernel spec json round trip") {
  auto k = KernelSpec::additive({KernelSpec::ard({0.5, 2.0}, 1.5, {0, 2}), KernelSpec::matern32(3.0, 0.2)});
  nlohmann::json j = k;
  CHECK(j.get<KernelSpec>() == k);
  CHECK(k.num_params() == static_cast<Index>(k.param_names().size()));
}
