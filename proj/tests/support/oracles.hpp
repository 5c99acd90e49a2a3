#pragma once

// Independent reference computations used by the unit and acceptance tests:
// Gauss-Hermite rules, brute-force marginal likelihoods, Monte Carlo and
// finite differences. Nothing here calls into the library's numerics.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Physicists' Gauss-Hermite nodes/weights (weight exp(-x^2)) via Golub-Welsch.
struct GaussHermite {
  VectorXd x;
  VectorXd w;
};

inline GaussHermite gauss_hermite(int n) {
  MatrixXd J = MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(i / 2.0);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(J);
  GaussHermite g;
  g.x = es.eigenvalues();
  g.w = es.eigenvectors().row(0).transpose().array().square() * std::sqrt(M_PI);
  return g;
}

inline double log_sum_exp(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

/// log of E_{u ~ N(mu, K)} exp(loglik(u)) for u of dimension 1 or 2, tensor-product GH.
inline double log_expect_gauss(const VectorXd& mu, const MatrixXd& K, int n,
                               const std::function<double(const VectorXd&)>& loglik) {
  const auto g = gauss_hermite(n);
  const Eigen::LLT<MatrixXd> llt(K);
  const MatrixXd L = llt.matrixL();
  const auto d = mu.size();
  std::vector<double> terms;
  if (d == 1) {
    for (int i = 0; i < n; ++i) {
      VectorXd u = mu + L * VectorXd::Constant(1, std::sqrt(2.0) * g.x(i));
      terms.push_back(std::log(g.w(i) / std::sqrt(M_PI)) + loglik(u));
    }
  } else {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        VectorXd z(2);
        z << std::sqrt(2.0) * g.x(i), std::sqrt(2.0) * g.x(j);
        const VectorXd u = mu + L * z;
        terms.push_back(std::log(g.w(i) * g.w(j) / M_PI) + loglik(u));
      }
  }
  return log_sum_exp(terms);
}

/// E_{u ~ N(mu, K)} f(u) for u of dimension 1 or 2, tensor-product GH.
inline double expect_gauss(const VectorXd& mu, const MatrixXd& K, int n, const std::function<double(const VectorXd&)>& f) {
  const auto g = gauss_hermite(n);
  const MatrixXd L = Eigen::LLT<MatrixXd>(K).matrixL();
  double acc = 0.0;
  if (mu.size() == 1) {
    for (int i = 0; i < n; ++i)
      acc += g.w(i) / std::sqrt(M_PI) * f(mu + L * VectorXd::Constant(1, std::sqrt(2.0) * g.x(i)));
  } else {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        VectorXd z(2);
        z << std::sqrt(2.0) * g.x(i), std::sqrt(2.0) * g.x(j);
        acc += g.w(i) * g.w(j) / M_PI * f(mu + L * z);
      }
  }
  return acc;
}

inline double poisson_logpmf(double y, double mean) {
  if (mean <= 0.0) return y == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
  return y * std::log(mean) - mean - std::lgamma(y + 1.0);
}

/// log N(y; m, C) by dense Cholesky.
inline double gaussian_logpdf(const VectorXd& y, const VectorXd& m, const MatrixXd& C) {
  const Eigen::LLT<MatrixXd> llt(C);
  const VectorXd r = y - m;
  const VectorXd a = llt.matrixL().solve(r);
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * a.squaredNorm() - 0.5 * logdet - 0.5 * static_cast<double>(y.size()) * std::log(2.0 * M_PI);
}

/// Draws from N(m, S).
inline MatrixXd gaussian_samples(const VectorXd& m, const MatrixXd& S, int n, std::mt19937_64& rng) {
  // robust square root through the eigen decomposition (S may be semidefinite)
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
  const MatrixXd R = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  std::normal_distribution<double> z;
  MatrixXd out(n, m.size());
  VectorXd e(m.size());
  for (int i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < m.size(); ++k) e(k) = z(rng);
    out.row(i) = (m + R * e).transpose();
  }
  return out;
}

struct McEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

inline McEstimate mc_mean(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

/// Central finite differences.
inline VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x, double h = 1e-5) {
  VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    VectorXd a = x, b = x;
    a(i) += h;
    b(i) -= h;
    g(i) = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

inline MatrixXd random_spd(Eigen::Index n, std::mt19937_64& rng, double scale = 1.0, double ridge = 0.1) {
  std::normal_distribution<double> z;
  MatrixXd A(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) A(i, j) = z(rng);
  return scale * (A * A.transpose() / static_cast<double>(n)) + ridge * MatrixXd::Identity(n, n);
}

}  // namespace oracle
