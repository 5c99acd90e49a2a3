#pragma once

// Small constructors for hand-made bags and states.

#include "aggva/bags.hpp"
#include "aggva/data.hpp"
#include "aggva/gp_core.hpp"

#include <random>
#include <string>
#include <vector>

namespace testing_support {

using aggva::BagData;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline BagData make_bag(const MatrixXd& X, const VectorXd& w, double y, Index index = 0, std::string id = "") {
  BagData b;
  b.id = id.empty() ? "b" + std::to_string(index) : std::move(id);
  b.X = X;
  b.weights = w;
  b.y = y;
  b.population = w.sum();
  b.index = index;
  for (Index i = 0; i < X.rows(); ++i) b.members.push_back(i);
  return b;
}

inline MatrixXd random_matrix(Index r, Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> z(0.0, sd);
  MatrixXd M(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) M(i, j) = z(rng);
  return M;
}

/// A valid state with random mean and a random lower factor.
inline aggva::VariationalState random_state(const MatrixXd& W, const aggva::KernelSpec& k, std::mt19937_64& rng,
                                            double mu0 = 0.3) {
  auto s = aggva::VariationalState::from_prior(W, k, mu0);
  std::normal_distribution<double> z(0.0, 0.3);
  for (Index i = 0; i < s.eta.size(); ++i) s.eta(i) += z(rng);
  for (Index c = 0; c < s.sigma_factor.cols(); ++c)
    for (Index r = c; r < s.sigma_factor.rows(); ++r) s.sigma_factor(r, c) += z(rng);
  return s;
}

}  // namespace testing_support
