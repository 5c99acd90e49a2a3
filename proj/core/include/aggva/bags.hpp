#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

namespace aggva {

enum class Likelihood { Poisson, Normal, Exponential };
enum class Link { Exp, Sq, Identity };

std::string_view to_string(Likelihood l);
std::string_view to_string(Link l);
Likelihood likelihood_from_string(std::string_view s);
Link link_from_string(std::string_view s);

/// Psi(f): exp(f), f^2 or f.
inline double link_apply(Link l, double f) {
  switch (l) {
    case Link::Exp: return std::exp(f);
    case Link::Sq: return f * f;
    case Link::Identity: return f;
  }
  return f;
}

inline double link_derivative(Link l, double f) {
  switch (l) {
    case Link::Exp: return std::exp(f);
    case Link::Sq: return 2.0 * f;
    case Link::Identity: return 1.0;
  }
  return 1.0;
}

/// One bag with its members' covariates copied out of the dataset.
struct BagData {
  std::string id;
  Eigen::MatrixXd X;        // N_a x d
  Eigen::VectorXd weights;  // population p_i (Poisson) or weight w_i
  std::vector<Eigen::Index> members;  // row indices into the source dataset
  double y = 0.0;
  double population = 0.0;  // sum of weights
  Eigen::Index index = 0;   // position within the training bag list (per-bag noise lookup)
};

/// A minibatch of bags. total_bags is the size of the full training set, used to
/// scale the KL term so minibatch objectives are unbiased.
struct BagBatch {
  std::vector<const BagData*> bags;
  Eigen::Index total_bags = 0;

  static BagBatch all(const std::vector<BagData>& bags);
  [[nodiscard]] double kl_share() const {
    return total_bags > 0 ? static_cast<double>(bags.size()) / static_cast<double>(total_bags) : 1.0;
  }
};

/// Checks BagBatch invariants for the given likelihood; throws DataError / DegenerateBag.
void validate_bags(const std::vector<BagData>& bags, Likelihood likelihood);

}  // namespace aggva
