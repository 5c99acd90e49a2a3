#pragma once

// Sparse variational GP: inducing values u = f(W) with q(u) = N(eta_u, Sigma_u),
// constant prior mean mu0, and the induced Gaussian marginals of f on bags.

#include "aggva/kernels.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <random>
#include <string>

namespace aggva {

/// Variational parameters. Sigma_u = L L^T where L is `sigma_factor` with its
/// diagonal exponentiated: the stored diagonal holds log L_ii, so any real
/// matrix is a valid parameter value.
struct VariationalState {
  MatrixXd W;             // m x d landmarks
  VectorXd eta;           // m
  MatrixXd sigma_factor;  // m x m, lower triangle used, diagonal = log L_ii
  double mu0 = 0.0;
  KernelSpec kernel;
  bool optimize_landmarks = false;

  [[nodiscard]] Index num_landmarks() const noexcept { return W.rows(); }
  [[nodiscard]] Index input_dim() const noexcept { return W.cols(); }

  /// Lower factor with positive diagonal.
  [[nodiscard]] MatrixXd chol_factor() const;
  [[nodiscard]] MatrixXd sigma() const;
  void set_sigma(const MatrixXd& sigma);

  /// Throws DataError on any invariant violation.
  void validate() const;

  /// eta = mu0 * 1 and Sigma_u = K_WW, so q(u) equals the prior.
  static VariationalState from_prior(MatrixXd W, KernelSpec kernel, double mu0, double jitter_base = 1e-6);
};

void to_json(nlohmann::json& j, const VariationalState& s);
void from_json(const nlohmann::json& j, VariationalState& s);

enum class CovMode { Full, Diag };

struct GaussianMarginal {
  VectorXd mean;
  MatrixXd cov;  // Full mode only
  VectorXd var;  // always filled
  CovMode mode = CovMode::Diag;
  std::string bag_id;
};

GaussianMarginal marginal_moments(const VariationalState& state, const MatrixXd& Xbag, CovMode mode,
                                  double jitter_base = 1e-6);

/// KL(q(u) || p(u | W)).
double kl_term(const VariationalState& state, double jitter_base = 1e-6);

/// Gradient of a scalar objective with respect to every VariationalState parameter.
struct VariationalGrad {
  VectorXd eta;
  MatrixXd sigma_factor;  // lower triangle, diagonal w.r.t. the stored log values
  double mu0 = 0.0;
  VectorXd kernel;
  MatrixXd W;

  static VariationalGrad zeros(const VariationalState& s);
};

/// Evaluates bag marginals and back-propagates objective gradients for a fixed state.
///
/// Usage: construct once per parameter value, call moments() for every bag,
/// hand each bag's upstream gradients (d obj / d mean, d obj / d cov) to
/// backprop_bag(), optionally add_kl(weight) for a -weight * KL term, then finish() to obtain the
/// gradient with respect to the state.
class GpEvaluator {
 public:
  explicit GpEvaluator(const VariationalState& state, double jitter_base = 1e-6);

  [[nodiscard]] const VariationalState& state() const noexcept { return state_; }
  [[nodiscard]] const CholeskyFactor& kww_factor() const noexcept { return kww_; }

  /// Kernel cross matrix is returned through `kxw` so backprop_bag can reuse it.
  GaussianMarginal moments(const MatrixXd& X, CovMode mode, MatrixXd* kxw = nullptr) const;

  [[nodiscard]] double kl() const;

  /// g_mean: d obj / d m. For Full mode g_cov is symmetric N x N; for Diag it is d obj / d var as N x 1.
  void backprop_bag(const MatrixXd& X, const MatrixXd& kxw, const VectorXd& g_mean, const MatrixXd& g_cov,
                    CovMode mode);

  /// Adds d(-weight * KL)/d state, the ELBO's KL penalty, to the accumulated gradient.
  void add_kl(double weight);

  [[nodiscard]] VariationalGrad finish() const;

 private:
  const VariationalState& state_;
  double jitter_base_;
  MatrixXd kww_raw_;
  CholeskyFactor kww_;
  MatrixXd sigma_chol_;
  MatrixXd sigma_;
  VectorXd alpha_;  // K^{-1}(eta - mu0 1)
  MatrixXd C_;      // K^{-1} - K^{-1} Sigma K^{-1}

  // accumulators
  VectorXd h_;      // sum_a K_Wx g_m
  double gm_sum_ = 0.0;
  MatrixXd Q_;      // sum_a K_Wx G_S K_xW
  double kl_weight_ = 0.0;
  VectorXd g_kernel_;
  MatrixXd g_W_;
};

struct KMeansResult {
  MatrixXd centers;
  std::vector<Index> assignment;
  double inertia = 0.0;
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding; at most 100 iterations or stop when
/// the relative inertia change drops below 1e-6.
KMeansResult kmeans_pp(const MatrixXd& X, Index k, std::mt19937_64& rng, int max_iter = 100, double tol = 1e-6);

/// Landmark matrix W (m x d) from k-means++ / Lloyd.
MatrixXd select_landmarks(const MatrixXd& X, Index m, std::mt19937_64& rng);

/// One landmark per bag: the member closest to the bag centroid.
MatrixXd select_landmarks_per_bag(const MatrixXd& X, const std::vector<std::vector<Index>>& bags);

}  // namespace aggva
