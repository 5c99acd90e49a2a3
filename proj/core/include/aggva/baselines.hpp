#pragma once

// Point-estimate comparison models (constant rate, bag-pixel, Nystrom MAP,
// one-hidden-layer MLP) and the Laplacian smoothness penalties they share.

#include "aggva/bags.hpp"
#include "aggva/data.hpp"
#include "aggva/kernels.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace aggva {

// ---------------------------------------------------------------------------
// Plug-in bag likelihood

/// Negative log-likelihood of y^a given individual latent values f (one per
/// member) under mean-parameter aggregation mu^a = sum_i w_i Psi(f_i).
///   Poisson      mu - y log mu + log y!
///   Normal       (y - mu)^2 / (2D) + log(2 pi D) / 2,  D = tau sum_i w_i^2
///   Exponential  log mu + y / mu
/// Optionally writes d/df and d/dlog(tau).
double point_bag_nll(Likelihood lik, Link link, const BagData& bag, const VectorXd& f, double log_tau,
                     VectorXd* g_f = nullptr, double* g_log_tau = nullptr);

/// Same likelihood evaluated from a predicted bag mean. `w_sq_sum` = sum_i w_i^2 (Normal only).
double bag_nll_from_mean(Likelihood lik, double y, double mean, double tau = 1.0, double w_sq_sum = 1.0);

// ---------------------------------------------------------------------------
// Constant rate

struct ConstantModel {
  Likelihood likelihood = Likelihood::Poisson;
  std::map<std::string, double> bag_rate;  // y^a / p^a for every fitted bag
  double global_rate = 0.0;                // sum y^a / sum p^a
  double log_tau = 0.0;

  /// Fitted rate of a known bag, global rate otherwise.
  [[nodiscard]] double rate_for(const std::string& bag_id) const;
};

ConstantModel constant_fit(const BagBatch& batch, Likelihood lik = Likelihood::Poisson);

void to_json(nlohmann::json& j, const ConstantModel& m);
void from_json(const nlohmann::json& j, ConstantModel& m);

// ---------------------------------------------------------------------------
// Bag-pixel

/// One pseudo-individual per bag at the weighted mean covariate sum_i (p_i/p^a) x_i,
/// carrying the whole bag population. Ids equal the bag ids.
BaggedDataset bag_pixel_aggregate(const BaggedDataset& ds);

// ---------------------------------------------------------------------------
// Nystrom features

/// Phi_z = k(z, W) K_WW^{-1/2} with the symmetric inverse square root taken
/// through an eigendecomposition whose eigenvalues are floored at rel_floor * lambda_max.
class NystromFeatureMap {
 public:
  NystromFeatureMap() = default;
  NystromFeatureMap(MatrixXd W, KernelSpec kernel, double rel_floor = 1e-10);

  [[nodiscard]] MatrixXd map(const MatrixXd& X) const;
  [[nodiscard]] Index dim() const noexcept { return W_.rows(); }
  [[nodiscard]] bool floor_hit() const noexcept { return floor_hit_; }
  [[nodiscard]] const MatrixXd& landmarks() const noexcept { return W_; }
  [[nodiscard]] const KernelSpec& kernel() const noexcept { return kernel_; }

 private:
  MatrixXd W_;
  KernelSpec kernel_;
  MatrixXd inv_sqrt_;
  bool floor_hit_ = false;
};

/// Random Fourier features with Phi Phi^T ~ K. Frequencies follow the kernel's
/// spectral density (Gaussian for RBF/ARD, Student-t with 3 dof for Matern-3/2);
/// additive kernels concatenate one block per component.
class RffMap {
 public:
  RffMap() = default;
  RffMap(const KernelSpec& kernel, Index input_dim, Index n_features, std::uint64_t seed);

  [[nodiscard]] MatrixXd map(const MatrixXd& X) const;
  [[nodiscard]] Index dim() const noexcept { return omega_.cols(); }

 private:
  MatrixXd omega_;  // d x R
  VectorXd phase_;
  VectorXd scale_;
};

// ---------------------------------------------------------------------------
// Laplacian penalties

/// f^T L f with L = diag(K 1) - K.
double exact_laplacian_penalty(const VectorXd& f, const MatrixXd& K, VectorXd* grad = nullptr);
MatrixXd graph_laplacian(const MatrixXd& K);

/// Feature approximation f^T diag(Phi Phi^T 1) f - ||Phi^T f||^2.
double manifold_penalty(const VectorXd& f, const MatrixXd& Phi, VectorXd* grad = nullptr);

/// sum_l sum_m (F_l - F_m)^2 Kbag_lm for a symmetric bag similarity matrix.
double bag_manifold_penalty(const VectorXd& F, const MatrixXd& Kbag, VectorXd* grad = nullptr);
/// Kbag = k_s(s_l, s_m) * k_h(H_l, H_m). Throws Unsupported when S is empty.
double bag_manifold_penalty(const VectorXd& F, const MatrixXd& S, const MatrixXd& H, const KernelSpec& ks,
                            const KernelSpec& kh, VectorXd* grad = nullptr);

enum class LaplacianMode { None, Exact, Rff, Nystrom };
std::string_view to_string(LaplacianMode m);
LaplacianMode laplacian_mode_from_string(std::string_view s);

struct LaplacianSpec {
  LaplacianMode mode = LaplacianMode::Rff;
  KernelSpec kernel;
  Index n_features = 2000;   // RFF
  Index n_landmarks = 100;   // Nystrom
  double epsilon = 1e-8;     // adds epsilon ||f||^2 so the implied prior precision is definite
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const LaplacianSpec& s);
void from_json(const nlohmann::json& j, LaplacianSpec& s);

/// Individual-level smoothness penalty over a batch of bags.
class ManifoldRegularizer {
 public:
  ManifoldRegularizer() = default;
  /// `X_source` provides Nystrom landmarks (k-means++) when mode is Nystrom.
  ManifoldRegularizer(LaplacianSpec spec, const MatrixXd& X_source);

  [[nodiscard]] bool active() const noexcept { return spec_.mode != LaplacianMode::None; }
  [[nodiscard]] const LaplacianSpec& spec() const noexcept { return spec_; }

  /// Per-bag feature block (empty in exact mode).
  [[nodiscard]] MatrixXd features(const MatrixXd& X) const;

  /// f^T L f + epsilon ||f||^2 over the concatenation of the bags' members.
  /// `cache`, when given, holds features(bag.X) at position bag.index.
  double penalty(const std::vector<const BagData*>& bags, const VectorXd& f, VectorXd* grad,
                 const std::vector<MatrixXd>* cache = nullptr) const;

 private:
  LaplacianSpec spec_;
  RffMap rff_;
  NystromFeatureMap nystrom_;
};

/// Optional bag-level covariates for the bag manifold term.
struct BagCovariates {
  MatrixXd S;  // one row per bag, indexed by BagData::index; empty when unavailable
  KernelSpec ks;
  KernelSpec kh;
};

// ---------------------------------------------------------------------------
// Nystrom MAP regression

struct NystromModel {
  MatrixXd W;
  KernelSpec kernel;
  VectorXd beta;
  double bias = 0.0;
  double log_gamma_prior = 0.0;
  Link link = Link::Exp;
  Likelihood likelihood = Likelihood::Poisson;
  double lambda1 = 0.0;
  double log_tau = 0.0;

  [[nodiscard]] NystromFeatureMap feature_map() const { return {W, kernel}; }
};

void to_json(nlohmann::json& j, const NystromModel& m);
void from_json(const nlohmann::json& j, NystromModel& m);

VectorXd nystrom_predict_f(const NystromModel& model, const NystromFeatureMap& fmap, const MatrixXd& X);

struct NystromGrad {
  VectorXd beta;
  double bias = 0.0;
  double log_tau = 0.0;
};

/// Minimization objective
///   sum_a NLL_a + (|batch|/total) ||beta||^2 / (2 gamma^2) + lambda1 (f^T L f + eps ||f||^2) / b_N^2
/// where b_N is the number of individuals in the batch. `phi_cache` holds
/// fmap.map(bag.X) at position bag.index.
double nystrom_map_objective(const NystromModel& model, const NystromFeatureMap& fmap, const BagBatch& batch,
                             const ManifoldRegularizer* laplacian = nullptr, NystromGrad* grad = nullptr,
                             const std::vector<MatrixXd>* phi_cache = nullptr,
                             const std::vector<MatrixXd>* manifold_cache = nullptr);

// ---------------------------------------------------------------------------
// One-hidden-layer ReLU network

struct MlpModel {
  MatrixXd W1;  // h x d
  VectorXd b1;  // h
  VectorXd w2;  // h
  double b2 = 0.0;
  Link link = Link::Exp;
  Likelihood likelihood = Likelihood::Poisson;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double log_tau = 0.0;

  [[nodiscard]] Index hidden() const noexcept { return W1.rows(); }
  void validate() const;

  /// He-normal hidden weights, zero hidden bias, small output weights, output bias b2.
  static MlpModel init(Index input_dim, Index hidden, double b2, std::mt19937_64& rng);
};

void to_json(nlohmann::json& j, const MlpModel& m);
void from_json(const nlohmann::json& j, MlpModel& m);

double mlp_forward(const MlpModel& model, const VectorXd& x);
VectorXd mlp_forward(const MlpModel& model, const MatrixXd& X);

struct MlpGrad {
  MatrixXd W1;
  VectorXd b1;
  VectorXd w2;
  double b2 = 0.0;
  double log_tau = 0.0;
};

/// Minimization objective
///   NLL / b + lambda1 (f^T L f + eps ||f||^2) / b_N^2 + lambda2 l2 / b_N^2
/// with b bags and b_N individuals in the batch; l2 is the bag manifold penalty
/// on per-bag mean f, using mean member covariates as bag embeddings.
double mlp_objective(const MlpModel& model, const BagBatch& batch, const ManifoldRegularizer* laplacian = nullptr,
                     const BagCovariates* bag_cov = nullptr, MlpGrad* grad = nullptr,
                     const std::vector<MatrixXd>* manifold_cache = nullptr);

}  // namespace aggva
