#pragma once

// Stationary covariance functions on covariate rows, kernel-matrix assembly
// and a jittered Cholesky factorization.
//
// Hyperparameters are held as logs. Gradients are always taken with respect
// to those log-parameters, in the order returned by KernelSpec::param_names().

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <string>
#include <string_view>
#include <vector>

namespace aggva {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class KernelFamily { Rbf, Ard, Matern32, Additive };

std::string_view to_string(KernelFamily f);
KernelFamily kernel_family_from_string(std::string_view s);

/// Kernel family plus log-hyperparameters.
///
///  Rbf       gamma * exp(-|x-y|^2 / (2 l^2))           one shared lengthscale
///  Ard       gamma * exp(-1/2 sum_k (x_k-y_k)^2 / l_k)  one l_k per active dim
///  Matern32  gamma * (1 + sqrt3 d/rho) exp(-sqrt3 d/rho)  log_lengthscales = {log rho}
///  Additive  sum of children
///
/// An empty active_dims means "all covariate dimensions".
struct KernelSpec {
  KernelFamily family = KernelFamily::Rbf;
  double log_scale = 0.0;
  std::vector<double> log_lengthscales{0.0};
  std::vector<int> active_dims;
  std::vector<KernelSpec> children;

  static KernelSpec rbf(double lengthscale, double scale = 1.0, std::vector<int> dims = {});
  static KernelSpec ard(const std::vector<double>& lengthscales, double scale = 1.0, std::vector<int> dims = {});
  static KernelSpec matern32(double range, double scale = 1.0, std::vector<int> dims = {});
  static KernelSpec additive(std::vector<KernelSpec> children);

  [[nodiscard]] Index num_params() const;
  [[nodiscard]] VectorXd params() const;
  void set_params(const VectorXd& theta);
  [[nodiscard]] std::vector<std::string> param_names() const;

  /// Throws DimensionMismatch / DataError when the spec cannot act on `input_dim` covariates.
  void validate(Index input_dim) const;

  /// k(x, x); identical for every x because all families are stationary.
  [[nodiscard]] double variance() const;

  bool operator==(const KernelSpec&) const = default;
};

void to_json(nlohmann::json& j, const KernelSpec& k);
void from_json(const nlohmann::json& j, KernelSpec& k);

double kernel_eval(const KernelSpec& spec, const Eigen::Ref<const VectorXd>& x, const Eigen::Ref<const VectorXd>& y);

/// Value plus d k / d theta (log-parameters) written into `grad` (size num_params()).
double kernel_eval_grad(const KernelSpec& spec, const Eigen::Ref<const VectorXd>& x,
                        const Eigen::Ref<const VectorXd>& y, Eigen::Ref<VectorXd> grad);

/// Rows of X and Y are points. Entry (i,j) = k(X_i, Y_j).
MatrixXd kernel_matrix(const KernelSpec& spec, const MatrixXd& X, const MatrixXd& Y);
/// Symmetric Gram matrix of X.
MatrixXd kernel_matrix(const KernelSpec& spec, const MatrixXd& X);

/// sum_ij G_ij dK_ij/dtheta for K = kernel_matrix(spec, X, Y).
VectorXd kernel_param_contract(const KernelSpec& spec, const MatrixXd& X, const MatrixXd& Y, const MatrixXd& G);
/// sum_i g_i d k(X_i, X_i)/dtheta.
VectorXd kernel_param_contract_diag(const KernelSpec& spec, double g_sum);
/// Row j of the result: sum_i G_ij d k(X_i, Y_j) / d Y_j.
MatrixXd kernel_input_contract(const KernelSpec& spec, const MatrixXd& X, const MatrixXd& Y, const MatrixXd& G);

/// Lower Cholesky factor of A + jitter * I.
class CholeskyFactor {
 public:
  CholeskyFactor() = default;
  CholeskyFactor(MatrixXd L, double jitter) : L_(std::move(L)), jitter_(jitter) {}

  [[nodiscard]] const MatrixXd& L() const noexcept { return L_; }
  [[nodiscard]] double jitter() const noexcept { return jitter_; }
  [[nodiscard]] Index size() const noexcept { return L_.rows(); }

  /// (A + jI)^{-1} B
  [[nodiscard]] MatrixXd solve(const MatrixXd& B) const;
  [[nodiscard]] VectorXd solve(const VectorXd& b) const;
  /// L^{-1} B
  [[nodiscard]] MatrixXd solve_lower(const MatrixXd& B) const;
  [[nodiscard]] double log_det() const;

 private:
  MatrixXd L_;
  double jitter_ = 0.0;
};

/// Tries jitter 0, then jitter_base * mean(diag A) * 10^k for k = 0..6.
/// Throws NotPositiveDefinite naming `role` when every level fails.
CholeskyFactor safe_cholesky(const MatrixXd& A, double jitter_base = 1e-6, std::string_view role = "matrix");

}  // namespace aggva
