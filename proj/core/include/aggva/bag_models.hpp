#pragma once

// Bag-likelihood evidence lower bounds for the sparse variational GP and the
// per-individual posterior predictive distributions they induce.

#include "aggva/bags.hpp"
#include "aggva/gp_core.hpp"

#include <nlohmann/json.hpp>

namespace aggva {

// ---------------------------------------------------------------------------
// Building blocks

/// Second-order expansion of E log(sum_i p_i v_i^2), v ~ N(m, S), around E = m'Pm + tr(SP):
///   log E - (2 m'PSPm + tr((SP)^2)) / E^2
/// Throws DegenerateBag when E <= 0.
double taylor_log_quadform(const VectorXd& m, const MatrixXd& S, const VectorXd& p);
/// Same value; also writes d/dm and d/dS (symmetric).
double taylor_log_quadform(const VectorXd& m, const MatrixXd& S, const VectorXd& p, VectorXd& g_m, MatrixXd& g_S);

/// log(sum_i w_i exp(m_i)), a lower bound on E log(sum_i w_i exp(v_i)) for any
/// q with marginal means m. Computed with a max shift. Throws DegenerateBag
/// when every weight is zero.
double logsum_lower_bound(const VectorXd& m, const VectorXd& w);
/// Also writes the gradient (softmax of log w + m).
double logsum_lower_bound(const VectorXd& m, const VectorXd& w, VectorXd& g_m);

/// Lower bound on E[-1 / sum_i w_i exp(v_i)] with v_i ~ N(m_i, s_i):
///   -1 / sum_i w_i exp(m_i - s_i/2)
double exponential_fterm_bound(const VectorXd& m, const VectorXd& s, const VectorXd& w);

// ---------------------------------------------------------------------------
// ELBOs

/// Everything trainable in the variational bag model.
struct VbaggModel {
  VariationalState state;
  Likelihood likelihood = Likelihood::Poisson;
  Link link = Link::Sq;
  VectorXd log_tau = VectorXd::Zero(1);  // Normal only: size 1 (shared) or one per training bag
  double jitter_base = 1e-6;

  void validate() const;
};

void to_json(nlohmann::json& j, const VbaggModel& m);
void from_json(const nlohmann::json& j, VbaggModel& m);

struct ElboResult {
  double value = 0.0;
  double kl = 0.0;
  VariationalGrad grad;
  VectorXd g_log_tau;
};

/// Sum of per-bag terms minus batch.kl_share() * KL. Includes -log(y!) for Poisson.
ElboResult vbagg_elbo(const VbaggModel& model, const BagBatch& batch, bool want_grad);

double poisson_elbo_sq(const VariationalState& state, const BagBatch& batch);
double poisson_elbo_exp(const VariationalState& state, const BagBatch& batch);
double normal_elbo(const VariationalState& state, const BagBatch& batch, const VectorXd& log_tau);
/// Only the Exp link is defined; Sq throws Unsupported because E[1/v^2] diverges under a Gaussian.
double exponential_elbo(const VariationalState& state, const BagBatch& batch, Link link = Link::Exp);

// ---------------------------------------------------------------------------
// Predictive distributions

/// Law of lambda = Psi(f) with f ~ N(m, s).
///   Exp       log-normal
///   Sq        s * (scaled non-central chi^2 with one dof)
///   Identity  N(m, s)
/// `weight` is the population multiplier applied when aggregating bag totals;
/// mean, cdf and quantile describe the per-unit value.
struct PredictiveDist {
  Link link = Link::Exp;
  double m = 0.0;
  double s = 0.0;
  double weight = 1.0;
};

void to_json(nlohmann::json& j, const PredictiveDist& d);
void from_json(const nlohmann::json& j, PredictiveDist& d);

PredictiveDist predictive_individual(const VariationalState& state, const VectorXd& x, Link link, double weight = 1.0);
/// Batched version for many rows; shares one factorization of K_WW.
std::vector<PredictiveDist> predictive_rows(const VariationalState& state, const MatrixXd& X, Link link);

double predictive_mean(const PredictiveDist& d);
double predictive_cdf(const PredictiveDist& d, double t);
double predictive_quantile(const PredictiveDist& d, double alpha);

double normal_cdf(double z);

}  // namespace aggva
