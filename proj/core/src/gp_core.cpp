#include "aggva/gp_core.hpp"

#include "aggva/error.hpp"
#include "aggva/json_eigen.hpp"

#include <cmath>
#include <limits>

namespace aggva {

MatrixXd VariationalState::chol_factor() const {
  MatrixXd L = sigma_factor.triangularView<Eigen::Lower>();
  L.diagonal() = sigma_factor.diagonal().array().exp().matrix();
  return L;
}

MatrixXd VariationalState::sigma() const {
  const MatrixXd L = chol_factor();
  return L * L.transpose();
}

void VariationalState::set_sigma(const MatrixXd& s) {
  const CholeskyFactor f = safe_cholesky(s, 0.0, "Sigma_u");
  sigma_factor = f.L();
  sigma_factor.diagonal() = f.L().diagonal().array().log().matrix();
}

void VariationalState::validate() const {
  const Index m = W.rows();
  if (m < 1) throw DataError("variational state needs at least one landmark");
  if (eta.size() != m) throw DataError("eta_u has " + std::to_string(eta.size()) + " entries, expected " + std::to_string(m));
  if (sigma_factor.rows() != m || sigma_factor.cols() != m) throw DataError("sigma_factor must be m x m");
  if (!W.allFinite() || !eta.allFinite() || !std::isfinite(mu0)) throw DataError("variational state has non-finite entries");
  const MatrixXd lower = sigma_factor.triangularView<Eigen::Lower>();
  if (!lower.allFinite()) throw DataError("sigma_factor has non-finite entries");
  kernel.validate(W.cols());
}

VariationalState VariationalState::from_prior(MatrixXd W, KernelSpec kernel, double mu0, double jitter_base) {
  VariationalState s;
  const MatrixXd K = kernel_matrix(kernel, W);
  const CholeskyFactor f = safe_cholesky(K, jitter_base, "K_WW");
  s.W = std::move(W);
  s.kernel = std::move(kernel);
  s.mu0 = mu0;
  s.eta = VectorXd::Constant(s.W.rows(), mu0);
  s.sigma_factor = f.L();
  s.sigma_factor.diagonal() = f.L().diagonal().array().log().matrix();
  return s;
}

void to_json(nlohmann::json& j, const VariationalState& s) {
  j = nlohmann::json{{"version", 1},
                     {"kernel", s.kernel},
                     {"W", json_eigen::from_matrix(s.W)},
                     {"eta_u", json_eigen::from_vector(s.eta)},
                     {"sigma_factor", json_eigen::from_matrix(MatrixXd(s.sigma_factor.triangularView<Eigen::Lower>()))},
                     {"mu0", s.mu0},
                     {"optimize_landmarks", s.optimize_landmarks}};
}

void from_json(const nlohmann::json& j, VariationalState& s) {
  if (j.value("version", 0) != 1) throw DataError("unsupported variational state checkpoint version");
  s.kernel = j.at("kernel").get<KernelSpec>();
  s.W = json_eigen::to_matrix(j.at("W"));
  s.eta = json_eigen::to_vector(j.at("eta_u"));
  s.sigma_factor = json_eigen::to_matrix(j.at("sigma_factor"));
  s.mu0 = j.at("mu0").get<double>();
  s.optimize_landmarks = j.value("optimize_landmarks", false);
  s.validate();
}

VariationalGrad VariationalGrad::zeros(const VariationalState& s) {
  VariationalGrad g;
  g.eta = VectorXd::Zero(s.eta.size());
  g.sigma_factor = MatrixXd::Zero(s.eta.size(), s.eta.size());
  g.mu0 = 0.0;
  g.kernel = VectorXd::Zero(s.kernel.num_params());
  g.W = MatrixXd::Zero(s.W.rows(), s.W.cols());
  return g;
}

GpEvaluator::GpEvaluator(const VariationalState& state, double jitter_base)
    : state_(state), jitter_base_(jitter_base) {
  const Index m = state.num_landmarks();
  kww_raw_ = kernel_matrix(state.kernel, state.W);
  kww_ = safe_cholesky(kww_raw_, jitter_base_, "K_WW");
  sigma_chol_ = state.chol_factor();
  sigma_ = sigma_chol_ * sigma_chol_.transpose();
  alpha_ = kww_.solve(VectorXd(state.eta.array() - state.mu0));
  const MatrixXd Linv = kww_.solve_lower(MatrixXd::Identity(m, m));
  const MatrixXd A = Linv * sigma_chol_;
  const MatrixXd inner = MatrixXd::Identity(m, m) - A * A.transpose();
  C_ = Linv.transpose() * inner * Linv;
  C_ = 0.5 * (C_ + C_.transpose());

  h_ = VectorXd::Zero(m);
  Q_ = MatrixXd::Zero(m, m);
  g_kernel_ = VectorXd::Zero(state.kernel.num_params());
  g_W_ = MatrixXd::Zero(m, state.W.cols());
}

GaussianMarginal GpEvaluator::moments(const MatrixXd& X, CovMode mode, MatrixXd* kxw_out) const {
  if (X.rows() == 0) throw DataError("marginal_moments: empty bag");
  if (X.cols() != state_.W.cols())
    throw DimensionMismatch("marginal_moments: bag has " + std::to_string(X.cols()) + " covariates, landmarks have " +
                            std::to_string(state_.W.cols()));
  MatrixXd kxw = kernel_matrix(state_.kernel, X, state_.W);
  GaussianMarginal out;
  out.mode = mode;
  out.mean = (kxw * alpha_).array() + state_.mu0;
  const MatrixXd V = kxw * C_;
  if (mode == CovMode::Full) {
    out.cov = kernel_matrix(state_.kernel, X) - V * kxw.transpose();
    out.cov = 0.5 * (out.cov + out.cov.transpose());
    out.var = out.cov.diagonal().cwiseMax(0.0);
  } else {
    out.var = (state_.kernel.variance() - (V.array() * kxw.array()).rowwise().sum()).matrix().cwiseMax(0.0);
  }
  if (kxw_out) *kxw_out = std::move(kxw);
  return out;
}

double GpEvaluator::kl() const {
  const Index m = state_.num_landmarks();
  const MatrixXd A = kww_.solve_lower(sigma_chol_);
  const double trace = A.squaredNorm();
  const double logdet_sigma = 2.0 * sigma_chol_.diagonal().array().log().sum();
  const VectorXd e = state_.eta.array() - state_.mu0;
  return 0.5 * (trace + kww_.log_det() - logdet_sigma - static_cast<double>(m) + e.dot(alpha_));
}

void GpEvaluator::backprop_bag(const MatrixXd& X, const MatrixXd& kxw, const VectorXd& g_mean, const MatrixXd& g_cov,
                               CovMode mode) {
  h_.noalias() += kxw.transpose() * g_mean;
  gm_sum_ += g_mean.sum();
  MatrixXd g_kxw = g_mean * alpha_.transpose();
  if (mode == CovMode::Full) {
    const MatrixXd Gs = 0.5 * (g_cov + g_cov.transpose());
    const MatrixXd GK = Gs * kxw;
    Q_.noalias() += kxw.transpose() * GK;
    g_kxw.noalias() -= 2.0 * GK * C_;
    g_kernel_ += kernel_param_contract(state_.kernel, X, X, Gs);
  } else {
    const VectorXd g = g_cov.col(0);
    const MatrixXd GK = g.asDiagonal() * kxw;
    Q_.noalias() += kxw.transpose() * GK;
    g_kxw.noalias() -= 2.0 * GK * C_;
    g_kernel_ += kernel_param_contract_diag(state_.kernel, g.sum());
  }
  g_kernel_ += kernel_param_contract(state_.kernel, X, state_.W, g_kxw);
  if (state_.optimize_landmarks) g_W_ += kernel_input_contract(state_.kernel, X, state_.W, g_kxw);
}

void GpEvaluator::add_kl(double weight) { kl_weight_ += weight; }

VariationalGrad GpEvaluator::finish() const {
  const Index m = state_.num_landmarks();
  VariationalGrad g = VariationalGrad::zeros(state_);
  const double kappa = kl_weight_;

  const MatrixXd Ki = kww_.solve(MatrixXd(MatrixXd::Identity(m, m)));
  const VectorXd beta = kww_.solve(h_);
  const MatrixXd KiQKi = Ki * Q_ * Ki;
  const MatrixXd P = Ki * sigma_ * Ki;

  g.eta = beta - kappa * alpha_;
  g.mu0 = gm_sum_ - beta.sum() + kappa * alpha_.sum();

  MatrixXd g_sigma = KiQKi;
  MatrixXd g_K = -beta * alpha_.transpose() + KiQKi - P * Q_ * Ki - Ki * Q_ * P;
  if (kappa != 0.0) {
    const MatrixXd sigma_inv = [&] {
      const MatrixXd Linv = sigma_chol_.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(m, m));
      return MatrixXd(Linv.transpose() * Linv);
    }();
    g_sigma -= 0.5 * kappa * (Ki - sigma_inv);
    g_K -= 0.5 * kappa * (Ki - P - alpha_ * alpha_.transpose());
  }

  MatrixXd gL = (g_sigma + g_sigma.transpose()) * sigma_chol_;
  gL = MatrixXd(gL.triangularView<Eigen::Lower>());
  gL.diagonal() = gL.diagonal().cwiseProduct(sigma_chol_.diagonal());
  g.sigma_factor = std::move(gL);

  g.kernel = g_kernel_ + kernel_param_contract(state_.kernel, state_.W, state_.W, g_K);
  if (state_.optimize_landmarks) {
    g.W = g_W_ + kernel_input_contract(state_.kernel, state_.W, state_.W, MatrixXd(g_K + g_K.transpose()));
  }
  return g;
}

GaussianMarginal marginal_moments(const VariationalState& state, const MatrixXd& Xbag, CovMode mode,
                                  double jitter_base) {
  const GpEvaluator ev(state, jitter_base);
  return ev.moments(Xbag, mode);
}

double kl_term(const VariationalState& state, double jitter_base) {
  const GpEvaluator ev(state, jitter_base);
  return ev.kl();
}

namespace {

double uniform01(std::mt19937_64& rng) {
  // 53-bit mantissa from one draw; independent of std::uniform_real_distribution's implementation.
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

Index nearest_center(const MatrixXd& C, const Eigen::Ref<const Eigen::RowVectorXd>& x, double& dist2) {
  Index best = 0;
  dist2 = std::numeric_limits<double>::infinity();
  for (Index c = 0; c < C.rows(); ++c) {
    const double d = (C.row(c) - x).squaredNorm();
    if (d < dist2) {
      dist2 = d;
      best = c;
    }
  }
  return best;
}

}  // namespace

KMeansResult kmeans_pp(const MatrixXd& X, Index k, std::mt19937_64& rng, int max_iter, double tol) {
  const Index n = X.rows();
  if (k < 1) throw ConfigError("k-means needs at least one center");
  if (k > n) throw ConfigError("cannot place " + std::to_string(k) + " landmarks among " + std::to_string(n) + " points");

  KMeansResult res;
  res.centers.resize(k, X.cols());
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);
  Index first = static_cast<Index>(uniform01(rng) * static_cast<double>(n));
  first = std::min(first, n - 1);
  res.centers.row(0) = X.row(first);
  chosen[static_cast<std::size_t>(first)] = 1;
  VectorXd d2 = (X.rowwise() - X.row(first)).rowwise().squaredNorm();
  for (Index c = 1; c < k; ++c) {
    const double total = d2.sum();
    Index pick = -1;
    if (total > 0.0) {
      const double r = uniform01(rng) * total;
      double acc = 0.0;
      for (Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (acc > r && d2(i) > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0)
        for (Index i = n - 1; i >= 0; --i)
          if (d2(i) > 0.0) {
            pick = i;
            break;
          }
    } else {
      // every point coincides with a center: take the first unused row
      for (Index i = 0; i < n; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) {
          pick = i;
          break;
        }
    }
    res.centers.row(c) = X.row(pick);
    chosen[static_cast<std::size_t>(pick)] = 1;
    d2 = d2.cwiseMin((X.rowwise() - X.row(pick)).rowwise().squaredNorm());
  }

  res.assignment.assign(static_cast<std::size_t>(n), 0);
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iter; ++it) {
    double inertia = 0.0;
    for (Index i = 0; i < n; ++i) {
      double d = 0.0;
      res.assignment[static_cast<std::size_t>(i)] = nearest_center(res.centers, X.row(i), d);
      inertia += d;
    }
    res.inertia = inertia;
    res.iterations = it + 1;
    if (inertia == 0.0 || (std::isfinite(prev) && std::abs(prev - inertia) <= tol * std::max(prev, 1e-300))) break;
    prev = inertia;
    MatrixXd sums = MatrixXd::Zero(k, X.cols());
    std::vector<Index> counts(static_cast<std::size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
      const Index a = res.assignment[static_cast<std::size_t>(i)];
      sums.row(a) += X.row(i);
      ++counts[static_cast<std::size_t>(a)];
    }
    for (Index c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0)
        res.centers.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }
  return res;
}

MatrixXd select_landmarks(const MatrixXd& X, Index m, std::mt19937_64& rng) { return kmeans_pp(X, m, rng).centers; }

MatrixXd select_landmarks_per_bag(const MatrixXd& X, const std::vector<std::vector<Index>>& bags) {
  MatrixXd W(static_cast<Index>(bags.size()), X.cols());
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const auto& members = bags[b];
    if (members.empty()) throw DataError("cannot place a landmark in an empty bag");
    Eigen::RowVectorXd centroid = Eigen::RowVectorXd::Zero(X.cols());
    for (Index i : members) centroid += X.row(i);
    centroid /= static_cast<double>(members.size());
    Index best = members.front();
    double best_d = std::numeric_limits<double>::infinity();
    for (Index i : members) {
      const double d = (X.row(i) - centroid).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    W.row(static_cast<Index>(b)) = X.row(best);
  }
  return W;
}

}  // namespace aggva
