#include "aggva/baselines.hpp"

#include "aggva/error.hpp"
#include "aggva/gp_core.hpp"
#include "aggva/json_eigen.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace aggva {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double weight_sq_sum(const BagData& bag) { return bag.weights.squaredNorm(); }

}  // namespace

double bag_nll_from_mean(Likelihood lik, double y, double mean, double tau, double w_sq_sum) {
  switch (lik) {
    case Likelihood::Poisson:
      if (mean <= 0.0) return y == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
      return mean - y * std::log(mean) + std::lgamma(y + 1.0);
    case Likelihood::Normal: {
      const double D = tau * w_sq_sum;
      const double r = y - mean;
      return 0.5 * r * r / D + 0.5 * (kLog2Pi + std::log(D));
    }
    case Likelihood::Exponential:
      if (mean <= 0.0) return std::numeric_limits<double>::infinity();
      return std::log(mean) + y / mean;
  }
  return 0.0;
}

double point_bag_nll(Likelihood lik, Link link, const BagData& bag, const VectorXd& f, double log_tau, VectorXd* g_f,
                     double* g_log_tau) {
  const Index n = f.size();
  if (n != bag.weights.size()) throw DimensionMismatch("bag '" + bag.id + "': f does not match members");
  double mu = 0.0;
  for (Index i = 0; i < n; ++i) mu += bag.weights(i) * link_apply(link, f(i));

  double d_mu = 0.0;
  double value = 0.0;
  switch (lik) {
    case Likelihood::Poisson:
      if (mu <= 0.0) {
        if (bag.y != 0.0) throw DegenerateBag(bag.id, "predicted bag mean is zero but y > 0");
        value = 0.0;
        d_mu = 1.0;
      } else {
        value = mu - bag.y * std::log(mu) + std::lgamma(bag.y + 1.0);
        d_mu = 1.0 - bag.y / mu;
      }
      break;
    case Likelihood::Normal: {
      const double D = std::exp(log_tau) * weight_sq_sum(bag);
      if (!(D > 0.0)) throw DegenerateBag(bag.id, "all weights are zero");
      const double r = bag.y - mu;
      value = 0.5 * r * r / D + 0.5 * (kLog2Pi + std::log(D));
      d_mu = -r / D;
      if (g_log_tau) *g_log_tau += -0.5 * r * r / D + 0.5;
      break;
    }
    case Likelihood::Exponential:
      if (!(mu > 0.0)) throw DegenerateBag(bag.id, "predicted bag mean is not positive");
      value = std::log(mu) + bag.y / mu;
      d_mu = 1.0 / mu - bag.y / (mu * mu);
      break;
  }
  if (g_f) {
    g_f->resize(n);
    for (Index i = 0; i < n; ++i) (*g_f)(i) = d_mu * bag.weights(i) * link_derivative(link, f(i));
  }
  return value;
}

// ---------------------------------------------------------------------------

double ConstantModel::rate_for(const std::string& bag_id) const {
  auto it = bag_rate.find(bag_id);
  return it == bag_rate.end() ? global_rate : it->second;
}

ConstantModel constant_fit(const BagBatch& batch, Likelihood lik) {
  ConstantModel m;
  m.likelihood = lik;
  double y_sum = 0.0;
  double p_sum = 0.0;
  for (const BagData* b : batch.bags) {
    const double pop = b->weights.sum();
    if (!(pop > 0.0)) throw DegenerateBag(b->id, "zero population");
    m.bag_rate[b->id] = b->y / pop;
    y_sum += b->y;
    p_sum += pop;
  }
  if (!(p_sum > 0.0)) throw DataError("constant model needs at least one bag with positive population");
  m.global_rate = y_sum / p_sum;
  return m;
}

void to_json(nlohmann::json& j, const ConstantModel& m) {
  j = nlohmann::json{{"likelihood", std::string(to_string(m.likelihood))},
                     {"bag_rate", m.bag_rate},
                     {"global_rate", m.global_rate},
                     {"log_tau", m.log_tau}};
}

void from_json(const nlohmann::json& j, ConstantModel& m) {
  m.likelihood = likelihood_from_string(j.at("likelihood").get<std::string>());
  m.bag_rate = j.at("bag_rate").get<std::map<std::string, double>>();
  m.global_rate = j.at("global_rate").get<double>();
  m.log_tau = j.value("log_tau", 0.0);
}

// ---------------------------------------------------------------------------

BaggedDataset bag_pixel_aggregate(const BaggedDataset& ds) {
  const Index nb = ds.num_bags();
  BaggedDataset out;
  out.X = MatrixXd::Zero(nb, ds.dim());
  if (ds.S.size()) out.S = MatrixXd::Zero(nb, ds.S.cols());
  out.p.resize(nb);
  out.bags = ds.bags;
  out.meta = ds.meta;
  out.meta.generator = "bag_pixel(" + ds.meta.generator + ")";
  for (Index b = 0; b < nb; ++b) {
    const auto& bag = ds.bags[static_cast<std::size_t>(b)];
    double pop = 0.0;
    for (Index i : bag.members) pop += ds.p(i);
    if (!(pop > 0.0)) throw DegenerateBag(bag.id, "zero population");
    for (Index i : bag.members) {
      out.X.row(b) += (ds.p(i) / pop) * ds.X.row(i);
      if (ds.S.size()) out.S.row(b) += (ds.p(i) / pop) * ds.S.row(i);
    }
    out.p(b) = pop;
    out.individual_id.push_back(bag.id);
    out.bag_of.push_back(b);
    out.bags[static_cast<std::size_t>(b)].p_total = pop;
  }
  out.rebuild_index();
  return out;
}

// ---------------------------------------------------------------------------

NystromFeatureMap::NystromFeatureMap(MatrixXd W, KernelSpec kernel, double rel_floor)
    : W_(std::move(W)), kernel_(std::move(kernel)) {
  const MatrixXd K = kernel_matrix(kernel_, W_);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(K);
  if (eig.info() != Eigen::Success) throw NotPositiveDefinite("K_WW (Nystrom)");
  VectorXd lam = eig.eigenvalues();
  const double floor = rel_floor * std::max(lam.maxCoeff(), 0.0);
  if (!(floor > 0.0)) throw NotPositiveDefinite("K_WW (Nystrom)");
  for (Index k = 0; k < lam.size(); ++k) {
    if (lam(k) < floor) {
      lam(k) = floor;
      floor_hit_ = true;
    }
  }
  const MatrixXd& V = eig.eigenvectors();
  inv_sqrt_ = V * lam.cwiseSqrt().cwiseInverse().asDiagonal() * V.transpose();
}

MatrixXd NystromFeatureMap::map(const MatrixXd& X) const {
  if (X.cols() != W_.cols()) throw DimensionMismatch("Nystrom features: covariate dimension mismatch");
  return kernel_matrix(kernel_, X, W_) * inv_sqrt_;
}

RffMap::RffMap(const KernelSpec& kernel, Index input_dim, Index n_features, std::uint64_t seed) {
  if (n_features < 1) throw ConfigError("random Fourier features need at least one feature");
  std::vector<const KernelSpec*> comps;
  if (kernel.family == KernelFamily::Additive) {
    for (const auto& c : kernel.children) comps.push_back(&c);
  } else {
    comps.push_back(&kernel);
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 2.0 * M_PI);
  std::chi_squared_distribution<double> chi3(3.0);
  const Index R = n_features;
  const Index total = R * static_cast<Index>(comps.size());
  omega_ = MatrixXd::Zero(input_dim, total);
  phase_.resize(total);
  scale_.resize(total);
  Index col = 0;
  for (const KernelSpec* c : comps) {
    if (c->family == KernelFamily::Additive) throw Unsupported("random Fourier features for nested additive kernels");
    std::vector<int> dims = c->active_dims;
    if (dims.empty())
      for (Index k = 0; k < input_dim; ++k) dims.push_back(static_cast<int>(k));
    const double gamma = std::exp(c->log_scale);
    for (Index r = 0; r < R; ++r, ++col) {
      const double t_scale = c->family == KernelFamily::Matern32 ? 1.0 / std::sqrt(chi3(rng) / 3.0) : 1.0;
      for (std::size_t k = 0; k < dims.size(); ++k) {
        double sd = 1.0;
        switch (c->family) {
          case KernelFamily::Rbf: sd = std::exp(-c->log_lengthscales[0]); break;
          case KernelFamily::Ard: sd = std::exp(-0.5 * c->log_lengthscales[k]); break;
          case KernelFamily::Matern32: sd = std::exp(-c->log_lengthscales[0]) * t_scale; break;
          case KernelFamily::Additive: break;
        }
        omega_(dims[k], col) = sd * normal(rng);
      }
      phase_(col) = unif(rng);
      scale_(col) = std::sqrt(2.0 * gamma / static_cast<double>(R));
    }
  }
}

MatrixXd RffMap::map(const MatrixXd& X) const {
  if (X.cols() != omega_.rows()) throw DimensionMismatch("random Fourier features: covariate dimension mismatch");
  MatrixXd Z = X * omega_;
  Z.rowwise() += phase_.transpose();
  return (Z.array().cos().rowwise() * scale_.transpose().array()).matrix();
}

// ---------------------------------------------------------------------------

MatrixXd graph_laplacian(const MatrixXd& K) {
  MatrixXd L = -K;
  L.diagonal() += K.rowwise().sum();
  return L;
}

double exact_laplacian_penalty(const VectorXd& f, const MatrixXd& K, VectorXd* grad) {
  const VectorXd deg = K.rowwise().sum();
  const VectorXd Kf = K * f;
  if (grad) *grad = 2.0 * (deg.cwiseProduct(f) - Kf);
  return f.dot(deg.cwiseProduct(f)) - f.dot(Kf);
}

double manifold_penalty(const VectorXd& f, const MatrixXd& Phi, VectorXd* grad) {
  if (Phi.rows() != f.size()) throw DimensionMismatch("manifold penalty: features are not row-aligned with f");
  const VectorXd deg = Phi * (Phi.transpose() * VectorXd::Ones(f.size()));
  const VectorXd pf = Phi.transpose() * f;
  if (grad) *grad = 2.0 * (deg.cwiseProduct(f) - Phi * pf);
  return f.dot(deg.cwiseProduct(f)) - pf.squaredNorm();
}

double bag_manifold_penalty(const VectorXd& F, const MatrixXd& Kbag, VectorXd* grad) {
  const Index b = F.size();
  if (Kbag.rows() != b || Kbag.cols() != b) throw DimensionMismatch("bag manifold penalty: kernel size mismatch");
  double value = 0.0;
  if (grad) grad->setZero(b);
  for (Index l = 0; l < b; ++l)
    for (Index m = 0; m < b; ++m) {
      const double d = F(l) - F(m);
      value += d * d * Kbag(l, m);
      if (grad) {
        (*grad)(l) += 2.0 * d * Kbag(l, m);
        (*grad)(m) -= 2.0 * d * Kbag(l, m);
      }
    }
  return value;
}

double bag_manifold_penalty(const VectorXd& F, const MatrixXd& S, const MatrixXd& H, const KernelSpec& ks,
                            const KernelSpec& kh, VectorXd* grad) {
  if (S.size() == 0) throw Unsupported("bag-level manifold regularisation needs bag covariates s");
  const MatrixXd K = kernel_matrix(ks, S).cwiseProduct(kernel_matrix(kh, H));
  return bag_manifold_penalty(F, K, grad);
}

std::string_view to_string(LaplacianMode m) {
  switch (m) {
    case LaplacianMode::None: return "none";
    case LaplacianMode::Exact: return "exact";
    case LaplacianMode::Rff: return "rff";
    case LaplacianMode::Nystrom: return "nystrom";
  }
  return "?";
}

LaplacianMode laplacian_mode_from_string(std::string_view s) {
  if (s == "none") return LaplacianMode::None;
  if (s == "exact") return LaplacianMode::Exact;
  if (s == "rff") return LaplacianMode::Rff;
  if (s == "nystrom") return LaplacianMode::Nystrom;
  throw ConfigError("unknown laplacian mode '" + std::string(s) + "'");
}

void to_json(nlohmann::json& j, const LaplacianSpec& s) {
  j = nlohmann::json{{"mode", std::string(to_string(s.mode))}, {"kernel", s.kernel},
                     {"n_features", s.n_features},              {"n_landmarks", s.n_landmarks},
                     {"epsilon", s.epsilon},                    {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, LaplacianSpec& s) {
  s.mode = laplacian_mode_from_string(j.value("mode", std::string("rff")));
  if (j.contains("kernel")) s.kernel = j.at("kernel").get<KernelSpec>();
  s.n_features = j.value("n_features", Index{2000});
  s.n_landmarks = j.value("n_landmarks", Index{100});
  s.epsilon = j.value("epsilon", 1e-8);
  s.seed = j.value("seed", std::uint64_t{0});
}

ManifoldRegularizer::ManifoldRegularizer(LaplacianSpec spec, const MatrixXd& X_source) : spec_(std::move(spec)) {
  spec_.kernel.validate(X_source.cols());
  if (spec_.mode == LaplacianMode::Rff) {
    rff_ = RffMap(spec_.kernel, X_source.cols(), spec_.n_features, spec_.seed);
  } else if (spec_.mode == LaplacianMode::Nystrom) {
    std::mt19937_64 rng(spec_.seed);
    const Index m = std::min<Index>(spec_.n_landmarks, X_source.rows());
    nystrom_ = NystromFeatureMap(select_landmarks(X_source, m, rng), spec_.kernel);
  }
}

MatrixXd ManifoldRegularizer::features(const MatrixXd& X) const {
  switch (spec_.mode) {
    case LaplacianMode::Rff: return rff_.map(X);
    case LaplacianMode::Nystrom: return nystrom_.map(X);
    default: return {};
  }
}

double ManifoldRegularizer::penalty(const std::vector<const BagData*>& bags, const VectorXd& f, VectorXd* grad,
                                    const std::vector<MatrixXd>* cache) const {
  if (!active()) {
    if (grad) grad->setZero(f.size());
    return 0.0;
  }
  Index n = 0;
  for (const BagData* b : bags) n += b->X.rows();
  if (n != f.size()) throw DimensionMismatch("manifold penalty: f does not match batch members");
  double value = 0.0;
  if (spec_.mode == LaplacianMode::Exact) {
    MatrixXd X(n, bags.empty() ? 0 : bags.front()->X.cols());
    Index row = 0;
    for (const BagData* b : bags) {
      X.middleRows(row, b->X.rows()) = b->X;
      row += b->X.rows();
    }
    value = exact_laplacian_penalty(f, kernel_matrix(spec_.kernel, X), grad);
  } else {
    Index cols = spec_.mode == LaplacianMode::Rff ? rff_.dim() : nystrom_.dim();
    MatrixXd Phi(n, cols);
    Index row = 0;
    for (const BagData* b : bags) {
      if (cache)
        Phi.middleRows(row, b->X.rows()) = (*cache)[static_cast<std::size_t>(b->index)];
      else
        Phi.middleRows(row, b->X.rows()) = features(b->X);
      row += b->X.rows();
    }
    value = manifold_penalty(f, Phi, grad);
  }
  value += spec_.epsilon * f.squaredNorm();
  if (grad) *grad += 2.0 * spec_.epsilon * f;
  return value;
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const NystromModel& m) {
  j = nlohmann::json{{"W", json_eigen::from_matrix(m.W)},
                     {"kernel", m.kernel},
                     {"beta", json_eigen::from_vector(m.beta)},
                     {"bias", m.bias},
                     {"log_gamma_prior", m.log_gamma_prior},
                     {"link", std::string(to_string(m.link))},
                     {"likelihood", std::string(to_string(m.likelihood))},
                     {"lambda1", m.lambda1},
                     {"log_tau", m.log_tau}};
}

void from_json(const nlohmann::json& j, NystromModel& m) {
  m.W = json_eigen::to_matrix(j.at("W"));
  m.kernel = j.at("kernel").get<KernelSpec>();
  m.beta = json_eigen::to_vector(j.at("beta"));
  m.bias = j.value("bias", 0.0);
  m.log_gamma_prior = j.value("log_gamma_prior", 0.0);
  m.link = link_from_string(j.at("link").get<std::string>());
  m.likelihood = likelihood_from_string(j.value("likelihood", std::string("poisson")));
  m.lambda1 = j.value("lambda1", 0.0);
  m.log_tau = j.value("log_tau", 0.0);
  if (m.beta.size() != m.W.rows()) throw DataError("Nystrom checkpoint: beta does not match landmarks");
}

VectorXd nystrom_predict_f(const NystromModel& model, const NystromFeatureMap& fmap, const MatrixXd& X) {
  VectorXd f = fmap.map(X) * model.beta;
  f.array() += model.bias;
  return f;
}

double nystrom_map_objective(const NystromModel& model, const NystromFeatureMap& fmap, const BagBatch& batch,
                             const ManifoldRegularizer* laplacian, NystromGrad* grad,
                             const std::vector<MatrixXd>* phi_cache, const std::vector<MatrixXd>* manifold_cache) {
  const Index m = model.beta.size();
  if (m != fmap.dim()) throw DimensionMismatch("Nystrom coefficients do not match the feature map");
  const bool use_lap = laplacian && laplacian->active() && model.lambda1 != 0.0;
  if (grad) {
    grad->beta = VectorXd::Zero(m);
    grad->bias = 0.0;
    grad->log_tau = 0.0;
  }
  Index n_total = 0;
  for (const BagData* b : batch.bags) n_total += b->X.rows();

  double value = 0.0;
  VectorXd f_all(use_lap ? n_total : 0);
  std::vector<const MatrixXd*> phis;
  std::vector<MatrixXd> owned;
  owned.reserve(batch.bags.size());
  Index row = 0;
  for (const BagData* b : batch.bags) {
    const MatrixXd* phi = nullptr;
    if (phi_cache) {
      phi = &(*phi_cache)[static_cast<std::size_t>(b->index)];
    } else {
      owned.push_back(fmap.map(b->X));
      phi = &owned.back();
    }
    phis.push_back(phi);
    VectorXd f = (*phi) * model.beta;
    f.array() += model.bias;
    VectorXd g_f;
    value += point_bag_nll(model.likelihood, model.link, *b, f, model.log_tau, grad ? &g_f : nullptr,
                           grad ? &grad->log_tau : nullptr);
    if (grad) {
      grad->beta += phi->transpose() * g_f;
      grad->bias += g_f.sum();
    }
    if (use_lap) f_all.segment(row, f.size()) = f;
    row += f.size();
  }

  const double gamma2 = std::exp(2.0 * model.log_gamma_prior);
  const double share = batch.kl_share();
  value += share * 0.5 * model.beta.squaredNorm() / gamma2;
  if (grad) grad->beta += share * model.beta / gamma2;

  if (use_lap && n_total > 0) {
    const double c = model.lambda1 / (static_cast<double>(n_total) * static_cast<double>(n_total));
    VectorXd g_pen;
    value += c * laplacian->penalty(batch.bags, f_all, grad ? &g_pen : nullptr, manifold_cache);
    if (grad) {
      row = 0;
      for (std::size_t k = 0; k < batch.bags.size(); ++k) {
        const Index nk = batch.bags[k]->X.rows();
        const auto seg = g_pen.segment(row, nk);
        grad->beta += c * phis[k]->transpose() * seg;
        grad->bias += c * seg.sum();
        row += nk;
      }
    }
  }
  return value;
}

// ---------------------------------------------------------------------------

void MlpModel::validate() const {
  if (W1.rows() < 1) throw DataError("MLP hidden width must be at least 1");
  if (b1.size() != W1.rows() || w2.size() != W1.rows()) throw DataError("MLP layer shapes are inconsistent");
  if (!W1.allFinite() || !b1.allFinite() || !w2.allFinite() || !std::isfinite(b2))
    throw DataError("MLP parameters are not finite");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw DataError("MLP regularisation weights must be nonnegative");
}

MlpModel MlpModel::init(Index input_dim, Index hidden, double b2, std::mt19937_64& rng) {
  if (hidden < 1) throw ConfigError("MLP hidden width must be at least 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  MlpModel m;
  m.W1.resize(hidden, input_dim);
  const double sd = std::sqrt(2.0 / static_cast<double>(input_dim));
  for (Index c = 0; c < input_dim; ++c)
    for (Index r = 0; r < hidden; ++r) m.W1(r, c) = sd * normal(rng);
  m.b1 = VectorXd::Zero(hidden);
  m.w2.resize(hidden);
  const double sd2 = 0.1 / std::sqrt(static_cast<double>(hidden));
  for (Index r = 0; r < hidden; ++r) m.w2(r) = sd2 * normal(rng);
  m.b2 = b2;
  return m;
}

void to_json(nlohmann::json& j, const MlpModel& m) {
  j = nlohmann::json{{"W1", json_eigen::from_matrix(m.W1)},
                     {"b1", json_eigen::from_vector(m.b1)},
                     {"w2", json_eigen::from_vector(m.w2)},
                     {"b2", m.b2},
                     {"link", std::string(to_string(m.link))},
                     {"likelihood", std::string(to_string(m.likelihood))},
                     {"lambda1", m.lambda1},
                     {"lambda2", m.lambda2},
                     {"log_tau", m.log_tau}};
}

void from_json(const nlohmann::json& j, MlpModel& m) {
  m.W1 = json_eigen::to_matrix(j.at("W1"));
  m.b1 = json_eigen::to_vector(j.at("b1"));
  m.w2 = json_eigen::to_vector(j.at("w2"));
  m.b2 = j.at("b2").get<double>();
  m.link = link_from_string(j.at("link").get<std::string>());
  m.likelihood = likelihood_from_string(j.value("likelihood", std::string("poisson")));
  m.lambda1 = j.value("lambda1", 0.0);
  m.lambda2 = j.value("lambda2", 0.0);
  m.log_tau = j.value("log_tau", 0.0);
  m.validate();
}

double mlp_forward(const MlpModel& model, const VectorXd& x) {
  const VectorXd a = (model.W1 * x + model.b1).cwiseMax(0.0);
  return model.w2.dot(a) + model.b2;
}

VectorXd mlp_forward(const MlpModel& model, const MatrixXd& X) {
  if (X.cols() != model.W1.cols()) throw DimensionMismatch("MLP: covariate dimension mismatch");
  MatrixXd Z = model.W1 * X.transpose();
  Z.colwise() += model.b1;
  VectorXd f = Z.cwiseMax(0.0).transpose() * model.w2;
  f.array() += model.b2;
  return f;
}

double mlp_objective(const MlpModel& model, const BagBatch& batch, const ManifoldRegularizer* laplacian,
                     const BagCovariates* bag_cov, MlpGrad* grad, const std::vector<MatrixXd>* manifold_cache) {
  const Index h = model.hidden();
  const Index d = model.W1.cols();
  const auto nb = static_cast<Index>(batch.bags.size());
  if (nb == 0) {
    if (grad) *grad = MlpGrad{MatrixXd::Zero(h, d), VectorXd::Zero(h), VectorXd::Zero(h), 0.0, 0.0};
    return 0.0;
  }
  Index n_total = 0;
  for (const BagData* b : batch.bags) n_total += b->X.rows();

  MatrixXd X(n_total, d);
  {
    Index row = 0;
    for (const BagData* b : batch.bags) {
      X.middleRows(row, b->X.rows()) = b->X;
      row += b->X.rows();
    }
  }
  MatrixXd Z = model.W1 * X.transpose();
  Z.colwise() += model.b1;
  const MatrixXd A = Z.cwiseMax(0.0);
  VectorXd f = A.transpose() * model.w2;
  f.array() += model.b2;

  VectorXd g_f = VectorXd::Zero(n_total);
  double g_log_tau = 0.0;
  double nll = 0.0;
  Index row = 0;
  for (const BagData* b : batch.bags) {
    const Index nk = b->X.rows();
    VectorXd gk;
    nll += point_bag_nll(model.likelihood, model.link, *b, f.segment(row, nk), model.log_tau,
                         grad ? &gk : nullptr, grad ? &g_log_tau : nullptr);
    if (grad) g_f.segment(row, nk) = gk / static_cast<double>(nb);
    row += nk;
  }
  double value = nll / static_cast<double>(nb);
  g_log_tau /= static_cast<double>(nb);

  const double bn2 = static_cast<double>(n_total) * static_cast<double>(n_total);
  if (laplacian && laplacian->active() && model.lambda1 != 0.0) {
    VectorXd g_pen;
    value += model.lambda1 / bn2 * laplacian->penalty(batch.bags, f, grad ? &g_pen : nullptr, manifold_cache);
    if (grad) g_f += model.lambda1 / bn2 * g_pen;
  }
  if (model.lambda2 != 0.0) {
    if (!bag_cov || bag_cov->S.size() == 0)
      throw Unsupported("bag-level manifold regularisation needs bag covariates s");
    VectorXd F(nb);
    MatrixXd S(nb, bag_cov->S.cols());
    MatrixXd H(nb, d);
    row = 0;
    for (Index k = 0; k < nb; ++k) {
      const BagData* b = batch.bags[static_cast<std::size_t>(k)];
      const Index nk = b->X.rows();
      F(k) = f.segment(row, nk).mean();
      H.row(k) = b->X.colwise().mean();
      S.row(k) = bag_cov->S.row(b->index);
      row += nk;
    }
    VectorXd g_F;
    value += model.lambda2 / bn2 * bag_manifold_penalty(F, S, H, bag_cov->ks, bag_cov->kh, grad ? &g_F : nullptr);
    if (grad) {
      row = 0;
      for (Index k = 0; k < nb; ++k) {
        const Index nk = batch.bags[static_cast<std::size_t>(k)]->X.rows();
        g_f.segment(row, nk).array() += model.lambda2 / bn2 * g_F(k) / static_cast<double>(nk);
        row += nk;
      }
    }
  }

  if (grad) {
    // G_Z(j, i) = w2_j [z_ji > 0] g_f(i)
    MatrixXd GZ = (Z.array() > 0.0).cast<double>().matrix();
    GZ = model.w2.asDiagonal() * GZ * g_f.asDiagonal();
    grad->W1 = GZ * X;
    grad->b1 = GZ.rowwise().sum();
    grad->w2 = A * g_f;
    grad->b2 = g_f.sum();
    grad->log_tau = g_log_tau;
  }
  return value;
}

}  // namespace aggva
