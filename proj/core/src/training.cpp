#include "aggva/training.hpp"

#include "aggva/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <thread>

namespace aggva {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double link_inverse(Link link, double rate) {
  switch (link) {
    case Link::Exp: return std::log(std::max(rate, 1e-3));
    case Link::Sq: return std::sqrt(std::max(rate, 0.0));
    case Link::Identity: return rate;
  }
  return rate;
}

double pooled_rate(const std::vector<BagData>& bags) {
  double y = 0.0;
  double p = 0.0;
  for (const auto& b : bags) {
    y += b.y;
    p += b.weights.sum();
  }
  return p > 0.0 ? y / p : 0.0;
}

MatrixXd stacked_members(const std::vector<BagData>& bags) {
  Index n = 0;
  for (const auto& b : bags) n += b.X.rows();
  MatrixXd X(n, bags.empty() ? 0 : bags.front().X.cols());
  Index row = 0;
  for (const auto& b : bags) {
    X.middleRows(row, b.X.rows()) = b.X;
    row += b.X.rows();
  }
  return X;
}

double median_pairwise_distance(const MatrixXd& P) {
  std::vector<double> d;
  for (Index i = 0; i < P.rows(); ++i)
    for (Index j = i + 1; j < P.rows(); ++j) d.push_back((P.row(i) - P.row(j)).norm());
  if (d.empty()) return 1.0;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  const double med = d[d.size() / 2];
  return med > 0.0 ? med : 1.0;
}

KernelSpec resolve_kernel(const ModelSpec& spec, const MatrixXd& W) {
  KernelSpec k = spec.kernel ? *spec.kernel : KernelSpec::rbf(spec.lengthscale > 0.0 ? spec.lengthscale
                                                                                     : median_pairwise_distance(W));
  k.validate(W.cols());
  return k;
}

std::vector<std::string> flat_names(const std::string& base, Index rows, Index cols) {
  std::vector<std::string> out;
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) out.push_back(base + "[" + std::to_string(r) + "," + std::to_string(c) + "]");
  return out;
}

std::vector<std::string> vec_names(const std::string& base, Index n) {
  std::vector<std::string> out;
  for (Index i = 0; i < n; ++i) out.push_back(base + "[" + std::to_string(i) + "]");
  return out;
}

// ---------------------------------------------------------------------------

class ConstantTrainable final : public Trainable {
 public:
  ConstantTrainable(std::string name, const std::vector<BagData>& bags, Likelihood lik)
      : name_(std::move(name)), model_(constant_fit(BagBatch::all(bags), lik)) {}
  [[nodiscard]] Index size() const override { return 0; }
  [[nodiscard]] VectorXd get() const override { return {}; }
  void set(const VectorXd&) override {}
  double loss(const BagBatch& batch, VectorXd* grad) override {
    if (grad) grad->resize(0);
    double v = 0.0;
    for (const BagData* b : batch.bags) v += bag_nll_from_mean(model_.likelihood, b->y, model_.rate_for(b->id) * b->weights.sum(),
                                                               std::exp(model_.log_tau), b->weights.squaredNorm());
    return v;
  }
  [[nodiscard]] std::string param_name(Index) const override { return {}; }
  [[nodiscard]] FittedModel snapshot() const override { return {name_, ModelFamily::Constant, model_}; }

 private:
  std::string name_;
  ConstantModel model_;
};

// With `whiten`, the trainable coordinates are v and L_v where
// eta = mu0 + L v and chol(Sigma_u) = L L_v, L = chol(K_WW). Same variational
// family, but Adam sees a well-conditioned geometry.
class VbaggTrainable final : public Trainable {
 public:
  VbaggTrainable(std::string name, VbaggModel model, bool learn_kernel, bool whiten)
      : name_(std::move(name)), model_(std::move(model)), learn_kernel_(learn_kernel), whiten_(whiten) {
    const Index m = model_.state.num_landmarks();
    const char* mean_name = whiten_ ? "v" : "eta_u";
    const char* factor_name = whiten_ ? "v_factor" : "sigma_factor";
    names_ = vec_names(mean_name, m);
    for (Index c = 0; c < m; ++c)
      for (Index r = c; r < m; ++r)
        names_.push_back(std::string(factor_name) + "[" + std::to_string(r) + "," + std::to_string(c) + "]");
    names_.push_back("mu0");
    if (learn_kernel_)
      for (const auto& n : model_.state.kernel.param_names()) names_.push_back("kernel." + n);
    if (model_.state.optimize_landmarks) {
      auto w = flat_names("W", m, model_.state.input_dim());
      names_.insert(names_.end(), w.begin(), w.end());
    }
    if (model_.likelihood == Likelihood::Normal) {
      auto t = vec_names("log_tau", model_.log_tau.size());
      names_.insert(names_.end(), t.begin(), t.end());
    }
    if (whiten_) {
      const auto& s = model_.state;
      refactor();
      const MatrixXd& L = kww_.L();
      v_ = L.triangularView<Eigen::Lower>().solve(VectorXd(s.eta.array() - s.mu0));
      const MatrixXd C = s.chol_factor();
      MatrixXd Lv = L.triangularView<Eigen::Lower>().solve(C);
      Lv = MatrixXd(Lv.triangularView<Eigen::Lower>());
      for (Index i = 0; i < m; ++i) Lv(i, i) = std::log(std::max(Lv(i, i), 1e-12));
      vf_ = std::move(Lv);
      apply_whitening();
    }
  }

  [[nodiscard]] Index size() const override { return static_cast<Index>(names_.size()); }

  [[nodiscard]] VectorXd get() const override {
    VectorXd t(size());
    Index k = 0;
    const auto& s = model_.state;
    const Index m = s.num_landmarks();
    const VectorXd& mean = whiten_ ? v_ : s.eta;
    const MatrixXd& factor = whiten_ ? vf_ : s.sigma_factor;
    t.segment(k, m) = mean;
    k += m;
    for (Index c = 0; c < m; ++c)
      for (Index r = c; r < m; ++r) t(k++) = factor(r, c);
    t(k++) = s.mu0;
    if (learn_kernel_) {
      const VectorXd kp = s.kernel.params();
      t.segment(k, kp.size()) = kp;
      k += kp.size();
    }
    if (s.optimize_landmarks) {
      t.segment(k, s.W.size()) = s.W.reshaped();
      k += s.W.size();
    }
    if (model_.likelihood == Likelihood::Normal) t.segment(k, model_.log_tau.size()) = model_.log_tau;
    return t;
  }

  void set(const VectorXd& t) override {
    Index k = 0;
    auto& s = model_.state;
    const Index m = s.num_landmarks();
    VectorXd& mean = whiten_ ? v_ : s.eta;
    MatrixXd& factor = whiten_ ? vf_ : s.sigma_factor;
    mean = t.segment(k, m);
    k += m;
    for (Index c = 0; c < m; ++c)
      for (Index r = c; r < m; ++r) factor(r, c) = t(k++);
    s.mu0 = t(k++);
    if (learn_kernel_) {
      const Index np = s.kernel.num_params();
      s.kernel.set_params(t.segment(k, np));
      k += np;
    }
    if (s.optimize_landmarks) {
      s.W.reshaped() = t.segment(k, s.W.size());
      k += s.W.size();
    }
    if (model_.likelihood == Likelihood::Normal) model_.log_tau = t.segment(k, model_.log_tau.size());
    if (whiten_) {
      refactor();
      apply_whitening();
    }
  }

  double loss(const BagBatch& batch, VectorXd* grad) override {
    const ElboResult r = vbagg_elbo(model_, batch, grad != nullptr);
    if (grad) {
      const Index m = model_.state.num_landmarks();
      VectorXd g_mean = r.grad.eta;
      MatrixXd g_factor = r.grad.sigma_factor;
      double g_mu0 = r.grad.mu0;
      VectorXd g_kernel = r.grad.kernel;
      MatrixXd g_W = r.grad.W;
      if (whiten_) whitened_grad(g_mean, g_factor, g_mu0, g_kernel, g_W);

      grad->resize(size());
      Index k = 0;
      grad->segment(k, m) = -g_mean;
      k += m;
      for (Index c = 0; c < m; ++c)
        for (Index rr = c; rr < m; ++rr) (*grad)(k++) = -g_factor(rr, c);
      (*grad)(k++) = -g_mu0;
      if (learn_kernel_) {
        grad->segment(k, g_kernel.size()) = -g_kernel;
        k += g_kernel.size();
      }
      if (model_.state.optimize_landmarks) {
        grad->segment(k, g_W.size()) = -g_W.reshaped();
        k += g_W.size();
      }
      if (model_.likelihood == Likelihood::Normal) grad->segment(k, r.g_log_tau.size()) = -r.g_log_tau;
    }
    return -r.value;
  }

  [[nodiscard]] std::string param_name(Index i) const override { return names_[static_cast<std::size_t>(i)]; }
  [[nodiscard]] FittedModel snapshot() const override { return {name_, ModelFamily::Vbagg, model_}; }

 private:
  void refactor() {
    const auto& s = model_.state;
    kww_ = safe_cholesky(kernel_matrix(s.kernel, s.W), model_.jitter_base, "K_WW");
  }

  static MatrixXd exp_diag(MatrixXd F) {
    F = MatrixXd(F.triangularView<Eigen::Lower>());
    F.diagonal() = F.diagonal().array().exp().matrix();
    return F;
  }

  void apply_whitening() {
    auto& s = model_.state;
    const MatrixXd& L = kww_.L();
    s.eta = (L * v_).array() + s.mu0;
    MatrixXd C = L * exp_diag(vf_);
    C = MatrixXd(C.triangularView<Eigen::Lower>());
    C.diagonal() = C.diagonal().array().log().matrix();
    s.sigma_factor = std::move(C);
  }

  // Chain rule from the (eta, chol Sigma_u) gradient to (v, L_v), plus the
  // extra K_WW dependence through L.
  void whitened_grad(VectorXd& g_mean, MatrixXd& g_factor, double& g_mu0, VectorXd& g_kernel, MatrixXd& g_W) const {
    const auto& s = model_.state;
    const Index m = s.num_landmarks();
    const MatrixXd& L = kww_.L();
    const MatrixXd Lv = exp_diag(vf_);
    const MatrixXd C = s.chol_factor();

    MatrixXd G_C = MatrixXd(g_factor.triangularView<Eigen::Lower>());
    for (Index i = 0; i < m; ++i) G_C(i, i) /= C(i, i);

    MatrixXd G_Lv = MatrixXd((L.transpose() * G_C).triangularView<Eigen::Lower>());
    for (Index i = 0; i < m; ++i) G_Lv(i, i) *= Lv(i, i);
    const VectorXd g_eta = g_mean;
    MatrixXd G_L = MatrixXd((G_C * Lv.transpose() + g_eta * v_.transpose()).triangularView<Eigen::Lower>());

    g_mean = L.transpose() * g_eta;
    g_factor = std::move(G_Lv);
    g_mu0 += g_eta.sum();

    if (!learn_kernel_ && !s.optimize_landmarks) return;
    // Cholesky backward: dK = L^{-T} Phi(L^T G_L) L^{-1}, symmetrized.
    MatrixXd P = MatrixXd((L.transpose() * G_L).triangularView<Eigen::Lower>());
    P.diagonal() *= 0.5;
    const auto Lt = L.triangularView<Eigen::Lower>();
    MatrixXd A = Lt.transpose().solve(P);
    A = Lt.transpose().solve(MatrixXd(A.transpose())).transpose();
    const MatrixXd G_K = 0.5 * (A + A.transpose());
    if (learn_kernel_) g_kernel += kernel_param_contract(s.kernel, s.W, s.W, G_K);
    if (s.optimize_landmarks) g_W += kernel_input_contract(s.kernel, s.W, s.W, MatrixXd(2.0 * G_K));
  }

  std::string name_;
  VbaggModel model_;
  bool learn_kernel_;
  bool whiten_;
  CholeskyFactor kww_;
  VectorXd v_;
  MatrixXd vf_;
  std::vector<std::string> names_;
};

class NystromTrainable final : public Trainable {
 public:
  NystromTrainable(std::string name, ModelFamily family, NystromModel model, const std::vector<BagData>& bags,
                   std::optional<ManifoldRegularizer> lap)
      : name_(std::move(name)), family_(family), model_(std::move(model)), fmap_(model_.feature_map()),
        lap_(std::move(lap)) {
    for (const auto& b : bags) phi_.push_back(fmap_.map(b.X));
    if (lap_ && lap_->active() && lap_->spec().mode != LaplacianMode::Exact)
      for (const auto& b : bags) lap_cache_.push_back(lap_->features(b.X));
    names_ = vec_names("beta", model_.beta.size());
    names_.push_back("bias");
    if (model_.likelihood == Likelihood::Normal) names_.push_back("log_tau");
  }
  [[nodiscard]] Index size() const override { return static_cast<Index>(names_.size()); }
  [[nodiscard]] VectorXd get() const override {
    VectorXd t(size());
    const Index m = model_.beta.size();
    t.head(m) = model_.beta;
    t(m) = model_.bias;
    if (model_.likelihood == Likelihood::Normal) t(m + 1) = model_.log_tau;
    return t;
  }
  void set(const VectorXd& t) override {
    const Index m = model_.beta.size();
    model_.beta = t.head(m);
    model_.bias = t(m);
    if (model_.likelihood == Likelihood::Normal) model_.log_tau = t(m + 1);
  }
  double loss(const BagBatch& batch, VectorXd* grad) override {
    NystromGrad g;
    const double v = nystrom_map_objective(model_, fmap_, batch, lap_ ? &*lap_ : nullptr, grad ? &g : nullptr, &phi_,
                                           lap_cache_.empty() ? nullptr : &lap_cache_);
    if (grad) {
      grad->resize(size());
      const Index m = model_.beta.size();
      grad->head(m) = g.beta;
      (*grad)(m) = g.bias;
      if (model_.likelihood == Likelihood::Normal) (*grad)(m + 1) = g.log_tau;
    }
    return v;
  }
  [[nodiscard]] std::string param_name(Index i) const override { return names_[static_cast<std::size_t>(i)]; }
  [[nodiscard]] FittedModel snapshot() const override { return {name_, family_, model_}; }

 private:
  std::string name_;
  ModelFamily family_;
  NystromModel model_;
  NystromFeatureMap fmap_;
  std::optional<ManifoldRegularizer> lap_;
  std::vector<MatrixXd> phi_;
  std::vector<MatrixXd> lap_cache_;
  std::vector<std::string> names_;
};

class MlpTrainable final : public Trainable {
 public:
  MlpTrainable(std::string name, MlpModel model, const std::vector<BagData>& bags, std::optional<ManifoldRegularizer> lap,
               std::optional<BagCovariates> bag_cov)
      : name_(std::move(name)), model_(std::move(model)), lap_(std::move(lap)), bag_cov_(std::move(bag_cov)) {
    if (lap_ && lap_->active() && lap_->spec().mode != LaplacianMode::Exact && model_.lambda1 != 0.0)
      for (const auto& b : bags) lap_cache_.push_back(lap_->features(b.X));
    const Index h = model_.hidden();
    names_ = flat_names("W1", h, model_.W1.cols());
    for (const auto& n : vec_names("b1", h)) names_.push_back(n);
    for (const auto& n : vec_names("w2", h)) names_.push_back(n);
    names_.push_back("b2");
    if (model_.likelihood == Likelihood::Normal) names_.push_back("log_tau");
  }
  [[nodiscard]] Index size() const override { return static_cast<Index>(names_.size()); }
  [[nodiscard]] VectorXd get() const override {
    VectorXd t(size());
    Index k = 0;
    t.segment(k, model_.W1.size()) = model_.W1.reshaped();
    k += model_.W1.size();
    t.segment(k, model_.hidden()) = model_.b1;
    k += model_.hidden();
    t.segment(k, model_.hidden()) = model_.w2;
    k += model_.hidden();
    t(k++) = model_.b2;
    if (model_.likelihood == Likelihood::Normal) t(k) = model_.log_tau;
    return t;
  }
  void set(const VectorXd& t) override {
    Index k = 0;
    model_.W1.reshaped() = t.segment(k, model_.W1.size());
    k += model_.W1.size();
    model_.b1 = t.segment(k, model_.hidden());
    k += model_.hidden();
    model_.w2 = t.segment(k, model_.hidden());
    k += model_.hidden();
    model_.b2 = t(k++);
    if (model_.likelihood == Likelihood::Normal) model_.log_tau = t(k);
  }
  double loss(const BagBatch& batch, VectorXd* grad) override {
    MlpGrad g;
    const double v = mlp_objective(model_, batch, lap_ ? &*lap_ : nullptr, bag_cov_ ? &*bag_cov_ : nullptr,
                                   grad ? &g : nullptr, lap_cache_.empty() ? nullptr : &lap_cache_);
    if (grad) {
      grad->resize(size());
      Index k = 0;
      grad->segment(k, g.W1.size()) = g.W1.reshaped();
      k += g.W1.size();
      grad->segment(k, model_.hidden()) = g.b1;
      k += model_.hidden();
      grad->segment(k, model_.hidden()) = g.w2;
      k += model_.hidden();
      (*grad)(k++) = g.b2;
      if (model_.likelihood == Likelihood::Normal) (*grad)(k) = g.log_tau;
    }
    return v;
  }
  [[nodiscard]] std::string param_name(Index i) const override { return names_[static_cast<std::size_t>(i)]; }
  [[nodiscard]] FittedModel snapshot() const override { return {name_, ModelFamily::Mlp, model_}; }

 private:
  std::string name_;
  MlpModel model_;
  std::optional<ManifoldRegularizer> lap_;
  std::optional<BagCovariates> bag_cov_;
  std::vector<MatrixXd> lap_cache_;
  std::vector<std::string> names_;
};

std::optional<ManifoldRegularizer> make_laplacian(const ModelSpec& spec, const KernelSpec& model_kernel,
                                                  const MatrixXd& X_train, std::uint64_t seed) {
  if (spec.lambda1 == 0.0 || spec.laplacian.mode == LaplacianMode::None) return std::nullopt;
  LaplacianSpec ls = spec.laplacian;
  ls.kernel = spec.laplacian_kernel ? *spec.laplacian_kernel : model_kernel;
  ls.seed = seed ^ 0x5bd1e995ULL;
  return ManifoldRegularizer(ls, X_train);
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(ModelFamily f) {
  switch (f) {
    case ModelFamily::Constant: return "constant";
    case ModelFamily::BagPixel: return "bag-pixel";
    case ModelFamily::Nystrom: return "nystrom";
    case ModelFamily::Mlp: return "mlp";
    case ModelFamily::Vbagg: return "vbagg";
  }
  return "?";
}

ModelFamily model_family_from_string(std::string_view s) {
  if (s == "constant") return ModelFamily::Constant;
  if (s == "bag-pixel") return ModelFamily::BagPixel;
  if (s == "nystrom") return ModelFamily::Nystrom;
  if (s == "mlp") return ModelFamily::Mlp;
  if (s == "vbagg") return ModelFamily::Vbagg;
  throw ConfigError("unknown model family '" + std::string(s) + "'");
}

ModelSpec ModelSpec::from_name(const std::string& n) {
  ModelSpec s;
  s.name = n;
  if (n == "vbagg" || n == "vbagg-sq") {
    s.family = ModelFamily::Vbagg;
    s.link = Link::Sq;
  } else if (n == "vbagg-exp") {
    s.family = ModelFamily::Vbagg;
    s.link = Link::Exp;
  } else if (n == "vbagg-normal") {
    s.family = ModelFamily::Vbagg;
    s.likelihood = Likelihood::Normal;
    s.link = Link::Identity;
  } else if (n == "vbagg-exponential") {
    s.family = ModelFamily::Vbagg;
    s.likelihood = Likelihood::Exponential;
    s.link = Link::Exp;
  } else {
    s.family = model_family_from_string(n);
    s.link = s.family == ModelFamily::Constant ? Link::Identity : Link::Exp;
  }
  return s;
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"name", s.name},
                     {"family", std::string(to_string(s.family))},
                     {"likelihood", std::string(to_string(s.likelihood))},
                     {"link", std::string(to_string(s.link))},
                     {"lengthscale", s.lengthscale},
                     {"landmarks", s.landmarks},
                     {"optimize_landmarks", s.optimize_landmarks},
                     {"learn_kernel", s.learn_kernel},
                     {"whiten", s.whiten},
                     {"per_bag_tau", s.per_bag_tau},
                     {"hidden", s.hidden},
                     {"log_gamma_prior", s.log_gamma_prior},
                     {"lambda1", s.lambda1},
                     {"lambda2", s.lambda2},
                     {"laplacian", s.laplacian}};
  if (s.kernel) j["kernel"] = *s.kernel;
  if (s.laplacian_kernel) j["laplacian"]["kernel"] = *s.laplacian_kernel;
  else j["laplacian"].erase("kernel");
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  const std::string fam = j.at("family").get<std::string>();
  s = ModelSpec::from_name(fam);
  s.name = j.value("name", fam);
  if (j.contains("likelihood")) s.likelihood = likelihood_from_string(j.at("likelihood").get<std::string>());
  if (j.contains("link")) s.link = link_from_string(j.at("link").get<std::string>());
  if (j.contains("kernel")) s.kernel = j.at("kernel").get<KernelSpec>();
  s.lengthscale = j.value("lengthscale", s.lengthscale);
  s.landmarks = j.value("landmarks", s.landmarks);
  s.optimize_landmarks = j.value("optimize_landmarks", s.optimize_landmarks);
  s.learn_kernel = j.value("learn_kernel", s.learn_kernel);
  s.whiten = j.value("whiten", s.whiten);
  s.per_bag_tau = j.value("per_bag_tau", s.per_bag_tau);
  s.hidden = j.value("hidden", s.hidden);
  s.log_gamma_prior = j.value("log_gamma_prior", s.log_gamma_prior);
  if (j.contains("gamma")) s.log_gamma_prior = std::log(j.at("gamma").get<double>());
  s.lambda1 = j.value("lambda1", s.lambda1);
  s.lambda2 = j.value("lambda2", s.lambda2);
  if (j.contains("laplacian")) {
    s.laplacian = j.at("laplacian").get<LaplacianSpec>();
    if (j.at("laplacian").contains("kernel")) s.laplacian_kernel = j.at("laplacian").at("kernel").get<KernelSpec>();
  }
  if (s.landmarks < 1) throw ConfigError("landmarks must be at least 1");
  if (s.hidden < 1) throw ConfigError("hidden width must be at least 1");
  if (s.lambda1 < 0.0 || s.lambda2 < 0.0) throw ConfigError("regularisation weights must be nonnegative");
}

std::string_view to_string(TuningMode m) {
  return m == TuningMode::ValidationNLL ? "validation_nll" : "objective";
}

TuningMode tuning_mode_from_string(std::string_view s) {
  if (s == "validation_nll") return TuningMode::ValidationNLL;
  if (s == "objective") return TuningMode::Objective;
  throw ConfigError("unknown tuning mode '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (batch_bags < 1) throw ConfigError("batch_bags must be at least 1");
  if (max_epochs < 0) throw ConfigError("max_epochs must be nonnegative");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},       {"adam_eps", c.adam_eps},
                     {"batch_bags", c.batch_bags},       {"max_epochs", c.max_epochs},
                     {"patience", c.patience},           {"eval_every", c.eval_every},
                     {"seed", c.seed},                   {"tuning_mode", std::string(to_string(c.tuning_mode))},
                     {"trace_all_splits", c.trace_all_splits}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.batch_bags = j.value("batch_bags", c.batch_bags);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.seed = j.value("seed", c.seed);
  if (j.contains("tuning_mode")) c.tuning_mode = tuning_mode_from_string(j.at("tuning_mode").get<std::string>());
  c.trace_all_splits = j.value("trace_all_splits", c.trace_all_splits);
  c.validate();
}

// ---------------------------------------------------------------------------

FittedModel::FittedModel(std::string name, ModelFamily family, Payload payload)
    : name_(std::move(name)), family_(family), payload_(std::move(payload)) {
  if (const auto* n = std::get_if<NystromModel>(&payload_)) fmap_ = n->feature_map();
}

Likelihood FittedModel::likelihood() const {
  return std::visit([](const auto& m) { return m.likelihood; }, payload_);
}

Index FittedModel::input_dim() const {
  return std::visit(
      [](const auto& m) -> Index {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, ConstantModel>) return -1;
        else if constexpr (std::is_same_v<T, NystromModel>) return m.W.cols();
        else if constexpr (std::is_same_v<T, MlpModel>) return m.W1.cols();
        else return m.state.input_dim();
      },
      payload_);
}

double FittedModel::tau() const {
  return std::visit(
      [](const auto& m) -> double {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, VbaggModel>) return std::exp(m.log_tau.mean());
        else return std::exp(m.log_tau);
      },
      payload_);
}

std::vector<PredictiveDist> FittedModel::predict(const MatrixXd& X, const std::vector<std::string>& bag_ids) const {
  const Index dim = input_dim();
  if (dim >= 0 && X.cols() != dim)
    throw DimensionMismatch("model '" + name_ + "' expects " + std::to_string(dim) + " covariates, got " +
                            std::to_string(X.cols()));
  std::vector<PredictiveDist> out(static_cast<std::size_t>(X.rows()));
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, ConstantModel>) {
          if (bag_ids.size() != out.size()) throw DimensionMismatch("constant model needs one bag id per row");
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = {Link::Identity, m.rate_for(bag_ids[i]), 0.0, 1.0};
        } else if constexpr (std::is_same_v<T, NystromModel>) {
          const VectorXd f = nystrom_predict_f(m, *fmap_, X);
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = {m.link, f(static_cast<Index>(i)), 0.0, 1.0};
        } else if constexpr (std::is_same_v<T, MlpModel>) {
          const VectorXd f = mlp_forward(m, X);
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = {m.link, f(static_cast<Index>(i)), 0.0, 1.0};
        } else {
          out = predictive_rows(m.state, X, m.link);
        }
      },
      payload_);
  return out;
}

std::vector<PredictiveDist> FittedModel::predict_rows(const BaggedDataset& ds, const std::vector<Index>& rows) const {
  MatrixXd X(static_cast<Index>(rows.size()), ds.dim());
  std::vector<std::string> ids(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    X.row(static_cast<Index>(k)) = ds.X.row(rows[k]);
    ids[k] = ds.bags[static_cast<std::size_t>(ds.bag_of[static_cast<std::size_t>(rows[k])])].id;
  }
  auto out = predict(X, ids);
  for (std::size_t k = 0; k < rows.size(); ++k) out[k].weight = ds.p(rows[k]);
  return out;
}

double FittedModel::mean_bag_nll(const BaggedDataset& ds, const std::vector<Index>& bag_positions) const {
  if (bag_positions.empty()) return kNaN;
  const std::vector<Index> rows = member_rows(ds, bag_positions);
  const auto pred = predict_rows(ds, rows);
  const double t = tau();
  const Likelihood lik = likelihood();
  double total = 0.0;
  std::size_t k = 0;
  for (Index b : bag_positions) {
    const auto& bag = ds.bags[static_cast<std::size_t>(b)];
    double mean = 0.0;
    double w2 = 0.0;
    for (std::size_t i = 0; i < bag.members.size(); ++i, ++k) {
      mean += pred[k].weight * predictive_mean(pred[k]);
      w2 += pred[k].weight * pred[k].weight;
    }
    total += bag_nll_from_mean(lik, bag.y, mean, t, w2);
  }
  return total / static_cast<double>(bag_positions.size());
}

void to_json(nlohmann::json& j, const FittedModel& m) {
  j = nlohmann::json{{"format", "aggva-model"},
                     {"version", 1},
                     {"family", std::string(to_string(m.family()))},
                     {"name", m.name()}};
  std::visit([&](const auto& p) { j["model"] = p; }, m.payload());
}

void from_json(const nlohmann::json& j, FittedModel& m) {
  if (j.value("format", std::string()) != "aggva-model") throw DataError("not an aggva model checkpoint");
  if (j.value("version", 0) != 1) throw DataError("unsupported checkpoint version");
  const ModelFamily fam = model_family_from_string(j.at("family").get<std::string>());
  const std::string name = j.value("name", std::string(to_string(fam)));
  const auto& body = j.at("model");
  switch (fam) {
    case ModelFamily::Constant: m = FittedModel(name, fam, body.get<ConstantModel>()); break;
    case ModelFamily::BagPixel:
    case ModelFamily::Nystrom: m = FittedModel(name, fam, body.get<NystromModel>()); break;
    case ModelFamily::Mlp: m = FittedModel(name, fam, body.get<MlpModel>()); break;
    case ModelFamily::Vbagg: m = FittedModel(name, fam, body.get<VbaggModel>()); break;
  }
}

void save_checkpoint(const FittedModel& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << nlohmann::json(m).dump(1) << '\n';
}

FittedModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing checkpoint " + path.string());
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw DataError("checkpoint " + path.string() + " is not valid JSON");
  try {
    return j.get<FittedModel>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

void adam_step(AdamState& state, VectorXd& theta, const VectorXd& grad, const TrainConfig& cfg,
               const std::function<std::string(Index)>& name_of) {
  if (grad.size() != theta.size()) throw DimensionMismatch("gradient and parameter sizes differ");
  for (Index i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad(i))) throw NonFiniteGradient(name_of ? name_of(i) : "theta[" + std::to_string(i) + "]");
  if (state.m.size() != theta.size()) {
    state.m = VectorXd::Zero(theta.size());
    state.v = VectorXd::Zero(theta.size());
    state.step = 0;
  }
  ++state.step;
  state.m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grad;
  state.v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
  theta.array() -= cfg.learning_rate * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.adam_eps);
}

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,split,metric,value\n";
  out.precision(17);
  for (const auto& r : trace) out << r.epoch << ',' << r.split << ',' << r.metric << ',' << r.value << '\n';
}

bool uses_early_stopping(ModelFamily f) {
  return f == ModelFamily::Nystrom || f == ModelFamily::Mlp || f == ModelFamily::BagPixel;
}

std::unique_ptr<Trainable> make_trainable(const ModelSpec& spec, const BaggedDataset& ds,
                                          const std::vector<BagData>& train_bags, const TrainConfig& cfg) {
  if (train_bags.empty()) throw DataError("training split is empty");
  validate_bags(train_bags, spec.likelihood);
  if (spec.family == ModelFamily::Constant)
    return std::make_unique<ConstantTrainable>(spec.name, train_bags, spec.likelihood);

  std::mt19937_64 rng(cfg.seed);
  const MatrixXd X_train = stacked_members(train_bags);
  const double rate = pooled_rate(train_bags);
  const Index m = std::min<Index>(spec.landmarks, X_train.rows());

  switch (spec.family) {
    case ModelFamily::Vbagg: {
      if (spec.likelihood == Likelihood::Exponential && spec.link != Link::Exp)
        throw Unsupported("the exponential bag model is only defined for the exp link");
      MatrixXd W = select_landmarks(X_train, m, rng);
      KernelSpec k = resolve_kernel(spec, W);
      VbaggModel model;
      model.likelihood = spec.likelihood;
      model.link = spec.link;
      model.state = VariationalState::from_prior(std::move(W), std::move(k), link_inverse(spec.link, rate));
      model.state.optimize_landmarks = spec.optimize_landmarks;
      if (spec.likelihood == Likelihood::Normal) {
        double s = 0.0;
        for (const auto& b : train_bags) {
          const double r = b.y - rate * b.weights.sum();
          s += r * r / b.weights.squaredNorm();
        }
        const double lt = std::log(std::max(s / static_cast<double>(train_bags.size()), 1e-6));
        model.log_tau = VectorXd::Constant(spec.per_bag_tau ? static_cast<Index>(train_bags.size()) : 1, lt);
      }
      model.validate();
      return std::make_unique<VbaggTrainable>(spec.name, std::move(model), spec.learn_kernel, spec.whiten);
    }
    case ModelFamily::Nystrom:
    case ModelFamily::BagPixel: {
      MatrixXd W = select_landmarks(X_train, m, rng);
      NystromModel model;
      model.kernel = resolve_kernel(spec, W);
      model.W = std::move(W);
      model.beta = VectorXd::Zero(m);
      model.bias = link_inverse(spec.link, rate);
      model.log_gamma_prior = spec.log_gamma_prior;
      model.link = spec.link;
      model.likelihood = spec.likelihood;
      model.lambda1 = spec.lambda1;
      auto lap = make_laplacian(spec, model.kernel, X_train, cfg.seed);
      return std::make_unique<NystromTrainable>(spec.name, spec.family, std::move(model), train_bags, std::move(lap));
    }
    case ModelFamily::Mlp: {
      MlpModel model = MlpModel::init(X_train.cols(), spec.hidden, link_inverse(spec.link, rate), rng);
      model.link = spec.link;
      model.likelihood = spec.likelihood;
      model.lambda1 = spec.lambda1;
      model.lambda2 = spec.lambda2;
      const KernelSpec k = resolve_kernel(spec, select_landmarks(X_train, m, rng));
      auto lap = make_laplacian(spec, k, X_train, cfg.seed);
      std::optional<BagCovariates> bag_cov;
      if (spec.lambda2 != 0.0) {
        if (ds.S.size() == 0) throw Unsupported("bag-level manifold regularisation needs spatial covariates s_1,s_2");
        BagCovariates bc;
        bc.S.resize(static_cast<Index>(train_bags.size()), ds.S.cols());
        for (std::size_t b = 0; b < train_bags.size(); ++b) {
          Eigen::RowVectorXd s = Eigen::RowVectorXd::Zero(ds.S.cols());
          for (Index i : train_bags[b].members) s += ds.S.row(i);
          bc.S.row(static_cast<Index>(b)) = s / static_cast<double>(train_bags[b].members.size());
        }
        bc.ks = KernelSpec::rbf(median_pairwise_distance(bc.S));
        bc.kh = k;
        bag_cov = std::move(bc);
      }
      return std::make_unique<MlpTrainable>(spec.name, std::move(model), train_bags, std::move(lap), std::move(bag_cov));
    }
    case ModelFamily::Constant: break;
  }
  throw ConfigError("unhandled model family");
}

TrainResult train(const ModelSpec& spec, const BaggedDataset& ds, const SplitSpec& splits, const TrainConfig& cfg) {
  cfg.validate();
  splits.validate(ds);
  const auto train_pos = splits.bags_in(ds, Split::Train);
  const auto es_pos = splits.bags_in(ds, Split::EarlyStop);
  const auto val_pos = splits.bags_in(ds, Split::Validation);
  const auto test_pos = splits.bags_in(ds, Split::Test);
  if (train_pos.empty()) throw DataError("training split is empty");
  const bool early = uses_early_stopping(spec.family) && cfg.tuning_mode == TuningMode::ValidationNLL;
  if (early && es_pos.empty()) throw DataError("early-stop split is empty but model '" + spec.name + "' needs it");

  const BaggedDataset pixel = spec.family == ModelFamily::BagPixel ? bag_pixel_aggregate(ds) : BaggedDataset{};
  const BaggedDataset& source = spec.family == ModelFamily::BagPixel ? pixel : ds;
  const std::vector<BagData> train_bags = make_bag_data(source, train_pos);
  auto trainable = make_trainable(spec, source, train_bags, cfg);

  TrainResult res;
  auto record = [&](int epoch, const FittedModel& model, double objective) {
    if (!std::isnan(objective)) res.trace.push_back({epoch, "train", "objective", objective});
    if (!cfg.trace_all_splits) return;
    const std::pair<const char*, const std::vector<Index>*> sets[] = {
        {"train", &train_pos}, {"early_stop", &es_pos}, {"validation", &val_pos}, {"test", &test_pos}};
    for (const auto& [name, pos] : sets)
      if (!pos->empty()) res.trace.push_back({epoch, name, "bag_nll", model.mean_bag_nll(ds, *pos)});
  };

  std::vector<const BagData*> all_ptrs;
  for (const auto& b : train_bags) all_ptrs.push_back(&b);
  const BagBatch full{all_ptrs, static_cast<Index>(train_bags.size())};

  VectorXd theta = trainable->get();
  VectorXd best_theta = theta;
  double best_es = std::numeric_limits<double>::infinity();
  if (early) best_es = trainable->snapshot().mean_bag_nll(ds, es_pos);
  record(0, trainable->snapshot(), -trainable->loss(full, nullptr));

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train_bags.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  AdamState adam;
  int since_best = 0;
  int epoch = 0;
  const bool has_params = trainable->size() > 0;
  for (epoch = 1; epoch <= cfg.max_epochs && has_params; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_bags)) {
      BagBatch batch;
      batch.total_bags = static_cast<Index>(train_bags.size());
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_bags));
      for (std::size_t k = start; k < stop; ++k) batch.bags.push_back(&train_bags[order[k]]);
      VectorXd grad;
      epoch_loss += trainable->loss(batch, &grad);
      adam_step(adam, theta, grad, cfg, [&](Index i) { return trainable->param_name(i); });
      trainable->set(theta);
    }
    if (epoch % cfg.eval_every != 0 && epoch != cfg.max_epochs) continue;
    const FittedModel snap = trainable->snapshot();
    record(epoch, snap, -epoch_loss);
    if (early) {
      const double es = snap.mean_bag_nll(ds, es_pos);
      if (es < best_es) {
        best_es = es;
        best_theta = theta;
        res.best_epoch = epoch;
        since_best = 0;
      } else {
        since_best += cfg.eval_every;
        if (since_best >= cfg.patience) break;
      }
    }
  }
  res.epochs_run = has_params ? std::min(epoch, cfg.max_epochs) : 0;
  if (early) {
    trainable->set(best_theta);
  } else {
    res.best_epoch = res.epochs_run;
  }
  res.model = trainable->snapshot();
  res.train_objective = trainable->loss(full, nullptr);
  res.early_stop_nll = early ? best_es : kNaN;
  res.validation_nll = res.model.mean_bag_nll(ds, val_pos);
  return res;
}

// ---------------------------------------------------------------------------

std::vector<nlohmann::json> expand_grid(const nlohmann::json& grid) {
  std::vector<nlohmann::json> points{nlohmann::json::object()};
  if (grid.is_null()) return points;
  if (!grid.is_object()) throw ConfigError("grid must be an object of value lists");
  std::vector<std::string> keys;
  for (const auto& [k, v] : grid.items()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  for (const auto& key : keys) {
    const auto& values = grid.at(key);
    if (!values.is_array() || values.empty()) throw ConfigError("grid entry '" + key + "' must be a nonempty list");
    std::vector<nlohmann::json> next;
    for (const auto& p : points)
      for (const auto& v : values) {
        nlohmann::json q = p;
        q[key] = v;
        next.push_back(std::move(q));
      }
    points = std::move(next);
  }
  return points;
}

void apply_grid_point(const nlohmann::json& point, ModelSpec& spec, TrainConfig& cfg) {
  static const char* kTrainKeys[] = {"learning_rate", "adam_beta1", "adam_beta2", "adam_eps",
                                     "batch_bags",    "max_epochs", "patience",   "eval_every"};
  nlohmann::json train_part = nlohmann::json::object();
  nlohmann::json spec_json = spec;
  for (const auto& [k, v] : point.items()) {
    if (k == "seed") {
      cfg.seed += 1000003ULL * v.get<std::uint64_t>();
    } else if (std::find(std::begin(kTrainKeys), std::end(kTrainKeys), k) != std::end(kTrainKeys)) {
      train_part[k] = v;
    } else if (k == "laplacian") {
      spec_json["laplacian"].update(v);
    } else if (spec_json.contains(k) || k == "kernel" || k == "gamma") {
      spec_json[k] = v;
    } else {
      throw ConfigError("grid key '" + k + "' is not a tunable hyperparameter");
    }
  }
  if (spec.kernel && !point.contains("kernel") && point.contains("lengthscale")) spec_json.erase("kernel");
  from_json(train_part, cfg);
  ModelSpec updated;
  from_json(spec_json, updated);
  spec = std::move(updated);
}

TuneResult tune(const ModelSpec& spec, const BaggedDataset& ds, const SplitSpec& splits, const TrainConfig& cfg,
                const nlohmann::json& grid, TuningMode mode, int threads) {
  const auto points = expand_grid(grid);
  if (points.empty()) throw ConfigError("tuning grid is empty");
  std::vector<std::optional<TrainResult>> results(points.size());
  std::vector<ModelSpec> specs(points.size(), spec);
  std::vector<TrainConfig> cfgs(points.size(), cfg);
  for (std::size_t i = 0; i < points.size(); ++i) {
    apply_grid_point(points[i], specs[i], cfgs[i]);
    cfgs[i].tuning_mode = mode;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        results[i] = train(specs[i], ds, splits, cfgs[i]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(points.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  TuneResult out;
  out.scores.resize(points.size());
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.size(); ++i) {
    double s = mode == TuningMode::ValidationNLL ? results[i]->validation_nll : results[i]->train_objective;
    if (std::isnan(s)) {
      if (mode == TuningMode::ValidationNLL) throw DataError("validation split is empty; cannot tune by validation NLL");
      s = std::numeric_limits<double>::infinity();
    }
    out.scores[i] = s;
    if (s < best) {
      best = s;
      out.best_index = i;
    }
  }
  out.best_point = points[out.best_index];
  out.best = std::move(*results[out.best_index]);
  out.best_spec = specs[out.best_index];
  out.best_config = cfgs[out.best_index];
  return out;
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const ObjectiveFn& objective, const VectorXd& theta, double step) {
  VectorXd analytic;
  objective(theta, &analytic);
  if (analytic.size() != theta.size()) throw DimensionMismatch("objective gradient has the wrong size");
  GradCheckResult r;
  VectorXd t = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    t(i) = theta(i) + step;
    const double fp = objective(t, nullptr);
    t(i) = theta(i) - step;
    const double fm = objective(t, nullptr);
    t(i) = theta(i);
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic(i)), std::abs(numeric), 1e-8});
    const double err = std::abs(analytic(i) - numeric) / denom;
    if (err > r.max_rel_error || r.worst_index < 0) {
      r.max_rel_error = err;
      r.worst_index = i;
      r.analytic = analytic(i);
      r.numeric = numeric;
    }
  }
  return r;
}

ObjectiveFn objective_of(Trainable& t, const BagBatch& batch) {
  return [&t, batch](const VectorXd& theta, VectorXd* grad) {
    const VectorXd saved = t.get();
    t.set(theta);
    const double v = t.loss(batch, grad);
    t.set(saved);
    return v;
  };
}

}  // namespace aggva
