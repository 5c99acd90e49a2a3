#include "aggva/bag_models.hpp"

#include "aggva/error.hpp"
#include "aggva/json_eigen.hpp"

#include <cmath>
#include <limits>

namespace aggva {

std::string_view to_string(Likelihood l) {
  switch (l) {
    case Likelihood::Poisson: return "poisson";
    case Likelihood::Normal: return "normal";
    case Likelihood::Exponential: return "exponential";
  }
  return "?";
}

std::string_view to_string(Link l) {
  switch (l) {
    case Link::Exp: return "exp";
    case Link::Sq: return "sq";
    case Link::Identity: return "identity";
  }
  return "?";
}

Likelihood likelihood_from_string(std::string_view s) {
  if (s == "poisson") return Likelihood::Poisson;
  if (s == "normal") return Likelihood::Normal;
  if (s == "exponential") return Likelihood::Exponential;
  throw ConfigError("unknown likelihood '" + std::string(s) + "'");
}

Link link_from_string(std::string_view s) {
  if (s == "exp") return Link::Exp;
  if (s == "sq") return Link::Sq;
  if (s == "identity") return Link::Identity;
  throw ConfigError("unknown link '" + std::string(s) + "'");
}

BagBatch BagBatch::all(const std::vector<BagData>& bags) {
  BagBatch b;
  b.bags.reserve(bags.size());
  for (const auto& bag : bags) b.bags.push_back(&bag);
  b.total_bags = static_cast<Index>(bags.size());
  return b;
}

void validate_bags(const std::vector<BagData>& bags, Likelihood likelihood) {
  for (const auto& b : bags) {
    if (b.X.rows() == 0) throw DegenerateBag(b.id, "bag has no individuals");
    if (b.weights.size() != b.X.rows()) throw DataError("bag '" + b.id + "': weight count does not match members");
    if ((b.weights.array() < 0.0).any()) throw DataError("bag '" + b.id + "': negative weight");
    if (!(b.weights.array() > 0.0).any()) throw DegenerateBag(b.id, "all weights are zero");
    if (!std::isfinite(b.y)) throw DataError("bag '" + b.id + "': non-finite output");
    if (likelihood == Likelihood::Poisson && (b.y < 0.0 || b.y != std::floor(b.y)))
      throw DataError("bag '" + b.id + "': Poisson output must be a nonnegative integer");
    if (likelihood == Likelihood::Exponential && b.y < 0.0)
      throw DataError("bag '" + b.id + "': exponential output must be nonnegative");
  }
}

// ---------------------------------------------------------------------------

double taylor_log_quadform(const VectorXd& m, const MatrixXd& S, const VectorXd& p, VectorXd& g_m, MatrixXd& g_S) {
  const VectorXd pm = p.cwiseProduct(m);
  const double E = m.dot(pm) + S.diagonal().dot(p);
  if (!(E > 0.0)) throw DegenerateBag("?", "m'Pm + tr(SP) is not positive");
  const VectorXd Spm = S * pm;
  const double quad = pm.dot(Spm);
  const MatrixXd PSP = p.asDiagonal() * S * p.asDiagonal();
  const double tr2 = PSP.cwiseProduct(S.transpose()).sum();
  const double num = 2.0 * quad + tr2;
  const double value = std::log(E) - num / (E * E);

  const double dE = 1.0 / E + 2.0 * num / (E * E * E);
  const double dN = -1.0 / (E * E);
  g_m = dE * 2.0 * pm + dN * 4.0 * p.cwiseProduct(Spm);
  g_S = dN * (2.0 * pm * pm.transpose() + 2.0 * PSP);
  g_S.diagonal() += dE * p;
  return value;
}

double taylor_log_quadform(const VectorXd& m, const MatrixXd& S, const VectorXd& p) {
  VectorXd gm;
  MatrixXd gs;
  return taylor_log_quadform(m, S, p, gm, gs);
}

double logsum_lower_bound(const VectorXd& m, const VectorXd& w, VectorXd& g_m) {
  if (m.size() != w.size()) throw DimensionMismatch("logsum_lower_bound: size mismatch");
  double shift = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < m.size(); ++i) {
    if (w(i) < 0.0) throw DataError("logsum_lower_bound: negative weight");
    if (w(i) > 0.0) shift = std::max(shift, std::log(w(i)) + m(i));
  }
  if (!std::isfinite(shift)) throw DegenerateBag("?", "all weights are zero");
  g_m = VectorXd::Zero(m.size());
  double acc = 0.0;
  for (Index i = 0; i < m.size(); ++i)
    if (w(i) > 0.0) {
      g_m(i) = std::exp(std::log(w(i)) + m(i) - shift);
      acc += g_m(i);
    }
  g_m /= acc;
  return shift + std::log(acc);
}

double logsum_lower_bound(const VectorXd& m, const VectorXd& w) {
  VectorXd g;
  return logsum_lower_bound(m, w, g);
}

double exponential_fterm_bound(const VectorXd& m, const VectorXd& s, const VectorXd& w) {
  const double z = (w.array() * (m.array() - 0.5 * s.array()).exp()).sum();
  if (!(z > 0.0)) throw DegenerateBag("?", "all weights are zero");
  return -1.0 / z;
}

// ---------------------------------------------------------------------------

void VbaggModel::validate() const {
  state.validate();
  switch (likelihood) {
    case Likelihood::Poisson:
      if (link == Link::Identity) throw Unsupported("Poisson bag model needs a positive link (exp or sq)");
      break;
    case Likelihood::Normal:
      if (link != Link::Identity) throw Unsupported("normal bag model uses the identity link");
      if (log_tau.size() < 1) throw DataError("normal bag model needs log_tau");
      break;
    case Likelihood::Exponential:
      if (link == Link::Sq)
        throw Unsupported("exponential bag model with the sq link: E[1/v^2] diverges for Gaussian v");
      if (link != Link::Exp) throw Unsupported("exponential bag model uses the exp link");
      break;
  }
}

void to_json(nlohmann::json& j, const VbaggModel& m) {
  j = nlohmann::json{{"state", m.state},
                     {"likelihood", std::string(to_string(m.likelihood))},
                     {"link", std::string(to_string(m.link))},
                     {"log_tau", json_eigen::from_vector(m.log_tau)},
                     {"jitter_base", m.jitter_base}};
}

void from_json(const nlohmann::json& j, VbaggModel& m) {
  m.state = j.at("state").get<VariationalState>();
  m.likelihood = likelihood_from_string(j.at("likelihood").get<std::string>());
  m.link = link_from_string(j.at("link").get<std::string>());
  m.log_tau = json_eigen::to_vector(j.at("log_tau"));
  m.jitter_base = j.value("jitter_base", 1e-6);
  m.validate();
}

namespace {

double log_factorial(double y) { return std::lgamma(y + 1.0); }

struct BagTerm {
  double value = 0.0;
  VectorXd g_m;
  MatrixXd g_cov;  // full: N x N, diag: N x 1
  double g_log_tau = 0.0;
};

BagTerm poisson_sq_term(const BagData& bag, const GaussianMarginal& q, bool want_grad) {
  BagTerm t;
  const VectorXd& p = bag.weights;
  VectorXd gz;
  MatrixXd gS;
  double zeta = 0.0;
  if (bag.y != 0.0) {
    try {
      zeta = taylor_log_quadform(q.mean, q.cov, p, gz, gS);
    } catch (const DegenerateBag&) {
      throw DegenerateBag(bag.id, "m'Pm + tr(SP) is not positive");
    }
  }
  t.value = bag.y * zeta - p.dot(q.mean.cwiseAbs2() + q.cov.diagonal()) - log_factorial(bag.y);
  if (want_grad) {
    t.g_m = -2.0 * p.cwiseProduct(q.mean);
    t.g_cov = MatrixXd::Zero(q.mean.size(), q.mean.size());
    t.g_cov.diagonal() = -p;
    if (bag.y != 0.0) {
      t.g_m += bag.y * gz;
      t.g_cov += bag.y * gS;
    }
  }
  return t;
}

BagTerm poisson_exp_term(const BagData& bag, const GaussianMarginal& q, bool want_grad) {
  BagTerm t;
  const VectorXd& p = bag.weights;
  VectorXd g_lse;
  double lse = 0.0;
  try {
    lse = logsum_lower_bound(q.mean, p, g_lse);
  } catch (const DegenerateBag&) {
    throw DegenerateBag(bag.id, "all weights are zero");
  }
  const VectorXd rate = p.array() * (q.mean.array() + 0.5 * q.var.array()).exp();
  t.value = bag.y * lse - rate.sum() - log_factorial(bag.y);
  if (want_grad) {
    t.g_m = bag.y * g_lse - rate;
    t.g_cov = -0.5 * rate;
  }
  return t;
}

BagTerm normal_term(const BagData& bag, const GaussianMarginal& q, double log_tau, bool want_grad) {
  BagTerm t;
  const VectorXd& w = bag.weights;
  const double D = std::exp(log_tau) * w.squaredNorm();
  const double r = bag.y - w.dot(q.mean);
  const double quad = w.dot(q.cov * w);
  t.value = -0.5 * (r * r + quad) / D - 0.5 * std::log(2.0 * M_PI * D);
  if (want_grad) {
    t.g_m = (r / D) * w;
    t.g_cov = (-0.5 / D) * (w * w.transpose());
    t.g_log_tau = 0.5 * (r * r + quad) / D - 0.5;
  }
  return t;
}

BagTerm exponential_term(const BagData& bag, const GaussianMarginal& q, bool want_grad) {
  BagTerm t;
  const VectorXd& w = bag.weights;
  const Eigen::ArrayXd lo = w.array() * (q.mean.array() - 0.5 * q.var.array()).exp();
  const Eigen::ArrayXd hi = w.array() * (q.mean.array() + 0.5 * q.var.array()).exp();
  const double A = lo.sum();
  const double B = hi.sum();
  if (!(A > 0.0) || !(B > 0.0)) throw DegenerateBag(bag.id, "all weights are zero");
  t.value = -bag.y / A - std::log(B);
  if (want_grad) {
    const double c = bag.y / (A * A);
    t.g_m = (c * lo - hi / B).matrix();
    t.g_cov = (-0.5 * c * lo - 0.5 * hi / B).matrix();
  }
  return t;
}

CovMode mode_for(Likelihood l, Link link) {
  if (l == Likelihood::Normal) return CovMode::Full;
  if (l == Likelihood::Poisson && link == Link::Sq) return CovMode::Full;
  return CovMode::Diag;
}

}  // namespace

ElboResult vbagg_elbo(const VbaggModel& model, const BagBatch& batch, bool want_grad) {
  model.validate();
  const bool shared_tau = model.log_tau.size() == 1;
  GpEvaluator ev(model.state, model.jitter_base);
  const CovMode mode = mode_for(model.likelihood, model.link);
  ElboResult res;
  if (want_grad) res.g_log_tau = VectorXd::Zero(model.log_tau.size());
  double total = 0.0;
  for (const BagData* bag : batch.bags) {
    MatrixXd kxw;
    GaussianMarginal q = ev.moments(bag->X, mode, &kxw);
    q.bag_id = bag->id;
    BagTerm t;
    switch (model.likelihood) {
      case Likelihood::Poisson:
        t = model.link == Link::Sq ? poisson_sq_term(*bag, q, want_grad) : poisson_exp_term(*bag, q, want_grad);
        break;
      case Likelihood::Normal: {
        const Index ti = shared_tau ? 0 : bag->index;
        if (ti < 0 || ti >= model.log_tau.size()) throw DataError("bag '" + bag->id + "' has no noise parameter");
        t = normal_term(*bag, q, model.log_tau(ti), want_grad);
        if (want_grad) res.g_log_tau(ti) += t.g_log_tau;
        break;
      }
      case Likelihood::Exponential: t = exponential_term(*bag, q, want_grad); break;
    }
    total += t.value;
    if (want_grad) ev.backprop_bag(bag->X, kxw, t.g_m, t.g_cov, mode);
  }
  res.kl = ev.kl();
  const double share = batch.kl_share();
  res.value = total - share * res.kl;
  if (want_grad) {
    ev.add_kl(share);
    res.grad = ev.finish();
  }
  return res;
}

double poisson_elbo_sq(const VariationalState& state, const BagBatch& batch) {
  VbaggModel m{state, Likelihood::Poisson, Link::Sq, VectorXd::Zero(1), 1e-6};
  return vbagg_elbo(m, batch, false).value;
}

double poisson_elbo_exp(const VariationalState& state, const BagBatch& batch) {
  VbaggModel m{state, Likelihood::Poisson, Link::Exp, VectorXd::Zero(1), 1e-6};
  return vbagg_elbo(m, batch, false).value;
}

double normal_elbo(const VariationalState& state, const BagBatch& batch, const VectorXd& log_tau) {
  VbaggModel m{state, Likelihood::Normal, Link::Identity, log_tau, 1e-6};
  return vbagg_elbo(m, batch, false).value;
}

double exponential_elbo(const VariationalState& state, const BagBatch& batch, Link link) {
  VbaggModel m{state, Likelihood::Exponential, link, VectorXd::Zero(1), 1e-6};
  return vbagg_elbo(m, batch, false).value;
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const PredictiveDist& d) {
  j = nlohmann::json{{"link", std::string(to_string(d.link))}, {"m", d.m}, {"s", d.s}};
}

void from_json(const nlohmann::json& j, PredictiveDist& d) {
  d.link = link_from_string(j.at("link").get<std::string>());
  d.m = j.at("m").get<double>();
  d.s = j.at("s").get<double>();
}

PredictiveDist predictive_individual(const VariationalState& state, const VectorXd& x, Link link, double weight) {
  MatrixXd X(1, x.size());
  X.row(0) = x.transpose();
  const GaussianMarginal q = marginal_moments(state, X, CovMode::Diag);
  return PredictiveDist{link, q.mean(0), q.var(0), weight};
}

std::vector<PredictiveDist> predictive_rows(const VariationalState& state, const MatrixXd& X, Link link) {
  std::vector<PredictiveDist> out;
  out.reserve(static_cast<std::size_t>(X.rows()));
  if (X.rows() == 0) return out;
  const GpEvaluator ev(state);
  constexpr Index chunk = 4096;
  for (Index start = 0; start < X.rows(); start += chunk) {
    const Index n = std::min(chunk, X.rows() - start);
    const GaussianMarginal q = ev.moments(X.middleRows(start, n), CovMode::Diag);
    for (Index i = 0; i < n; ++i) out.push_back(PredictiveDist{link, q.mean(i), q.var(i), 1.0});
  }
  return out;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double predictive_mean(const PredictiveDist& d) {
  switch (d.link) {
    case Link::Exp: return std::exp(d.m + 0.5 * d.s);
    case Link::Sq: return d.m * d.m + d.s;
    case Link::Identity: return d.m;
  }
  return d.m;
}

namespace {

double point_value(const PredictiveDist& d) {
  switch (d.link) {
    case Link::Exp: return std::exp(d.m);
    case Link::Sq: return d.m * d.m;
    case Link::Identity: return d.m;
  }
  return d.m;
}

}  // namespace

double predictive_cdf(const PredictiveDist& d, double t) {
  if (d.s <= 0.0) return t >= point_value(d) ? 1.0 : 0.0;
  const double sd = std::sqrt(d.s);
  switch (d.link) {
    case Link::Exp:
      if (t <= 0.0) return 0.0;
      return normal_cdf((std::log(t) - d.m) / sd);
    case Link::Sq: {
      if (t <= 0.0) return 0.0;
      const double r = std::sqrt(t);
      return std::max(0.0, normal_cdf((r - d.m) / sd) - normal_cdf((-r - d.m) / sd));
    }
    case Link::Identity: return normal_cdf((t - d.m) / sd);
  }
  return 0.0;
}

double predictive_quantile(const PredictiveDist& d, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("quantile level must lie in (0,1)");
  if (d.s <= 0.0) return point_value(d);
  const double sd = std::sqrt(d.s);
  // Bisect in the coordinate where the cdf is a plain Gaussian expression:
  // log t (Exp), sqrt t (Sq) or t itself.
  double lo = d.m - 40.0 * sd;
  double hi = d.m + 40.0 * sd;
  if (d.link == Link::Sq) {
    lo = 0.0;
    hi = std::abs(d.m) + 40.0 * sd;
  }
  auto to_value = [&](double u) {
    switch (d.link) {
      case Link::Exp: return std::exp(u);
      case Link::Sq: return u * u;
      case Link::Identity: return u;
    }
    return u;
  };
  const double tol = 1e-13 * std::max({std::abs(lo), std::abs(hi), 1.0});
  for (int it = 0; it < 400 && hi - lo > tol; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    if (predictive_cdf(d, to_value(mid)) < alpha)
      lo = mid;
    else
      hi = mid;
  }
  return to_value(0.5 * (lo + hi));
}

}  // namespace aggva
