#include "aggva/kernels.hpp"

#include "aggva/error.hpp"

#include <algorithm>
#include <cmath>

namespace aggva {

namespace {

constexpr double kSqrt3 = 1.7320508075688772;

bool is_leaf(const KernelSpec& s) { return s.family != KernelFamily::Additive; }

Index leaf_params(const KernelSpec& s) { return 1 + static_cast<Index>(s.log_lengthscales.size()); }

// Columns of X selected by active_dims (all columns when empty).
MatrixXd active_columns(const KernelSpec& s, const MatrixXd& X) {
  if (s.active_dims.empty()) return X;
  MatrixXd out(X.rows(), static_cast<Index>(s.active_dims.size()));
  for (std::size_t k = 0; k < s.active_dims.size(); ++k) out.col(static_cast<Index>(k)) = X.col(s.active_dims[k]);
  return out;
}

VectorXd active_entries(const KernelSpec& s, const Eigen::Ref<const VectorXd>& x) {
  if (s.active_dims.empty()) return x;
  VectorXd out(static_cast<Index>(s.active_dims.size()));
  for (std::size_t k = 0; k < s.active_dims.size(); ++k) {
    const int d = s.active_dims[k];
    if (d < 0 || d >= x.size())
      throw DimensionMismatch("kernel active dimension " + std::to_string(d) + " outside covariate of size " +
                              std::to_string(x.size()));
    out(static_cast<Index>(k)) = x(d);
  }
  return out;
}

MatrixXd squared_distances(const MatrixXd& A, const MatrixXd& B) {
  const VectorXd a2 = A.rowwise().squaredNorm();
  const VectorXd b2 = B.rowwise().squaredNorm();
  MatrixXd D = -2.0 * (A * B.transpose());
  D.colwise() += a2;
  D.rowwise() += b2.transpose();
  return D.cwiseMax(0.0);
}

// Inputs rescaled so the squared distance is directly the exponent's argument.
MatrixXd scaled_inputs(const KernelSpec& s, const MatrixXd& X) {
  MatrixXd A = active_columns(s, X);
  if (s.family == KernelFamily::Rbf) {
    A /= std::exp(s.log_lengthscales[0]);
  } else if (s.family == KernelFamily::Ard) {
    for (Index k = 0; k < A.cols(); ++k) A.col(k) /= std::exp(0.5 * s.log_lengthscales[static_cast<std::size_t>(k)]);
  }
  return A;
}

double leaf_eval(const KernelSpec& s, const VectorXd& x, const VectorXd& y, double* grad) {
  const double gamma = std::exp(s.log_scale);
  switch (s.family) {
    case KernelFamily::Rbf: {
      const double l2 = std::exp(2.0 * s.log_lengthscales[0]);
      const double r2 = (x - y).squaredNorm() / l2;
      const double k = gamma * std::exp(-0.5 * r2);
      if (grad) {
        grad[0] = k;
        grad[1] = k * r2;
      }
      return k;
    }
    case KernelFamily::Ard: {
      double q = 0.0;
      for (Index i = 0; i < x.size(); ++i) {
        const double diff = x(i) - y(i);
        q += diff * diff / std::exp(s.log_lengthscales[static_cast<std::size_t>(i)]);
      }
      const double k = gamma * std::exp(-0.5 * q);
      if (grad) {
        grad[0] = k;
        for (Index i = 0; i < x.size(); ++i) {
          const double diff = x(i) - y(i);
          grad[1 + i] = 0.5 * k * diff * diff / std::exp(s.log_lengthscales[static_cast<std::size_t>(i)]);
        }
      }
      return k;
    }
    case KernelFamily::Matern32: {
      const double a = kSqrt3 / std::exp(s.log_lengthscales[0]);
      const double d = (x - y).norm();
      const double e = std::exp(-a * d);
      const double k = gamma * (1.0 + a * d) * e;
      if (grad) {
        grad[0] = k;
        grad[1] = gamma * a * a * d * d * e;
      }
      return k;
    }
    case KernelFamily::Additive: break;
  }
  return 0.0;
}

// Appends every leaf (depth-first) together with its parameter offset.
void collect_leaves(const KernelSpec& s, Index& offset, std::vector<std::pair<const KernelSpec*, Index>>& out) {
  if (is_leaf(s)) {
    out.emplace_back(&s, offset);
    offset += leaf_params(s);
    return;
  }
  for (const auto& c : s.children) collect_leaves(c, offset, out);
}

std::vector<std::pair<const KernelSpec*, Index>> leaves(const KernelSpec& s) {
  std::vector<std::pair<const KernelSpec*, Index>> out;
  Index offset = 0;
  collect_leaves(s, offset, out);
  return out;
}

MatrixXd leaf_matrix(const KernelSpec& s, const MatrixXd& X, const MatrixXd& Y, bool same) {
  const double gamma = std::exp(s.log_scale);
  if (s.family == KernelFamily::Matern32) {
    const MatrixXd A = active_columns(s, X);
    const MatrixXd B = same ? A : active_columns(s, Y);
    MatrixXd D = squared_distances(A, B).cwiseSqrt();
    if (same) D.diagonal().setZero();
    const double a = kSqrt3 / std::exp(s.log_lengthscales[0]);
    return gamma * ((1.0 + a * D.array()) * (-a * D.array()).exp()).matrix();
  }
  const MatrixXd A = scaled_inputs(s, X);
  const MatrixXd B = same ? A : scaled_inputs(s, Y);
  MatrixXd D2 = squared_distances(A, B);
  if (same) D2.diagonal().setZero();
  return gamma * (-0.5 * D2.array()).exp().matrix();
}

}  // namespace

std::string_view to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::Rbf: return "rbf";
    case KernelFamily::Ard: return "ard";
    case KernelFamily::Matern32: return "matern32";
    case KernelFamily::Additive: return "additive";
  }
  return "?";
}

KernelFamily kernel_family_from_string(std::string_view s) {
  if (s == "rbf") return KernelFamily::Rbf;
  if (s == "ard") return KernelFamily::Ard;
  if (s == "matern32") return KernelFamily::Matern32;
  if (s == "additive") return KernelFamily::Additive;
  throw ConfigError("unknown kernel family '" + std::string(s) + "'");
}

KernelSpec KernelSpec::rbf(double lengthscale, double scale, std::vector<int> dims) {
  KernelSpec k;
  k.family = KernelFamily::Rbf;
  k.log_scale = std::log(scale);
  k.log_lengthscales = {std::log(lengthscale)};
  k.active_dims = std::move(dims);
  return k;
}

KernelSpec KernelSpec::ard(const std::vector<double>& lengthscales, double scale, std::vector<int> dims) {
  KernelSpec k;
  k.family = KernelFamily::Ard;
  k.log_scale = std::log(scale);
  k.log_lengthscales.clear();
  for (double l : lengthscales) k.log_lengthscales.push_back(std::log(l));
  k.active_dims = std::move(dims);
  return k;
}

KernelSpec KernelSpec::matern32(double range, double scale, std::vector<int> dims) {
  KernelSpec k;
  k.family = KernelFamily::Matern32;
  k.log_scale = std::log(scale);
  k.log_lengthscales = {std::log(range)};
  k.active_dims = std::move(dims);
  return k;
}

KernelSpec KernelSpec::additive(std::vector<KernelSpec> children) {
  KernelSpec k;
  k.family = KernelFamily::Additive;
  k.log_scale = 0.0;
  k.log_lengthscales.clear();
  k.children = std::move(children);
  return k;
}

Index KernelSpec::num_params() const {
  if (is_leaf(*this)) return leaf_params(*this);
  Index n = 0;
  for (const auto& c : children) n += c.num_params();
  return n;
}

VectorXd KernelSpec::params() const {
  VectorXd out(num_params());
  for (auto [leaf, off] : leaves(*this)) {
    out(off) = leaf->log_scale;
    for (std::size_t k = 0; k < leaf->log_lengthscales.size(); ++k)
      out(off + 1 + static_cast<Index>(k)) = leaf->log_lengthscales[k];
  }
  return out;
}

void KernelSpec::set_params(const VectorXd& theta) {
  if (theta.size() != num_params())
    throw DimensionMismatch("kernel expects " + std::to_string(num_params()) + " parameters, got " +
                            std::to_string(theta.size()));
  if (is_leaf(*this)) {
    log_scale = theta(0);
    for (std::size_t k = 0; k < log_lengthscales.size(); ++k) log_lengthscales[k] = theta(1 + static_cast<Index>(k));
    return;
  }
  Index off = 0;
  for (auto& c : children) {
    const Index n = c.num_params();
    c.set_params(theta.segment(off, n));
    off += n;
  }
}

std::vector<std::string> KernelSpec::param_names() const {
  std::vector<std::string> names;
  int leaf_no = 0;
  for (auto [leaf, off] : leaves(*this)) {
    const std::string prefix = family == KernelFamily::Additive
                                   ? "kernel." + std::to_string(leaf_no) + "." + std::string(to_string(leaf->family))
                                   : "kernel." + std::string(to_string(leaf->family));
    names.push_back(prefix + ".log_scale");
    for (std::size_t k = 0; k < leaf->log_lengthscales.size(); ++k)
      names.push_back(prefix + ".log_lengthscale[" + std::to_string(k) + "]");
    ++leaf_no;
  }
  return names;
}

void KernelSpec::validate(Index input_dim) const {
  if (family == KernelFamily::Additive) {
    if (children.empty()) throw DataError("additive kernel needs at least one child");
    for (const auto& c : children) c.validate(input_dim);
    return;
  }
  if (!std::isfinite(log_scale)) throw DataError("kernel log_scale is not finite");
  for (double l : log_lengthscales)
    if (!std::isfinite(l)) throw DataError("kernel log_lengthscale is not finite");
  for (int d : active_dims)
    if (d < 0 || d >= input_dim)
      throw DimensionMismatch("kernel active dimension " + std::to_string(d) + " outside covariate of size " +
                              std::to_string(input_dim));
  const Index active = active_dims.empty() ? input_dim : static_cast<Index>(active_dims.size());
  const Index expected = family == KernelFamily::Ard ? active : 1;
  if (static_cast<Index>(log_lengthscales.size()) != expected)
    throw DimensionMismatch(std::string(to_string(family)) + " kernel expects " + std::to_string(expected) +
                            " lengthscales, got " + std::to_string(log_lengthscales.size()));
}

double KernelSpec::variance() const {
  if (is_leaf(*this)) return std::exp(log_scale);
  double v = 0.0;
  for (const auto& c : children) v += c.variance();
  return v;
}

void to_json(nlohmann::json& j, const KernelSpec& k) {
  j = nlohmann::json{{"family", std::string(to_string(k.family))},
                     {"log_scale", k.log_scale},
                     {"log_lengthscales", k.log_lengthscales},
                     {"active_dims", k.active_dims},
                     {"children", nlohmann::json::array()}};
  for (const auto& c : k.children) j["children"].push_back(c);
}

void from_json(const nlohmann::json& j, KernelSpec& k) {
  k.family = kernel_family_from_string(j.at("family").get<std::string>());
  k.log_scale = j.value("log_scale", 0.0);
  k.log_lengthscales = j.value("log_lengthscales", std::vector<double>{});
  if (k.family != KernelFamily::Additive && k.log_lengthscales.empty() && k.family != KernelFamily::Ard)
    k.log_lengthscales = {0.0};
  k.active_dims = j.value("active_dims", std::vector<int>{});
  k.children.clear();
  if (j.contains("children"))
    for (const auto& c : j.at("children")) k.children.push_back(c.get<KernelSpec>());
}

double kernel_eval(const KernelSpec& spec, const Eigen::Ref<const VectorXd>& x, const Eigen::Ref<const VectorXd>& y) {
  if (x.size() != y.size())
    throw DimensionMismatch("kernel_eval: covariate sizes " + std::to_string(x.size()) + " and " +
                            std::to_string(y.size()) + " differ");
  double total = 0.0;
  for (auto [leaf, off] : leaves(spec)) {
    (void)off;
    const VectorXd xa = active_entries(*leaf, x);
    const VectorXd ya = active_entries(*leaf, y);
    if (leaf->family == KernelFamily::Ard && static_cast<Index>(leaf->log_lengthscales.size()) != xa.size())
      throw DimensionMismatch("ARD kernel lengthscale count does not match active dimensions");
    total += leaf_eval(*leaf, xa, ya, nullptr);
  }
  return total;
}

double kernel_eval_grad(const KernelSpec& spec, const Eigen::Ref<const VectorXd>& x,
                        const Eigen::Ref<const VectorXd>& y, Eigen::Ref<VectorXd> grad) {
  if (x.size() != y.size()) throw DimensionMismatch("kernel_eval_grad: covariate sizes differ");
  if (grad.size() != spec.num_params()) throw DimensionMismatch("kernel_eval_grad: gradient buffer has wrong size");
  double total = 0.0;
  for (auto [leaf, off] : leaves(spec)) {
    const VectorXd xa = active_entries(*leaf, x);
    const VectorXd ya = active_entries(*leaf, y);
    if (leaf->family == KernelFamily::Ard && static_cast<Index>(leaf->log_lengthscales.size()) != xa.size())
      throw DimensionMismatch("ARD kernel lengthscale count does not match active dimensions");
    total += leaf_eval(*leaf, xa, ya, grad.data() + off);
  }
  return total;
}

MatrixXd kernel_matrix(const KernelSpec& spec, const MatrixXd& X, const MatrixXd& Y) {
  if (X.cols() != Y.cols())
    throw DimensionMismatch("kernel_matrix: inputs have " + std::to_string(X.cols()) + " and " +
                            std::to_string(Y.cols()) + " columns");
  spec.validate(X.cols());
  MatrixXd K = MatrixXd::Zero(X.rows(), Y.rows());
  for (auto [leaf, off] : leaves(spec)) {
    (void)off;
    K += leaf_matrix(*leaf, X, Y, false);
  }
  return K;
}

MatrixXd kernel_matrix(const KernelSpec& spec, const MatrixXd& X) {
  spec.validate(X.cols());
  MatrixXd K = MatrixXd::Zero(X.rows(), X.rows());
  for (auto [leaf, off] : leaves(spec)) {
    (void)off;
    K += leaf_matrix(*leaf, X, X, true);
  }
  return 0.5 * (K + K.transpose());
}

VectorXd kernel_param_contract(const KernelSpec& spec, const MatrixXd& X, const MatrixXd& Y, const MatrixXd& G) {
  VectorXd out = VectorXd::Zero(spec.num_params());
  for (auto [leaf, off] : leaves(spec)) {
    const double gamma = std::exp(leaf->log_scale);
    if (leaf->family == KernelFamily::Matern32) {
      const MatrixXd A = active_columns(*leaf, X);
      const MatrixXd B = active_columns(*leaf, Y);
      const MatrixXd D = squared_distances(A, B).cwiseSqrt();
      const double a = kSqrt3 / std::exp(leaf->log_lengthscales[0]);
      const Eigen::ArrayXXd E = (-a * D.array()).exp();
      const Eigen::ArrayXXd K = gamma * (1.0 + a * D.array()) * E;
      out(off) += (G.array() * K).sum();
      out(off + 1) += (G.array() * (gamma * a * a) * D.array().square() * E).sum();
      continue;
    }
    const MatrixXd A = scaled_inputs(*leaf, X);
    const MatrixXd B = scaled_inputs(*leaf, Y);
    const MatrixXd K = gamma * (-0.5 * squared_distances(A, B).array()).exp().matrix();
    const MatrixXd H = G.cwiseProduct(K);
    out(off) += H.sum();
    // sum_ij H_ij (a_ik - b_jk)^2, one entry per dimension k
    const VectorXd r = H.rowwise().sum();
    const VectorXd c = H.colwise().sum().transpose();
    const VectorXd per_dim = (A.array().square().colwise() * r.array()).colwise().sum().transpose() +
                             (B.array().square().colwise() * c.array()).colwise().sum().transpose() -
                             2.0 * (A.array() * (H * B).array()).colwise().sum().transpose();
    if (leaf->family == KernelFamily::Rbf) {
      out(off + 1) += per_dim.sum();
    } else {
      out.segment(off + 1, per_dim.size()) += 0.5 * per_dim;
    }
  }
  return out;
}

VectorXd kernel_param_contract_diag(const KernelSpec& spec, double g_sum) {
  VectorXd out = VectorXd::Zero(spec.num_params());
  for (auto [leaf, off] : leaves(spec)) out(off) = g_sum * std::exp(leaf->log_scale);
  return out;
}

MatrixXd kernel_input_contract(const KernelSpec& spec, const MatrixXd& X, const MatrixXd& Y, const MatrixXd& G) {
  MatrixXd out = MatrixXd::Zero(Y.rows(), Y.cols());
  for (auto [leaf, off] : leaves(spec)) {
    (void)off;
    const double gamma = std::exp(leaf->log_scale);
    const MatrixXd A = active_columns(*leaf, X);
    const MatrixXd B = active_columns(*leaf, Y);
    MatrixXd H;
    VectorXd inv_scale = VectorXd::Ones(A.cols());
    if (leaf->family == KernelFamily::Matern32) {
      const MatrixXd D = squared_distances(A, B).cwiseSqrt();
      const double a = kSqrt3 / std::exp(leaf->log_lengthscales[0]);
      H = G.cwiseProduct((gamma * a * a * (-a * D.array()).exp()).matrix());
    } else {
      const MatrixXd As = scaled_inputs(*leaf, X);
      const MatrixXd Bs = scaled_inputs(*leaf, Y);
      H = G.cwiseProduct(gamma * (-0.5 * squared_distances(As, Bs).array()).exp().matrix());
      if (leaf->family == KernelFamily::Rbf) {
        inv_scale.setConstant(std::exp(-2.0 * leaf->log_lengthscales[0]));
      } else {
        for (Index k = 0; k < inv_scale.size(); ++k)
          inv_scale(k) = std::exp(-leaf->log_lengthscales[static_cast<std::size_t>(k)]);
      }
    }
    const VectorXd c = H.colwise().sum().transpose();
    MatrixXd g = H.transpose() * A - c.asDiagonal() * B;
    g = g * inv_scale.asDiagonal();
    if (leaf->active_dims.empty()) {
      out += g;
    } else {
      for (std::size_t k = 0; k < leaf->active_dims.size(); ++k)
        out.col(leaf->active_dims[k]) += g.col(static_cast<Index>(k));
    }
  }
  return out;
}

MatrixXd CholeskyFactor::solve(const MatrixXd& B) const {
  MatrixXd Z = L_.triangularView<Eigen::Lower>().solve(B);
  return L_.transpose().triangularView<Eigen::Upper>().solve(Z);
}

VectorXd CholeskyFactor::solve(const VectorXd& b) const {
  VectorXd z = L_.triangularView<Eigen::Lower>().solve(b);
  return L_.transpose().triangularView<Eigen::Upper>().solve(z);
}

MatrixXd CholeskyFactor::solve_lower(const MatrixXd& B) const { return L_.triangularView<Eigen::Lower>().solve(B); }

double CholeskyFactor::log_det() const { return 2.0 * L_.diagonal().array().log().sum(); }

CholeskyFactor safe_cholesky(const MatrixXd& A, double jitter_base, std::string_view role) {
  if (A.rows() != A.cols()) throw DimensionMismatch("safe_cholesky: matrix '" + std::string(role) + "' is not square");
  if (!A.allFinite()) throw NotPositiveDefinite(std::string(role));
  const Index n = A.rows();
  double scale = n > 0 ? A.diagonal().mean() : 1.0;
  if (!(scale > 0.0)) scale = 1.0;
  for (int level = -1; level <= 6; ++level) {
    const double jitter = level < 0 ? 0.0 : jitter_base * scale * std::pow(10.0, level);
    MatrixXd M = A;
    M.diagonal().array() += jitter;
    Eigen::LLT<MatrixXd> llt(M);
    if (llt.info() != Eigen::Success) continue;
    MatrixXd L = llt.matrixL();
    if (!L.allFinite() || (L.diagonal().array() <= 0.0).any()) continue;
    return {std::move(L), jitter};
  }
  throw NotPositiveDefinite(std::string(role));
}

}  // namespace aggva
