#include "aggva/data.hpp"

#include "aggva/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace aggva {

namespace fs = std::filesystem;

Index BaggedDataset::bag_position(const std::string& id) const {
  if (index_.size() != bags.size()) {
    for (std::size_t b = 0; b < bags.size(); ++b)
      if (bags[b].id == id) return static_cast<Index>(b);
    return -1;
  }
  auto it = index_.find(id);
  return it == index_.end() ? -1 : it->second;
}

void BaggedDataset::rebuild_index() {
  index_.clear();
  for (std::size_t b = 0; b < bags.size(); ++b) index_.emplace(bags[b].id, static_cast<Index>(b));
  for (auto& b : bags) b.members.clear();
  for (std::size_t i = 0; i < bag_of.size(); ++i)
    if (bag_of[i] >= 0 && bag_of[i] < num_bags()) bags[static_cast<std::size_t>(bag_of[i])].members.push_back(static_cast<Index>(i));
}

void BaggedDataset::validate() const {
  const Index n = X.rows();
  if (static_cast<Index>(individual_id.size()) != n || static_cast<Index>(bag_of.size()) != n || p.size() != n)
    throw DataError("dataset columns have inconsistent lengths");
  if (S.size() != 0 && S.rows() != n) throw DataError("spatial coordinates do not match individuals");
  if (true_rate && true_rate->size() != n) throw DataError("true_rate does not match individuals");
  if (true_y && true_y->size() != n) throw DataError("true_y does not match individuals");
  if (!X.allFinite()) throw DataError("covariates contain non-finite values");
  for (Index i = 0; i < n; ++i) {
    if (!(p(i) >= 0.0)) throw DataError("individual '" + individual_id[static_cast<std::size_t>(i)] + "' has negative weight");
    if (bag_of[static_cast<std::size_t>(i)] < 0 || bag_of[static_cast<std::size_t>(i)] >= num_bags())
      throw DataError("individual '" + individual_id[static_cast<std::size_t>(i)] + "' refers to a missing bag");
  }
  std::vector<double> sums(bags.size(), 0.0);
  std::vector<Index> counts(bags.size(), 0);
  for (Index i = 0; i < n; ++i) {
    sums[static_cast<std::size_t>(bag_of[static_cast<std::size_t>(i)])] += p(i);
    ++counts[static_cast<std::size_t>(bag_of[static_cast<std::size_t>(i)])];
  }
  for (std::size_t b = 0; b < bags.size(); ++b) {
    if (counts[b] < 1) throw DataError("bag '" + bags[b].id + "' has no individuals");
    if (std::abs(sums[b] - bags[b].p_total) > 1e-9 * std::max(1.0, std::abs(bags[b].p_total)))
      throw DataError("bag '" + bags[b].id + "': p_total does not equal the sum of member weights");
    if (!(sums[b] > 0.0)) throw DataError("bag '" + bags[b].id + "' has zero total weight");
    if (static_cast<Index>(bags[b].members.size()) != counts[b])
      throw DataError("bag '" + bags[b].id + "': member index is stale");
  }
}

bool BaggedDataset::operator==(const BaggedDataset& o) const {
  auto same_opt = [](const std::optional<VectorXd>& a, const std::optional<VectorXd>& b) {
    if (a.has_value() != b.has_value()) return false;
    return !a || *a == *b;
  };
  if (X.rows() != o.X.rows() || X.cols() != o.X.cols() || X != o.X) return false;
  if (S.rows() != o.S.rows() || S.cols() != o.S.cols() || (S.size() && S != o.S)) return false;
  if (individual_id != o.individual_id || bag_of != o.bag_of || p != o.p) return false;
  if (!same_opt(true_rate, o.true_rate) || !same_opt(true_y, o.true_y)) return false;
  if (bags.size() != o.bags.size()) return false;
  for (std::size_t b = 0; b < bags.size(); ++b)
    if (bags[b].id != o.bags[b].id || bags[b].y != o.bags[b].y || bags[b].p_total != o.bags[b].p_total ||
        bags[b].members != o.bags[b].members)
      return false;
  return true;
}

std::vector<BagData> make_bag_data(const BaggedDataset& ds, const std::vector<Index>& positions) {
  std::vector<BagData> out;
  out.reserve(positions.size());
  for (std::size_t k = 0; k < positions.size(); ++k) {
    const DatasetBag& src = ds.bags[static_cast<std::size_t>(positions[k])];
    BagData b;
    b.id = src.id;
    b.y = src.y;
    b.members = src.members;
    b.X.resize(static_cast<Index>(src.members.size()), ds.dim());
    b.weights.resize(static_cast<Index>(src.members.size()));
    for (std::size_t i = 0; i < src.members.size(); ++i) {
      b.X.row(static_cast<Index>(i)) = ds.X.row(src.members[i]);
      b.weights(static_cast<Index>(i)) = ds.p(src.members[i]);
    }
    b.population = b.weights.sum();
    b.index = static_cast<Index>(k);
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<Index> member_rows(const BaggedDataset& ds, const std::vector<Index>& positions) {
  std::vector<Index> rows;
  for (Index b : positions) {
    const auto& m = ds.bags[static_cast<std::size_t>(b)].members;
    rows.insert(rows.end(), m.begin(), m.end());
  }
  return rows;
}

// ---------------------------------------------------------------------------

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

SwissRoll gen_swiss_roll(Index n_points, std::mt19937_64& rng) {
  if (n_points < 1) throw ConfigError("swiss roll needs at least one point");
  SwissRoll out;
  out.points.resize(n_points, 3);
  out.color.resize(n_points);
  for (Index i = 0; i < n_points; ++i) {
    const double t = 1.5 * M_PI * (1.0 + 2.0 * uniform01(rng));
    const double h = 21.0 * uniform01(rng);
    out.points(i, 0) = t * std::cos(t);
    out.points(i, 1) = h;
    out.points(i, 2) = t * std::sin(t);
    out.color(i) = t;
  }
  return out;
}

NegBinomialParams negative_binomial_params(double mean, double std) {
  const double var = std * std;
  if (!(mean > 0.0) || !(var > mean))
    throw ConfigError("negative binomial bag sizes need N_std^2 > N_mean > 0 (got mean " + std::to_string(mean) +
                      ", std " + std::to_string(std) + "); the NB parametrization requires over-dispersion");
  return {mean * mean / (var - mean), mean / var};
}

std::vector<Index> sample_bag_sizes(Index n_bags, double mean, double std, std::mt19937_64& rng) {
  const NegBinomialParams nb = negative_binomial_params(mean, std);
  // NB(r, p) as a gamma-Poisson mixture: lambda ~ Gamma(r, (1-p)/p), N ~ Poisson(lambda).
  std::gamma_distribution<double> gamma(nb.r, (1.0 - nb.p) / nb.p);
  std::vector<Index> sizes(static_cast<std::size_t>(n_bags));
  for (auto& s : sizes) {
    do {
      const double lambda = gamma(rng);
      std::poisson_distribution<long long> pois(std::max(lambda, 1e-300));
      s = static_cast<Index>(pois(rng));
    } while (s < 1);
  }
  return sizes;
}

std::vector<Index> bag_by_axis(const MatrixXd& points, const std::vector<Index>& sizes, Index axis) {
  const Index total = std::accumulate(sizes.begin(), sizes.end(), Index{0});
  if (total != points.rows())
    throw DataError("bag sizes sum to " + std::to_string(total) + " but there are " + std::to_string(points.rows()) +
                    " points");
  if (axis < 0 || axis >= points.cols()) throw ConfigError("bagging axis out of range");
  std::vector<Index> order(static_cast<std::size_t>(points.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return points(a, axis) < points(b, axis); });
  std::vector<Index> bag(order.size());
  std::size_t pos = 0;
  for (std::size_t b = 0; b < sizes.size(); ++b)
    for (Index k = 0; k < sizes[b]; ++k) bag[static_cast<std::size_t>(order[pos++])] = static_cast<Index>(b);
  return bag;
}

MatrixXd random_orthogonal(Index dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd G(dim, dim);
  for (Index c = 0; c < dim; ++c)
    for (Index r = 0; r < dim; ++r) G(r, c) = normal(rng);
  Eigen::HouseholderQR<MatrixXd> qr(G);
  MatrixXd Q = qr.householderQ() * MatrixXd::Identity(dim, dim);
  const MatrixXd R = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index k = 0; k < dim; ++k)
    if (R(k, k) < 0.0) Q.col(k) = -Q.col(k);
  return Q;
}

MatrixXd random_orthogonal_embed(const MatrixXd& points, Index target_dim, std::mt19937_64& rng) {
  if (target_dim < points.cols()) throw ConfigError("embedding dimension is smaller than the input dimension");
  MatrixXd padded = MatrixXd::Zero(points.rows(), target_dim);
  padded.leftCols(points.cols()) = points;
  const MatrixXd Q = random_orthogonal(target_dim, rng);
  return padded * Q.transpose();
}

void sample_labels(BaggedDataset& ds, Likelihood family, std::mt19937_64& rng, double tau) {
  if (!ds.true_rate) throw DataError("sample_labels needs true rates");
  const VectorXd& rate = *ds.true_rate;
  VectorXd y(ds.num_individuals());
  for (Index i = 0; i < rate.size(); ++i) {
    switch (family) {
      case Likelihood::Poisson: {
        const double mean = ds.p(i) * rate(i);
        if (mean < 0.0) throw DataError("negative Poisson rate for individual '" + ds.individual_id[static_cast<std::size_t>(i)] + "'");
        if (mean == 0.0) {
          y(i) = 0.0;
        } else {
          std::poisson_distribution<long long> pois(mean);
          y(i) = static_cast<double>(pois(rng));
        }
        break;
      }
      case Likelihood::Normal: {
        std::normal_distribution<double> normal(ds.p(i) * rate(i), ds.p(i) * std::sqrt(tau));
        y(i) = normal(rng);
        break;
      }
      case Likelihood::Exponential: {
        if (!(rate(i) > 0.0)) throw DataError("exponential model needs a positive mean");
        std::exponential_distribution<double> ex(1.0 / rate(i));
        y(i) = ex(rng);
        break;
      }
    }
  }
  for (auto& bag : ds.bags) {
    double total = 0.0;
    for (Index i : bag.members) total += y(i);
    if (family == Likelihood::Exponential) {
      double mean = 0.0;
      for (Index i : bag.members) mean += ds.p(i) * rate(i);
      std::exponential_distribution<double> ex(1.0 / mean);
      total = ex(rng);
    }
    bag.y = total;
  }
  ds.true_y = std::move(y);
  ds.meta.likelihood = family;
}

BaggedDataset make_swiss_roll_dataset(const SwissRollConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  const std::vector<Index> sizes = sample_bag_sizes(cfg.n_bags, cfg.n_mean, cfg.n_std, rng);
  const Index total = std::accumulate(sizes.begin(), sizes.end(), Index{0});
  const SwissRoll roll = gen_swiss_roll(total, rng);
  const std::vector<Index> bag = bag_by_axis(roll.points, sizes, 2);

  BaggedDataset ds;
  ds.X = random_orthogonal_embed(roll.points, cfg.embed_dim, rng);
  ds.individual_id.resize(static_cast<std::size_t>(total));
  for (Index i = 0; i < total; ++i) ds.individual_id[static_cast<std::size_t>(i)] = std::to_string(i);
  ds.bag_of = bag;
  ds.p = VectorXd::Ones(total);
  ds.true_rate = roll.color;
  ds.bags.resize(sizes.size());
  for (std::size_t b = 0; b < sizes.size(); ++b) {
    ds.bags[b].id = "bag" + std::to_string(b);
    ds.bags[b].p_total = static_cast<double>(sizes[b]);
  }
  ds.rebuild_index();
  ds.meta.generator = "swiss_roll";
  ds.meta.seed = cfg.seed;
  sample_labels(ds, cfg.likelihood, rng, cfg.tau);
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::EarlyStop: return "early_stop";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "early_stop") return Split::EarlyStop;
  if (s == "validation") return Split::Validation;
  if (s == "test") return Split::Test;
  throw DataError("unknown split name '" + std::string(s) + "'");
}

std::vector<Index> SplitSpec::bags_in(const BaggedDataset& ds, Split s) const {
  std::vector<Index> out;
  for (Index b = 0; b < ds.num_bags(); ++b) {
    auto it = assignment.find(ds.bags[static_cast<std::size_t>(b)].id);
    if (it != assignment.end() && it->second == s) out.push_back(b);
  }
  return out;
}

void SplitSpec::validate(const BaggedDataset& ds) const {
  for (const auto& bag : ds.bags)
    if (!assignment.count(bag.id)) throw DataError("split assignment is missing bag '" + bag.id + "'");
  for (const auto& [id, s] : assignment)
    if (ds.bag_position(id) < 0) throw DataError("split assignment names unknown bag '" + id + "'");
}

std::array<Index, 4> split_sizes(Index n, const std::array<double, 4>& fractions) {
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split fractions must be nonnegative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  std::array<Index, 4> sizes{};
  std::array<double, 4> rem{};
  Index used = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    const double exact = fractions[k] * static_cast<double>(n);
    sizes[k] = static_cast<Index>(std::floor(exact + 1e-9));
    rem[k] = exact - static_cast<double>(sizes[k]);
    used += sizes[k];
  }
  std::array<std::size_t, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; used < n; k = (k + 1) % 4) {
    ++sizes[order[k]];
    ++used;
  }
  return sizes;
}

SplitSpec split_dataset(const BaggedDataset& ds, const std::array<double, 4>& fractions, std::uint64_t seed) {
  const Index n = ds.num_bags();
  const std::array<Index, 4> target = split_sizes(n, fractions);
  for (std::size_t k = 0; k < 4; ++k)
    if (fractions[k] > 0.0 && target[k] == 0)
      throw DataError("split '" + std::string(to_string(kAllSplits[k])) + "' would receive no bags");

  // Stratify: 4 quantile bins of the bag output, shuffled within each bin.
  std::vector<Index> by_y(static_cast<std::size_t>(n));
  std::iota(by_y.begin(), by_y.end(), Index{0});
  std::stable_sort(by_y.begin(), by_y.end(), [&](Index a, Index b) {
    return ds.bags[static_cast<std::size_t>(a)].y < ds.bags[static_cast<std::size_t>(b)].y;
  });
  std::mt19937_64 rng(seed);
  std::vector<Index> order;
  order.reserve(by_y.size());
  constexpr Index bins = 4;
  for (Index bin = 0; bin < bins; ++bin) {
    const auto lo = static_cast<std::size_t>(bin * n / bins);
    const auto hi = static_cast<std::size_t>((bin + 1) * n / bins);
    std::vector<Index> chunk(by_y.begin() + static_cast<std::ptrdiff_t>(lo), by_y.begin() + static_cast<std::ptrdiff_t>(hi));
    for (std::size_t i = chunk.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
      std::swap(chunk[i - 1], chunk[std::min(j, i - 1)]);
    }
    order.insert(order.end(), chunk.begin(), chunk.end());
  }

  SplitSpec spec;
  spec.seed = seed;
  std::array<Index, 4> assigned{};
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    std::size_t best = 4;
    double best_deficit = -1e300;
    for (std::size_t k = 0; k < 4; ++k) {
      if (assigned[k] >= target[k]) continue;
      const double deficit =
          static_cast<double>(target[k]) * static_cast<double>(pos + 1) / static_cast<double>(n) - static_cast<double>(assigned[k]);
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = k;
      }
    }
    ++assigned[best];
    spec.assignment[ds.bags[static_cast<std::size_t>(order[pos])].id] = kAllSplits[best];
  }
  return spec;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_number(const std::string& s, const std::string& file, std::size_t row, const std::string& column) {
  double v = 0.0;
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  while (begin < end && *begin == ' ') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end)
    throw DataError(file + " row " + std::to_string(row) + ": column '" + column + "' is not a number ('" + s + "')");
  return v;
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace

BaggedDataset load_csv(const fs::path& individuals, const fs::path& bags_path, Likelihood likelihood) {
  BaggedDataset ds;
  ds.meta.likelihood = likelihood;

  const auto bag_lines = read_lines(bags_path);
  const std::string bag_file = bags_path.filename().string();
  if (bag_lines.empty()) throw DataError(bag_file + ": missing header");
  const auto bag_header = split_line(bag_lines[0]);
  auto col_of = [](const std::vector<std::string>& header, const std::string& name) -> int {
    for (std::size_t k = 0; k < header.size(); ++k)
      if (header[k] == name) return static_cast<int>(k);
    return -1;
  };
  const int c_bid = col_of(bag_header, "bag_id");
  const int c_y = col_of(bag_header, "y");
  const int c_pt = col_of(bag_header, "p_total");
  if (c_bid < 0 || c_y < 0 || c_pt < 0) throw DataError(bag_file + ": header must contain bag_id,y,p_total");
  std::unordered_map<std::string, Index> bag_pos;
  for (std::size_t r = 1; r < bag_lines.size(); ++r) {
    const auto f = split_line(bag_lines[r]);
    if (f.size() != bag_header.size()) throw DataError(bag_file + " row " + std::to_string(r) + ": wrong number of fields");
    DatasetBag b;
    b.id = f[static_cast<std::size_t>(c_bid)];
    b.y = parse_number(f[static_cast<std::size_t>(c_y)], bag_file, r, "y");
    b.p_total = parse_number(f[static_cast<std::size_t>(c_pt)], bag_file, r, "p_total");
    if (b.p_total < 0.0) throw DataError(bag_file + " row " + std::to_string(r) + ": negative p_total");
    if (!bag_pos.emplace(b.id, static_cast<Index>(ds.bags.size())).second)
      throw DataError(bag_file + " row " + std::to_string(r) + ": duplicate bag_id '" + b.id + "'");
    ds.bags.push_back(std::move(b));
  }

  const auto lines = read_lines(individuals);
  const std::string ind_file = individuals.filename().string();
  if (lines.empty()) throw DataError(ind_file + ": missing header");
  const auto header = split_line(lines[0]);
  const int c_iid = col_of(header, "individual_id");
  const int c_ibag = col_of(header, "bag_id");
  const int c_p = col_of(header, "p");
  if (c_iid < 0) throw DataError(ind_file + ": missing column 'individual_id'");
  if (c_ibag < 0) throw DataError(ind_file + ": missing column 'bag_id'");
  if (c_p < 0) throw DataError(ind_file + ": missing column 'p'");
  std::vector<int> x_cols;
  for (int k = 1;; ++k) {
    const int c = col_of(header, "x_" + std::to_string(k));
    if (c < 0) break;
    x_cols.push_back(c);
  }
  if (x_cols.empty()) throw DataError(ind_file + ": missing covariate columns x_1..x_d");
  const int c_s1 = col_of(header, "s_1");
  const int c_s2 = col_of(header, "s_2");
  if ((c_s1 < 0) != (c_s2 < 0)) throw DataError(ind_file + ": spatial columns must come as s_1,s_2");
  const int c_rate = col_of(header, "true_rate");
  const int c_ty = col_of(header, "true_y");

  const Index n = static_cast<Index>(lines.size()) - 1;
  const Index d = static_cast<Index>(x_cols.size());
  ds.X.resize(n, d);
  if (c_s1 >= 0) ds.S.resize(n, 2);
  ds.p.resize(n);
  VectorXd rate(n), ty(n);
  ds.individual_id.reserve(static_cast<std::size_t>(n));
  ds.bag_of.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const std::size_t r = static_cast<std::size_t>(i) + 1;
    const auto f = split_line(lines[r]);
    if (f.size() != header.size()) throw DataError(ind_file + " row " + std::to_string(r) + ": wrong number of fields");
    ds.individual_id.push_back(f[static_cast<std::size_t>(c_iid)]);
    const std::string& bid = f[static_cast<std::size_t>(c_ibag)];
    auto it = bag_pos.find(bid);
    if (it == bag_pos.end())
      throw DataError(ind_file + " row " + std::to_string(r) + ": bag_id '" + bid + "' is not listed in " + bag_file);
    ds.bag_of.push_back(it->second);
    ds.p(i) = parse_number(f[static_cast<std::size_t>(c_p)], ind_file, r, "p");
    if (ds.p(i) < 0.0) throw DataError(ind_file + " row " + std::to_string(r) + ": negative weight p");
    for (Index k = 0; k < d; ++k)
      ds.X(i, k) = parse_number(f[static_cast<std::size_t>(x_cols[static_cast<std::size_t>(k)])], ind_file, r,
                                "x_" + std::to_string(k + 1));
    if (c_s1 >= 0) {
      ds.S(i, 0) = parse_number(f[static_cast<std::size_t>(c_s1)], ind_file, r, "s_1");
      ds.S(i, 1) = parse_number(f[static_cast<std::size_t>(c_s2)], ind_file, r, "s_2");
    }
    if (c_rate >= 0) rate(i) = parse_number(f[static_cast<std::size_t>(c_rate)], ind_file, r, "true_rate");
    if (c_ty >= 0) ty(i) = parse_number(f[static_cast<std::size_t>(c_ty)], ind_file, r, "true_y");
  }
  if (c_rate >= 0) ds.true_rate = std::move(rate);
  if (c_ty >= 0) ds.true_y = std::move(ty);
  ds.rebuild_index();
  ds.validate();
  return ds;
}

IndividualRows load_individuals_csv(const fs::path& path) {
  const auto lines = read_lines(path);
  const std::string file = path.filename().string();
  if (lines.empty()) throw DataError(file + ": missing header");
  const auto header = split_line(lines[0]);
  auto col_of = [&](const std::string& name) -> int {
    for (std::size_t k = 0; k < header.size(); ++k)
      if (header[k] == name) return static_cast<int>(k);
    return -1;
  };
  const int c_iid = col_of("individual_id");
  if (c_iid < 0) throw DataError(file + ": missing column 'individual_id'");
  const int c_bag = col_of("bag_id");
  const int c_p = col_of("p");
  std::vector<int> x_cols;
  for (int k = 1;; ++k) {
    const int c = col_of("x_" + std::to_string(k));
    if (c < 0) break;
    x_cols.push_back(c);
  }
  if (x_cols.empty()) throw DataError(file + ": missing covariate columns x_1..x_d");
  IndividualRows out;
  const Index n = static_cast<Index>(lines.size()) - 1;
  out.X.resize(n, static_cast<Index>(x_cols.size()));
  out.p = VectorXd::Ones(n);
  for (Index i = 0; i < n; ++i) {
    const std::size_t r = static_cast<std::size_t>(i) + 1;
    const auto f = split_line(lines[r]);
    if (f.size() != header.size()) throw DataError(file + " row " + std::to_string(r) + ": wrong number of fields");
    out.individual_id.push_back(f[static_cast<std::size_t>(c_iid)]);
    out.bag_id.push_back(c_bag >= 0 ? f[static_cast<std::size_t>(c_bag)] : std::string());
    if (c_p >= 0) out.p(i) = parse_number(f[static_cast<std::size_t>(c_p)], file, r, "p");
    for (std::size_t k = 0; k < x_cols.size(); ++k)
      out.X(i, static_cast<Index>(k)) =
          parse_number(f[static_cast<std::size_t>(x_cols[k])], file, r, "x_" + std::to_string(k + 1));
  }
  return out;
}

void save_csv(const BaggedDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "individuals.csv");
    if (!out) throw DataError("cannot write " + (dir / "individuals.csv").string());
    out << "individual_id,bag_id,p";
    for (Index k = 0; k < ds.dim(); ++k) out << ",x_" << (k + 1);
    if (ds.S.size()) out << ",s_1,s_2";
    if (ds.true_rate) out << ",true_rate";
    if (ds.true_y) out << ",true_y";
    out << '\n';
    for (Index i = 0; i < ds.num_individuals(); ++i) {
      out << ds.individual_id[static_cast<std::size_t>(i)] << ',' << ds.bags[static_cast<std::size_t>(ds.bag_of[static_cast<std::size_t>(i)])].id
          << ',' << format_number(ds.p(i));
      for (Index k = 0; k < ds.dim(); ++k) out << ',' << format_number(ds.X(i, k));
      if (ds.S.size()) out << ',' << format_number(ds.S(i, 0)) << ',' << format_number(ds.S(i, 1));
      if (ds.true_rate) out << ',' << format_number((*ds.true_rate)(i));
      if (ds.true_y) out << ',' << format_number((*ds.true_y)(i));
      out << '\n';
    }
  }
  std::ofstream out(dir / "bags.csv");
  if (!out) throw DataError("cannot write " + (dir / "bags.csv").string());
  out << "bag_id,y,p_total\n";
  for (const auto& b : ds.bags) out << b.id << ',' << format_number(b.y) << ',' << format_number(b.p_total) << '\n';
}

BaggedDataset load_dataset_dir(const fs::path& dir) {
  Likelihood lik = Likelihood::Poisson;
  nlohmann::json meta;
  if (fs::exists(dir / "dataset.json")) {
    std::ifstream in(dir / "dataset.json");
    meta = nlohmann::json::parse(in, nullptr, false);
    if (meta.is_discarded()) throw DataError("dataset.json is not valid JSON");
    lik = likelihood_from_string(meta.value("likelihood", std::string("poisson")));
  }
  BaggedDataset ds = load_csv(dir / "individuals.csv", dir / "bags.csv", lik);
  if (!meta.is_null()) {
    ds.meta.generator = meta.value("generator", std::string("csv"));
    ds.meta.seed = meta.value("seed", std::uint64_t{0});
  }
  return ds;
}

void save_dataset_dir(const BaggedDataset& ds, const fs::path& dir) {
  save_csv(ds, dir);
  const nlohmann::json meta{{"likelihood", std::string(to_string(ds.meta.likelihood))},
                            {"generator", ds.meta.generator},
                            {"seed", ds.meta.seed},
                            {"d", ds.dim()},
                            {"n_individuals", ds.num_individuals()},
                            {"n_bags", ds.num_bags()}};
  std::ofstream out(dir / "dataset.json");
  out << meta.dump(2) << '\n';
}

nlohmann::json splits_to_json(const SplitSpec& s) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, split] : s.assignment) j[id] = std::string(to_string(split));
  return j;
}

SplitSpec splits_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("splits.json must be an object {bag_id: split}");
  SplitSpec s;
  for (const auto& [id, v] : j.items()) s.assignment[id] = split_from_string(v.get<std::string>());
  return s;
}

void save_splits(const SplitSpec& s, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << splits_to_json(s).dump(2) << '\n';
}

SplitSpec load_splits(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw DataError(path.string() + " is not valid JSON");
  return splits_from_json(j);
}

}  // namespace aggva
