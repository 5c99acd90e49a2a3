#pragma once

// Bagged datasets: synthetic swiss-roll generation, covariate-ordered bagging,
// label simulation, stratified four-way splits and CSV interchange.

#include "aggva/bags.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace aggva {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct DatasetBag {
  std::string id;
  double y = 0.0;
  double p_total = 0.0;
  std::vector<Index> members;
};

struct DatasetMetadata {
  Likelihood likelihood = Likelihood::Poisson;
  std::string generator = "csv";
  std::uint64_t seed = 0;
};

/// Individuals (rows) grouped into bags. Every individual belongs to exactly one
/// bag row; an individual observed in several bags appears as several rows with
/// distinct ids.
struct BaggedDataset {
  MatrixXd X;  // n x d covariates
  MatrixXd S;  // n x 2 spatial coordinates, or empty
  std::vector<std::string> individual_id;
  std::vector<Index> bag_of;  // position in `bags` for each row
  VectorXd p;                 // population / weight per row
  std::optional<VectorXd> true_rate;
  std::optional<VectorXd> true_y;
  std::vector<DatasetBag> bags;
  DatasetMetadata meta;

  [[nodiscard]] Index num_individuals() const noexcept { return X.rows(); }
  [[nodiscard]] Index dim() const noexcept { return X.cols(); }
  [[nodiscard]] Index num_bags() const noexcept { return static_cast<Index>(bags.size()); }

  /// Position of bag `id`, or -1.
  [[nodiscard]] Index bag_position(const std::string& id) const;
  void rebuild_index();
  /// Throws DataError on any invariant violation.
  void validate() const;

  bool operator==(const BaggedDataset& o) const;

 private:
  std::unordered_map<std::string, Index> index_;
};

/// Bag views for the listed bag positions. BagData::index is the position within `positions`.
std::vector<BagData> make_bag_data(const BaggedDataset& ds, const std::vector<Index>& positions);
/// Rows of every listed bag, in bag order.
std::vector<Index> member_rows(const BaggedDataset& ds, const std::vector<Index>& positions);

// ---------------------------------------------------------------------------
// Synthetic generation

struct SwissRoll {
  MatrixXd points;  // n x 3, (t cos t, h, t sin t)
  VectorXd color;   // t
};

SwissRoll gen_swiss_roll(Index n_points, std::mt19937_64& rng);

struct NegBinomialParams {
  double r = 0.0;  // shape
  double p = 0.0;  // success probability
};

/// Moment-matched NB: p = mean/std^2, r = mean^2/(std^2 - mean). Requires std^2 > mean.
NegBinomialParams negative_binomial_params(double mean, double std);
/// Bag sizes from NB(mean, std), redrawn until >= 1.
std::vector<Index> sample_bag_sizes(Index n_bags, double mean, double std, std::mt19937_64& rng);

/// Sorts points by coordinate `axis` and fills bags in turn. Returns the bag of every point.
std::vector<Index> bag_by_axis(const MatrixXd& points, const std::vector<Index>& sizes, Index axis);

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix, sign-corrected diagonal).
MatrixXd random_orthogonal(Index dim, std::mt19937_64& rng);
/// Zero-pads rows to target_dim and rotates them by a random orthogonal matrix.
MatrixXd random_orthogonal_embed(const MatrixXd& points, Index target_dim, std::mt19937_64& rng);

/// Fills true_y and bag outputs from true_rate.
///  Poisson      y_i ~ Poisson(p_i lambda_i), y^a = sum_i y_i
///  Normal       y_i ~ N(w_i mu_i, w_i^2 tau), y^a = sum_i y_i
///  Exponential  y_i ~ Exp(mean lambda_i), y^a ~ Exp(mean sum_i w_i lambda_i)
void sample_labels(BaggedDataset& ds, Likelihood family, std::mt19937_64& rng, double tau = 0.1);

struct SwissRollConfig {
  Index n_bags = 100;
  double n_mean = 150.0;
  double n_std = 50.0;
  Index embed_dim = 18;
  Likelihood likelihood = Likelihood::Poisson;
  double tau = 0.1;
  std::uint64_t seed = 0;
};

/// Full toy protocol: NB bag sizes, swiss-roll points bagged along z, colour as
/// rate (or mean), rotation into embed_dim, labels.
BaggedDataset make_swiss_roll_dataset(const SwissRollConfig& cfg);

// ---------------------------------------------------------------------------
// Splits

enum class Split { Train = 0, EarlyStop = 1, Validation = 2, Test = 3 };
inline constexpr std::array<Split, 4> kAllSplits{Split::Train, Split::EarlyStop, Split::Validation, Split::Test};

std::string_view to_string(Split s);
Split split_from_string(std::string_view s);

struct SplitSpec {
  std::map<std::string, Split> assignment;  // bag_id -> split
  std::uint64_t seed = 0;

  /// Bag positions in dataset order.
  [[nodiscard]] std::vector<Index> bags_in(const BaggedDataset& ds, Split s) const;
  void validate(const BaggedDataset& ds) const;
};

/// Largest-remainder split sizes for `n` items.
std::array<Index, 4> split_sizes(Index n, const std::array<double, 4>& fractions);

/// Random bag-level partition stratified over 4 quantile bins of the bag output.
SplitSpec split_dataset(const BaggedDataset& ds, const std::array<double, 4>& fractions, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Files

BaggedDataset load_csv(const std::filesystem::path& individuals, const std::filesystem::path& bags,
                       Likelihood likelihood = Likelihood::Poisson);
void save_csv(const BaggedDataset& ds, const std::filesystem::path& dir);

/// Covariate rows without bag outputs (prediction inputs). Only individual_id and
/// x_1..x_d are required; bag_id defaults to "" and p to 1.
struct IndividualRows {
  std::vector<std::string> individual_id;
  std::vector<std::string> bag_id;
  VectorXd p;
  MatrixXd X;
};
IndividualRows load_individuals_csv(const std::filesystem::path& path);

/// individuals.csv + bags.csv + dataset.json (metadata) in one directory.
BaggedDataset load_dataset_dir(const std::filesystem::path& dir);
void save_dataset_dir(const BaggedDataset& ds, const std::filesystem::path& dir);

nlohmann::json splits_to_json(const SplitSpec& s);
SplitSpec splits_from_json(const nlohmann::json& j);
void save_splits(const SplitSpec& s, const std::filesystem::path& path);
SplitSpec load_splits(const std::filesystem::path& path);

}  // namespace aggva
