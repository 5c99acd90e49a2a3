#pragma once

// Model specifications, the fitted-model wrapper shared by every family, Adam
// over minibatches of bags with early stopping, grid tuning and gradient checks.

#include "aggva/bag_models.hpp"
#include "aggva/baselines.hpp"
#include "aggva/data.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace aggva {

enum class ModelFamily { Constant, BagPixel, Nystrom, Mlp, Vbagg };

std::string_view to_string(ModelFamily f);
ModelFamily model_family_from_string(std::string_view s);

/// What to fit. `name` labels the model in reports. Families "vbagg-sq",
/// "vbagg-exp", "vbagg-normal" and "vbagg-exponential" are accepted as
/// shorthands for Vbagg with the matching likelihood and link.
struct ModelSpec {
  std::string name = "vbagg-sq";
  ModelFamily family = ModelFamily::Vbagg;
  Likelihood likelihood = Likelihood::Poisson;
  Link link = Link::Sq;

  std::optional<KernelSpec> kernel;  // default: RBF with median-heuristic lengthscale
  double lengthscale = 0.0;          // > 0 overrides the median heuristic
  Index landmarks = 40;
  bool optimize_landmarks = false;
  bool learn_kernel = true;
  bool whiten = true;  // optimize q(u) in coordinates whitened by chol(K_WW)
  bool per_bag_tau = false;

  Index hidden = 32;
  double log_gamma_prior = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  LaplacianSpec laplacian;
  std::optional<KernelSpec> laplacian_kernel;  // default: the model kernel

  /// Canonical spec for a family name (see above); throws ConfigError.
  static ModelSpec from_name(const std::string& family_name);
};

void to_json(nlohmann::json& j, const ModelSpec& s);
/// Starts from from_name(j["family"]) and overrides with the remaining keys.
void from_json(const nlohmann::json& j, ModelSpec& s);

enum class TuningMode { ValidationNLL, Objective };
std::string_view to_string(TuningMode m);
TuningMode tuning_mode_from_string(std::string_view s);

struct TrainConfig {
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Index batch_bags = 32;
  int max_epochs = 2000;
  int patience = 50;
  int eval_every = 1;  // epochs between trace evaluations / early-stop checks
  std::uint64_t seed = 0;
  TuningMode tuning_mode = TuningMode::ValidationNLL;
  bool trace_all_splits = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// ---------------------------------------------------------------------------
// Fitted models

/// A trained model of any family. Every prediction is a PredictiveDist; point
/// estimators yield zero variance with the model's own link.
class FittedModel {
 public:
  using Payload = std::variant<ConstantModel, NystromModel, MlpModel, VbaggModel>;

  FittedModel() = default;
  FittedModel(std::string name, ModelFamily family, Payload payload);

  [[nodiscard]] const std::string& name() const noexcept { return name_; }
  [[nodiscard]] ModelFamily family() const noexcept { return family_; }
  [[nodiscard]] const Payload& payload() const noexcept { return payload_; }
  [[nodiscard]] Payload& payload() noexcept { return payload_; }
  [[nodiscard]] Likelihood likelihood() const;
  [[nodiscard]] Index input_dim() const;
  /// Normal observation variance (geometric mean when per-bag).
  [[nodiscard]] double tau() const;

  /// Predictions for covariate rows; bag_ids are only consulted by the constant model.
  [[nodiscard]] std::vector<PredictiveDist> predict(const MatrixXd& X, const std::vector<std::string>& bag_ids) const;
  /// Predictions for dataset rows (uses the rows' bag ids).
  [[nodiscard]] std::vector<PredictiveDist> predict_rows(const BaggedDataset& ds, const std::vector<Index>& rows) const;

  /// Mean plug-in bag NLL over the listed bags.
  [[nodiscard]] double mean_bag_nll(const BaggedDataset& ds, const std::vector<Index>& bag_positions) const;

 private:
  std::string name_;
  ModelFamily family_ = ModelFamily::Constant;
  Payload payload_;
  std::optional<NystromFeatureMap> fmap_;  // Nystrom / bag-pixel
};

/// Checkpoint: {"format": "aggva-model", "version": 1, "family": ..., "name": ..., "model": {...}}.
void to_json(nlohmann::json& j, const FittedModel& m);
void from_json(const nlohmann::json& j, FittedModel& m);
void save_checkpoint(const FittedModel& m, const std::filesystem::path& path);
FittedModel load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Optimization

/// A flat-parameter view of a model's training objective (to be minimized).
class Trainable {
 public:
  virtual ~Trainable() = default;
  [[nodiscard]] virtual Index size() const = 0;
  [[nodiscard]] virtual VectorXd get() const = 0;
  virtual void set(const VectorXd& theta) = 0;
  /// Loss on a batch; gradient written when `grad` is non-null.
  virtual double loss(const BagBatch& batch, VectorXd* grad) = 0;
  [[nodiscard]] virtual std::string param_name(Index i) const = 0;
  [[nodiscard]] virtual FittedModel snapshot() const = 0;
};

struct AdamState {
  VectorXd m;
  VectorXd v;
  long step = 0;
};

/// theta <- theta - lr * mhat / (sqrt(vhat) + eps). A non-finite gradient entry
/// aborts the step (state untouched) with NonFiniteGradient naming the parameter.
void adam_step(AdamState& state, VectorXd& theta, const VectorXd& grad, const TrainConfig& cfg,
               const std::function<std::string(Index)>& name_of = {});

struct TraceRow {
  int epoch = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
};

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path);

struct TrainResult {
  FittedModel model;
  std::vector<TraceRow> trace;
  int epochs_run = 0;
  int best_epoch = 0;
  double train_objective = 0.0;  // full-batch training loss of the returned model (minimized form)
  double early_stop_nll = 0.0;   // NaN when early stopping is not used
  double validation_nll = 0.0;   // NaN when the validation split is empty
};

/// Whether the family restores the best early-stop checkpoint.
bool uses_early_stopping(ModelFamily f);

/// Builds the initial Trainable for a spec on the given training bags.
std::unique_ptr<Trainable> make_trainable(const ModelSpec& spec, const BaggedDataset& ds,
                                          const std::vector<BagData>& train_bags, const TrainConfig& cfg);

TrainResult train(const ModelSpec& spec, const BaggedDataset& ds, const SplitSpec& splits, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Tuning

/// Cartesian product of {"key": [values...]} in sorted key order, last key fastest.
std::vector<nlohmann::json> expand_grid(const nlohmann::json& grid);
/// Applies one grid point (keys of ModelSpec or TrainConfig; "seed" offsets the
/// training seed for multiple initialisations).
void apply_grid_point(const nlohmann::json& point, ModelSpec& spec, TrainConfig& cfg);

struct TuneResult {
  std::size_t best_index = 0;
  nlohmann::json best_point;
  std::vector<double> scores;  // lower is better: validation NLL or negated objective
  TrainResult best;
  ModelSpec best_spec;
  TrainConfig best_config;
};

/// ValidationNLL minimizes validation bag NLL; Objective maximizes the final
/// training objective and trains without early stopping. Ties go to the smaller index.
TuneResult tune(const ModelSpec& spec, const BaggedDataset& ds, const SplitSpec& splits, const TrainConfig& cfg,
                const nlohmann::json& grid, TuningMode mode, int threads = 1);

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckResult {
  double max_rel_error = 0.0;
  Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

using ObjectiveFn = std::function<double(const VectorXd& theta, VectorXd* grad)>;

/// Central differences per coordinate; error |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult grad_check(const ObjectiveFn& objective, const VectorXd& theta, double step = 1e-4);

/// Objective of a Trainable on a fixed batch, for grad_check.
ObjectiveFn objective_of(Trainable& t, const BagBatch& batch);

}  // namespace aggva
