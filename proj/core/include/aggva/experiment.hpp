#pragma once

// Config-driven experiment runner: dataset materialization, model fitting,
// evaluation, benchmark sweeps and gradient self-checks behind the CLI.

#include "aggva/evaluation.hpp"
#include "aggva/training.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace aggva {

struct DatasetSource {
  std::optional<SwissRollConfig> generator;
  std::filesystem::path dir;  // holds individuals.csv / bags.csv / dataset.json
  std::filesystem::path individuals;
  std::filesystem::path bags;
  std::optional<Likelihood> likelihood;
};

struct ModelEntry {
  ModelSpec spec;
  nlohmann::json grid = nlohmann::json::object();
  TuningMode mode = TuningMode::ValidationNLL;
  TrainConfig train;
  bool likelihood_explicit = false;  // otherwise point estimators follow the dataset
};

struct GradcheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  int instances = 3;
};

struct ExperimentConfig {
  nlohmann::json raw;
  std::string digest;
  std::filesystem::path output_dir = "aggva-out";
  std::uint64_t seed = 0;
  int repetitions = 1;
  int threads = 1;
  DatasetSource dataset;
  std::array<double, 4> fractions{0.6, 0.15, 0.15, 0.1};
  std::optional<std::filesystem::path> splits_file;
  TrainConfig train;
  std::vector<ModelEntry> models;
  EvalOptions eval;
  std::string wilcoxon_metric = "individual_nll";
  std::vector<Index> sweep_n_bags;
  std::vector<double> sweep_n_mean;
  GradcheckOptions gradcheck;
};

/// Validates against the shipped schema (ConfigError names the JSON pointer of
/// the offending field) and builds the config. Relative paths resolve against base_dir.
ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct RunOptions {
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

/// --out / --seed / --threads take precedence over the file.
void apply_overrides(ExperimentConfig& cfg, const RunOptions& opts);

/// Worker count: explicit value, else AGGVA_THREADS, else the config.
int resolve_threads(std::optional<int> flag, int config_threads);

struct RepData {
  BaggedDataset ds;
  SplitSpec splits;
  std::uint64_t seed = 0;
};

std::uint64_t repetition_seed(const ExperimentConfig& cfg, int rep);
/// Generates (or loads) the dataset of one repetition and its splits.
RepData materialize(const ExperimentConfig& cfg, int rep, const std::optional<SwissRollConfig>& generator_override = {});

struct FitOutcome {
  TrainResult result;
  nlohmann::json tuning;  // null when no grid was searched
};

/// Tunes over the entry's grid when `use_grid` and the grid is nonempty, otherwise trains once.
FitOutcome fit_model(const ModelEntry& entry, const RepData& data, bool use_grid, int threads = 1);

struct BenchmarkCell {
  std::string setting;
  Index n_bags = 0;
  double n_mean = 0.0;
  int repetition = 0;
  std::string model;
  ModelReport report;
  nlohmann::json tuning;
  double seconds = 0.0;
};

struct BenchmarkResult {
  std::vector<BenchmarkCell> cells;
  nlohmann::json comparison;
};

/// Every (setting, repetition, model) triple: fit (tuning when a grid is given)
/// and evaluate. Cells are ordered by setting, repetition, then model.
BenchmarkResult run_benchmark(const ExperimentConfig& cfg, int threads, std::ostream* log = nullptr);

/// Aggregates cells into per-setting medians/means and pairwise one-sided
/// Wilcoxon p-values ("a<b": a has the smaller metric).
nlohmann::json comparison_table(const std::vector<BenchmarkCell>& cells, const std::string& metric);

// ---------------------------------------------------------------------------
// Gradient self-check

struct GradcheckRow {
  std::string family;
  int instance = 0;
  Index n_params = 0;
  double max_rel_error = 0.0;
  std::string worst_param;
  bool pass = false;
};

/// Small random dataset: n_bags bags of 1..max_members individuals in R^d.
BaggedDataset tiny_dataset(Likelihood lik, std::uint64_t seed, Index n_bags = 3, Index max_members = 3, Index d = 2);

/// Model specs covering every objective family (VBAgg Poisson sq/exp, Normal,
/// Exponential, Nystrom MAP with a Laplacian, MLP with a Laplacian).
std::vector<ModelSpec> gradcheck_specs();

std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opts, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Subcommands. Each writes below cfg.output_dir and logs progress to `log`.

void cmd_generate(const ExperimentConfig& cfg, std::ostream& log);
void cmd_train(const ExperimentConfig& cfg, std::ostream& log, bool use_grid, int threads);
void cmd_evaluate(const ExperimentConfig& cfg, std::ostream& log);
void cmd_benchmark(const ExperimentConfig& cfg, std::ostream& out, std::ostream& log, int threads);
/// Returns false when some family exceeds the tolerance.
bool cmd_gradcheck(const ExperimentConfig& cfg, std::ostream& out);
void cmd_predict(const std::filesystem::path& checkpoint, const std::filesystem::path& individuals,
                 const std::filesystem::path& out_csv);

}  // namespace aggva
