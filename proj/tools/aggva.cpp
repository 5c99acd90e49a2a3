// aggva command line: generate / train / tune / evaluate / predict / benchmark / gradcheck.

#include "aggva/error.hpp"
#include "aggva/experiment.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <iostream>
#include <optional>
#include <string>

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumerical = 4 };

int exit_code(aggva::ErrorKind k) {
  switch (k) {
    case aggva::ErrorKind::Config:
    case aggva::ErrorKind::Unsupported:
      return kConfig;
    case aggva::ErrorKind::Data:
      return kData;
    case aggva::ErrorKind::Numerical:
      return kNumerical;
  }
  return kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Individual-level intensities from bag aggregates"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  app.add_option("--config", config_path, "experiment configuration (JSON)");
  app.add_option("--out", out_dir, "output directory (overrides output_dir)");
  app.add_option("--seed", seed, "base seed (overrides seed)");
  app.add_option("--threads", threads, "worker threads (fallback: AGGVA_THREADS)");

  auto* gen = app.add_subcommand("generate", "write dataset repetitions and splits");
  auto* train = app.add_subcommand("train", "fit every configured model once");
  auto* tune = app.add_subcommand("tune", "fit every configured model over its grid");
  auto* eval = app.add_subcommand("evaluate", "score saved checkpoints");
  auto* bench = app.add_subcommand("benchmark", "full model x repetition sweep with significance tests");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every objective family");
  auto* pred = app.add_subcommand("predict", "predict individuals from a checkpoint");
  std::string checkpoint, individuals, pred_out;
  pred->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  pred->add_option("--individuals", individuals, "individuals.csv with covariates")->required();
  pred->add_option("--out", pred_out, "predictions CSV")->required();
  for (auto* sub : {gen, train, tune, eval, bench, grad}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (pred->parsed()) {
      aggva::cmd_predict(checkpoint, individuals, pred_out);
      return kOk;
    }

    aggva::ExperimentConfig cfg;
    if (!config_path.empty()) {
      cfg = aggva::load_experiment_config(config_path);
    } else if (!grad->parsed()) {
      std::cerr << "error: --config is required\n";
      return kConfig;
    }
    aggva::RunOptions opts;
    if (!out_dir.empty()) opts.out = out_dir;
    opts.seed = seed;
    const int n_threads = aggva::resolve_threads(threads, cfg.threads);
    opts.threads = n_threads;
    aggva::apply_overrides(cfg, opts);

    if (gen->parsed()) aggva::cmd_generate(cfg, std::cerr);
    if (train->parsed()) aggva::cmd_train(cfg, std::cerr, false, n_threads);
    if (tune->parsed()) aggva::cmd_train(cfg, std::cerr, true, n_threads);
    if (eval->parsed()) aggva::cmd_evaluate(cfg, std::cerr);
    if (bench->parsed()) aggva::cmd_benchmark(cfg, std::cout, std::cerr, n_threads);
    if (grad->parsed()) return aggva::cmd_gradcheck(cfg, std::cout) ? kOk : kNumerical;
    return kOk;
  } catch (const aggva::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
