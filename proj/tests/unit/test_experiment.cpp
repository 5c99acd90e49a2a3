#include "aggva/error.hpp"
#include "aggva/experiment.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace aggva;
namespace fs = std::filesystem;

namespace {

const char* kToy = R"({
  "seed": 3,
  "repetitions": 1,
  "dataset": {"generator": {"type": "swiss_roll", "n_bags": 20, "n_mean": 15, "n_std": 6}},
  "splits": {"fractions": [0.5, 0.2, 0.2, 0.1]},
  "train": {"learning_rate": 0.05, "max_epochs": 15, "patience": 50, "batch_bags": 5, "eval_every": 5},
  "models": [{"family": "constant"}, {"family": "vbagg-sq", "landmarks": 5}]
})";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::path(AGGVA_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string config_error(const std::string& text) {
  try {
    (void)parse_experiment_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("shipped configs parse") {
  for (const char* name : {"swiss_roll_small.json", "swiss_roll_acceptance.json"}) {
    auto cfg = load_experiment_config(fs::path(AGGVA_CONFIG_DIR) / name);
    CHECK(!cfg.models.empty());
    CHECK(cfg.digest.size() == 16);
  }
}

TEST_CASE("schema errors name the offending field") {
  auto j = nlohmann::json::parse(kToy);
  j["train"]["learning_rate"] = "fast";
  CHECK(config_error(j.dump()).find("/train/learning_rate") != std::string::npos);

  j = nlohmann::json::parse(kToy);
  j["models"][1]["landmarks"] = -4;
  CHECK(config_error(j.dump()).find("/models/1/landmarks") != std::string::npos);

  j = nlohmann::json::parse(kToy);
  j["splits"]["fractions"] = {0.5, 0.5, 0.5, 0.5};
  CHECK(!config_error(j.dump()).empty());

  j = nlohmann::json::parse(kToy);
  j["dataset"]["generator"]["n_std"] = 2;  // variance below the mean
  CHECK(!config_error(j.dump()).empty());

  CHECK(!config_error("{not json").empty());
}

TEST_CASE("overrides and thread resolution") {
  auto cfg = parse_experiment_config(kToy);
  const auto before = cfg.digest;
  apply_overrides(cfg, RunOptions{fs::path("elsewhere"), 99, 2});
  CHECK(cfg.seed == 99);
  CHECK(cfg.output_dir == fs::path("elsewhere"));
  CHECK(cfg.digest != before);

  ::unsetenv("AGGVA_THREADS");
  CHECK(resolve_threads(std::nullopt, 3) == 3);
  ::setenv("AGGVA_THREADS", "5", 1);
  CHECK(resolve_threads(std::nullopt, 3) == 5);
  CHECK(resolve_threads(2, 3) == 2);
  ::setenv("AGGVA_THREADS", "many", 1);
  CHECK_THROWS_AS(resolve_threads(std::nullopt, 3), ConfigError);
  ::unsetenv("AGGVA_THREADS");
}

TEST_CASE("repetitions get distinct seeds and datasets") {
  auto j = nlohmann::json::parse(kToy);
  j["repetitions"] = 5;
  auto cfg = parse_experiment_config(j.dump());
  cfg.output_dir = scratch("reps");
  std::ostringstream log;
  cmd_generate(cfg, log);
  std::set<std::uint64_t> seeds;
  std::set<std::string> contents;
  for (int r = 0; r < 5; ++r) {
    seeds.insert(repetition_seed(cfg, r));
    const auto dir = cfg.output_dir / "data" / ("rep_" + std::to_string(r));
    CHECK(fs::exists(dir / "individuals.csv"));
    contents.insert(slurp(dir / "individuals.csv"));
  }
  CHECK(seeds.size() == 5);
  CHECK(contents.size() == 5);
}

TEST_CASE("benchmark table and determinism") {
  auto cfg = parse_experiment_config(kToy);
  auto a = run_benchmark(cfg, 1);
  auto b = run_benchmark(cfg, 1);
  CHECK(a.comparison == b.comparison);
  const auto& models = a.comparison["settings"][0]["models"];
  CHECK(models.contains("constant"));
  CHECK(models.contains("vbagg-sq"));
  CHECK(a.cells.size() == 2);
}

TEST_CASE("train then evaluate reproduces the benchmark report") {
  auto cfg = parse_experiment_config(kToy);
  cfg.output_dir = scratch("equiv");
  std::ostringstream log, out;
  cmd_train(cfg, log, false, 1);
  cmd_evaluate(cfg, log);
  const auto staged = slurp(cfg.output_dir / "reports" / "rep_0" / "report.json");

  auto cfg2 = cfg;
  cfg2.output_dir = scratch("equiv_bench");
  cmd_benchmark(cfg2, out, log, 1);
  const auto direct = slurp(cfg2.output_dir / "benchmark" / "setting_0" / "rep_0" / "report.json");
  CHECK(!staged.empty());
  CHECK(staged == direct);
}

TEST_CASE("evaluate without data is a data error") {
  auto cfg = parse_experiment_config(kToy);
  cfg.output_dir = scratch("empty");
  std::ostringstream log;
  CHECK_THROWS_AS(cmd_evaluate(cfg, log), DataError);
}

TEST_CASE("predict applies a checkpoint to new rows") {
  auto cfg = parse_experiment_config(kToy);
  cfg.output_dir = scratch("predict");
  std::ostringstream log;
  cmd_train(cfg, log, false, 1);
  const auto data = cfg.output_dir / "data" / "rep_0";
  const auto ck = cfg.output_dir / "models" / "rep_0" / "constant.json";
  cmd_predict(ck, data / "individuals.csv", cfg.output_dir / "p1.csv");
  cmd_predict(ck, data / "individuals.csv", cfg.output_dir / "p2.csv");
  CHECK(slurp(cfg.output_dir / "p1.csv") == slurp(cfg.output_dir / "p2.csv"));

  // the constant model predicts each training bag's own rate
  auto ds = load_dataset_dir(data);
  auto splits = load_splits(data / "splits.json");
  Index checked = 0;
  std::ifstream in(cfg.output_dir / "p1.csv");
  std::string line;
  std::getline(in, line);
  Index row = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string iid, bid, mean;
    std::getline(ss, iid, ',');
    std::getline(ss, bid, ',');
    std::getline(ss, mean, ',');
    const auto& bag = ds.bags[static_cast<std::size_t>(ds.bag_of[static_cast<std::size_t>(row)])];
    CHECK(bid == bag.id);
    if (splits.assignment.at(bag.id) == Split::Train) {
      CHECK(std::stod(mean) == doctest::Approx(bag.y / bag.p_total).epsilon(1e-9));
      ++checked;
    }
    ++row;
  }
  CHECK(row == ds.num_individuals());
  CHECK(checked > 0);

  std::ofstream(cfg.output_dir / "wrong.csv") << "individual_id,x_1,x_2\na,0.1,0.2\n";
  CHECK_THROWS_AS(cmd_predict(cfg.output_dir / "models" / "rep_0" / "vbagg-sq.json", cfg.output_dir / "wrong.csv",
                              cfg.output_dir / "p3.csv"),
                  DimensionMismatch);
}
