#include <nlohmann/json.hpp>

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const char* kToy = R"({
  "seed": 5,
  "dataset": {"generator": {"type": "swiss_roll", "n_bags": 20, "n_mean": 15, "n_std": 6}},
  "splits": {"fractions": [0.5, 0.2, 0.2, 0.1]},
  "train": {"learning_rate": 0.05, "max_epochs": 10, "batch_bags": 5, "eval_every": 5},
  "models": [{"family": "constant"}, {"family": "vbagg-exp", "landmarks": 4}]
})";

fs::path tmp() {
  static const fs::path root = [] {
    fs::path p(AGGVA_TEST_TMP);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write(const std::string& name, const std::string& text) {
  fs::path p = tmp() / name;
  std::ofstream(p) << text;
  return p;
}

struct Run {
  int code = -1;
  std::string err;
};

Run run(const std::string& args, const std::string& env = "") {
  static int counter = 0;
  const fs::path errf = tmp() / ("stderr_" + std::to_string(counter++) + ".txt");
  const std::string cmd = env + " \"" + std::string(AGGVA_CLI) + "\" " + args + " >/dev/null 2>\"" + errf.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(errf);
  return r;
}

}  // namespace

TEST_CASE("usage errors exit with the config code") {
  CHECK(run("").code == 2);
  CHECK(run("train").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("train --config " + (tmp() / "missing.json").string()).code == 2);
}

TEST_CASE("schema violations report a JSON pointer") {
  auto j = nlohmann::json::parse(kToy);
  j["train"]["batch_bags"] = 0;
  auto r = run("generate --config " + write("bad.json", j.dump()).string());
  CHECK(r.code == 2);
  CHECK(r.err.find("/train/batch_bags") != std::string::npos);
}

TEST_CASE("bad thread variable is a config error") {
  auto cfg = write("toy.json", kToy);
  auto r = run("generate --config " + cfg.string() + " --out " + (tmp() / "thr").string(), "AGGVA_THREADS=zero");
  CHECK(r.code == 2);
}

TEST_CASE("generate is reproducible") {
  auto cfg = write("toy.json", kToy);
  CHECK(run("generate --config " + cfg.string() + " --out " + (tmp() / "g1").string()).code == 0);
  CHECK(run("generate --config " + cfg.string() + " --out " + (tmp() / "g2").string()).code == 0);
  for (const char* f : {"individuals.csv", "bags.csv", "splits.json", "dataset.json"}) {
    auto a = slurp(tmp() / "g1" / "data" / "rep_0" / f);
    CHECK(!a.empty());
    CHECK(a == slurp(tmp() / "g2" / "data" / "rep_0" / f));
  }
  CHECK(run("generate --config " + cfg.string() + " --seed 6 --out " + (tmp() / "g3").string()).code == 0);
  CHECK(slurp(tmp() / "g1" / "data" / "rep_0" / "bags.csv") != slurp(tmp() / "g3" / "data" / "rep_0" / "bags.csv"));
}

TEST_CASE("missing data is a data error") {
  auto cfg = write("toy.json", kToy);
  CHECK(run("evaluate --config " + cfg.string() + " --out " + (tmp() / "nothing").string()).code == 3);
}

TEST_CASE("train, evaluate and predict") {
  auto cfg = write("toy.json", kToy);
  const fs::path out = tmp() / "full";
  REQUIRE(run("train --config " + cfg.string() + " --out " + out.string()).code == 0);
  REQUIRE(run("evaluate --config " + cfg.string() + " --out " + out.string()).code == 0);
  auto report = nlohmann::json::parse(slurp(out / "reports" / "rep_0" / "report.json"));
  CHECK(report["models"].size() == 2);

  const auto ck = (out / "models" / "rep_0" / "vbagg-exp.json").string();
  const auto rows = (out / "data" / "rep_0" / "individuals.csv").string();
  CHECK(run("predict --checkpoint " + ck + " --individuals " + rows + " --out " + (tmp() / "p.csv").string()).code == 0);
  CHECK(slurp(tmp() / "p.csv").rfind("individual_id,bag_id,pred_mean", 0) == 0);

  auto wrong = write("wrong.csv", "individual_id,x_1\na,0.5\n");
  CHECK(run("predict --checkpoint " + ck + " --individuals " + wrong.string() + " --out " + (tmp() / "q.csv").string())
            .code == 3);
}

TEST_CASE("gradcheck subcommand") {
  CHECK(run("gradcheck --out " + (tmp() / "gc").string()).code == 0);
  auto j = nlohmann::json::parse(slurp(tmp() / "gc" / "gradcheck.json"));
  CHECK(!j.empty());
}
