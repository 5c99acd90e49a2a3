#include "aggva/experiment.hpp"

#include "aggva/error.hpp"
#include "aggva/json_schema.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

namespace aggva {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const json& j, const fs::path& p) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

[[noreturn]] void config_fail(const std::string& pointer, const std::string& why) {
  throw ConfigError("config " + (pointer.empty() ? std::string("(root)") : pointer) + ": " + why);
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path q(p);
  return q.is_absolute() || base.empty() ? q : base / q;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. The exception of the
// lowest failing index is rethrown after all workers finish.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(threads, static_cast<int>(n))));
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n && !failed; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
            failed = true;
          }
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

fs::path rep_dir(const fs::path& root, const char* kind, int rep) {
  return root / kind / ("rep_" + std::to_string(rep));
}

bool point_family(const std::string& family) {
  return family == "constant" || family == "bag-pixel" || family == "nystrom" || family == "mlp";
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ExperimentConfig parse_experiment_config(const std::string& text, const fs::path& base_dir) {
  if (auto issue = validate_against_schema(text, experiment_schema_text()))
    config_fail(issue->pointer, "violates '" + issue->keyword + "' (schema " + issue->schema_pointer + ")");

  ExperimentConfig cfg;
  cfg.raw = json::parse(text);
  const json& j = cfg.raw;
  if (j.contains("output_dir")) cfg.output_dir = resolve(base_dir, j["output_dir"].get<std::string>());
  cfg.seed = j.value("seed", std::uint64_t{0});
  cfg.repetitions = j.value("repetitions", 1);
  cfg.threads = j.value("threads", 1);

  const json& d = j.at("dataset");
  if (d.contains("generator")) {
    const json& g = d["generator"];
    SwissRollConfig sr;
    sr.n_bags = g.value("n_bags", sr.n_bags);
    sr.n_mean = g.value("n_mean", sr.n_mean);
    sr.n_std = g.value("n_std", sr.n_std);
    sr.embed_dim = g.value("embed_dim", sr.embed_dim);
    if (g.contains("likelihood")) sr.likelihood = likelihood_from_string(g["likelihood"].get<std::string>());
    sr.tau = g.value("tau", sr.tau);
    if (sr.n_std * sr.n_std <= sr.n_mean)
      config_fail("/dataset/generator/n_std", "bag-size variance must exceed the mean (negative binomial)");
    cfg.dataset.generator = sr;
  } else {
    const json& c = d.at("csv");
    if (c.contains("dir")) cfg.dataset.dir = resolve(base_dir, c["dir"].get<std::string>());
    if (c.contains("individuals")) cfg.dataset.individuals = resolve(base_dir, c["individuals"].get<std::string>());
    if (c.contains("bags")) cfg.dataset.bags = resolve(base_dir, c["bags"].get<std::string>());
    if (c.contains("likelihood")) cfg.dataset.likelihood = likelihood_from_string(c["likelihood"].get<std::string>());
    if (cfg.dataset.dir.empty() && (cfg.dataset.individuals.empty() || cfg.dataset.bags.empty()))
      config_fail("/dataset/csv", "needs 'dir' or both 'individuals' and 'bags'");
  }

  if (j.contains("splits")) {
    const json& s = j["splits"];
    if (s.contains("fractions")) {
      double sum = 0.0;
      for (std::size_t k = 0; k < 4; ++k) sum += cfg.fractions[k] = s["fractions"][k].get<double>();
      if (std::abs(sum - 1.0) > 1e-9) config_fail("/splits/fractions", "fractions must sum to 1");
      if (cfg.fractions[0] <= 0.0) config_fail("/splits/fractions/0", "the training fraction must be positive");
    }
    if (s.contains("file")) cfg.splits_file = resolve(base_dir, s["file"].get<std::string>());
  }

  json train_j = j.value("train", json::object());
  try {
    cfg.train = train_j.get<TrainConfig>();
  } catch (const ConfigError& e) {
    config_fail("/train", e.what());
  }

  std::set<std::string> names;
  const json& models = j.at("models");
  for (std::size_t i = 0; i < models.size(); ++i) {
    const json& m = models[i];
    const std::string ptr = "/models/" + std::to_string(i);
    ModelEntry e;
    try {
      e.spec = m.get<ModelSpec>();
      json tj = train_j;
      if (m.contains("train")) tj.merge_patch(m["train"]);
      e.train = tj.get<TrainConfig>();
      e.mode = m.contains("tuning_mode") ? tuning_mode_from_string(m["tuning_mode"].get<std::string>())
                                         : e.train.tuning_mode;
      e.train.tuning_mode = e.mode;
    } catch (const Error& err) {
      config_fail(ptr, err.what());
    }
    e.likelihood_explicit = m.contains("likelihood") || !point_family(m["family"].get<std::string>());
    if (!names.insert(e.spec.name).second) config_fail(ptr + "/name", "duplicate model name '" + e.spec.name + "'");
    if (m.contains("grid")) {
      e.grid = m["grid"];
      for (const auto& point : expand_grid(e.grid)) {
        ModelSpec s = e.spec;
        TrainConfig t = e.train;
        try {
          apply_grid_point(point, s, t);
        } catch (const std::exception& err) {
          config_fail(ptr + "/grid", err.what());
        }
      }
    }
    cfg.models.push_back(std::move(e));
  }

  if (j.contains("evaluation")) {
    const json& ev = j["evaluation"];
    if (ev.contains("individual_split"))
      cfg.eval.individual_split = split_from_string(ev["individual_split"].get<std::string>());
    if (ev.contains("bag_split")) cfg.eval.bag_split = split_from_string(ev["bag_split"].get<std::string>());
    if (ev.contains("levels")) cfg.eval.levels = ev["levels"].get<std::vector<double>>();
    cfg.wilcoxon_metric = ev.value("wilcoxon_metric", cfg.wilcoxon_metric);
  }
  if (j.contains("benchmark")) {
    const json& b = j["benchmark"];
    if (b.contains("n_bags")) cfg.sweep_n_bags = b["n_bags"].get<std::vector<Index>>();
    if (b.contains("n_mean")) cfg.sweep_n_mean = b["n_mean"].get<std::vector<double>>();
    if ((!cfg.sweep_n_bags.empty() || !cfg.sweep_n_mean.empty()) && !cfg.dataset.generator)
      config_fail("/benchmark", "size sweeps need a dataset generator");
    if (cfg.dataset.generator)
      for (std::size_t k = 0; k < cfg.sweep_n_mean.size(); ++k)
        if (cfg.dataset.generator->n_std * cfg.dataset.generator->n_std <= cfg.sweep_n_mean[k])
          config_fail("/benchmark/n_mean/" + std::to_string(k), "bag-size variance must exceed the mean");
  }
  if (j.contains("gradcheck")) {
    const json& g = j["gradcheck"];
    cfg.gradcheck.step = g.value("step", cfg.gradcheck.step);
    cfg.gradcheck.tolerance = g.value("tolerance", cfg.gradcheck.tolerance);
    cfg.gradcheck.instances = g.value("instances", cfg.gradcheck.instances);
  }
  cfg.digest = digest(cfg.raw);
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  return parse_experiment_config(read_file(path), path.parent_path());
}

void apply_overrides(ExperimentConfig& cfg, const RunOptions& opts) {
  if (opts.out) {
    cfg.output_dir = *opts.out;
    cfg.raw["output_dir"] = opts.out->string();
  }
  if (opts.seed) {
    cfg.seed = *opts.seed;
    cfg.raw["seed"] = *opts.seed;
  }
  if (opts.threads) cfg.threads = *opts.threads;
  cfg.digest = digest(cfg.raw);
}

int resolve_threads(std::optional<int> flag, int config_threads) {
  if (flag) {
    if (*flag < 1) throw ConfigError("--threads must be at least 1");
    return *flag;
  }
  if (const char* env = std::getenv("AGGVA_THREADS"); env != nullptr && *env != '\0') {
    int v = 0;
    const char* end = env + std::char_traits<char>::length(env);
    auto [ptr, ec] = std::from_chars(env, end, v);
    if (ec != std::errc() || ptr != end || v < 1) throw ConfigError("AGGVA_THREADS must be a positive integer");
    return v;
  }
  return std::max(1, config_threads);
}

// ---------------------------------------------------------------------------
// Data

std::uint64_t repetition_seed(const ExperimentConfig& cfg, int rep) {
  return cfg.seed + static_cast<std::uint64_t>(rep);
}

RepData materialize(const ExperimentConfig& cfg, int rep, const std::optional<SwissRollConfig>& generator_override) {
  RepData r;
  r.seed = repetition_seed(cfg, rep);
  const auto& gen = generator_override ? generator_override : cfg.dataset.generator;
  if (gen) {
    SwissRollConfig g = *gen;
    g.seed = r.seed;
    r.ds = make_swiss_roll_dataset(g);
  } else {
    const DatasetSource& src = cfg.dataset;
    if (!src.dir.empty() && src.individuals.empty() && src.bags.empty()) {
      r.ds = load_dataset_dir(src.dir);
      if (src.likelihood && *src.likelihood != r.ds.meta.likelihood) {
        r.ds = load_csv(src.dir / "individuals.csv", src.dir / "bags.csv", *src.likelihood);
      }
    } else {
      const fs::path ind = src.individuals.empty() ? src.dir / "individuals.csv" : src.individuals;
      const fs::path bag = src.bags.empty() ? src.dir / "bags.csv" : src.bags;
      r.ds = load_csv(ind, bag, src.likelihood.value_or(Likelihood::Poisson));
    }
    r.ds.meta.seed = r.seed;
  }
  if (cfg.splits_file) {
    r.splits = load_splits(*cfg.splits_file);
    r.splits.validate(r.ds);
  } else {
    r.splits = split_dataset(r.ds, cfg.fractions, r.seed);
  }
  return r;
}

namespace {

bool rep_on_disk(const fs::path& dir) {
  return fs::exists(dir / "individuals.csv") && fs::exists(dir / "bags.csv") && fs::exists(dir / "splits.json");
}

void save_rep(const RepData& r, const fs::path& dir) {
  fs::create_directories(dir);
  save_dataset_dir(r.ds, dir);
  save_splits(r.splits, dir / "splits.json");
}

RepData load_rep(const ExperimentConfig& cfg, int rep, const fs::path& dir) {
  RepData r;
  r.seed = repetition_seed(cfg, rep);
  r.ds = load_dataset_dir(dir);
  r.splits = load_splits(dir / "splits.json");
  r.splits.validate(r.ds);
  return r;
}

// Reads the repetition written by an earlier step, or materializes and saves it.
RepData obtain_rep(const ExperimentConfig& cfg, int rep, std::ostream& log) {
  const fs::path dir = rep_dir(cfg.output_dir, "data", rep);
  if (rep_on_disk(dir)) return load_rep(cfg, rep, dir);
  RepData r = materialize(cfg, rep);
  save_rep(r, dir);
  log << "wrote " << dir.string() << '\n';
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Fitting

FitOutcome fit_model(const ModelEntry& entry, const RepData& data, bool use_grid, int threads) {
  ModelSpec spec = entry.spec;
  if (!entry.likelihood_explicit) spec.likelihood = data.ds.meta.likelihood;
  if (spec.likelihood != data.ds.meta.likelihood)
    throw ConfigError("model '" + spec.name + "' uses the " + std::string(to_string(spec.likelihood)) +
                      " likelihood but the dataset is " + std::string(to_string(data.ds.meta.likelihood)));
  TrainConfig tc = entry.train;
  tc.seed = entry.train.seed + data.seed;
  tc.tuning_mode = entry.mode;

  FitOutcome out;
  if (use_grid && !entry.grid.empty()) {
    TuneResult t = tune(spec, data.ds, data.splits, tc, entry.grid, entry.mode, threads);
    json scores = json::array();
    for (double s : t.scores) scores.push_back(finite_or_null(s));
    out.tuning = json{{"mode", std::string(to_string(entry.mode))},
                      {"grid", entry.grid},
                      {"points", expand_grid(entry.grid)},
                      {"scores", scores},
                      {"best_index", t.best_index},
                      {"best_point", t.best_point}};
    out.result = std::move(t.best);
  } else {
    out.result = train(spec, data.ds, data.splits, tc);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark

namespace {

double median_of(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  for (double x : v)
    if (std::isnan(x)) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string setting_label(Index n_bags, double n_mean) {
  return "n_bags=" + std::to_string(n_bags) + ",n_mean=" + fmt(n_mean);
}

}  // namespace

json comparison_table(const std::vector<BenchmarkCell>& cells, const std::string& metric) {
  std::vector<std::string> settings;
  for (const auto& c : cells)
    if (std::find(settings.begin(), settings.end(), c.setting) == settings.end()) settings.push_back(c.setting);

  json out = json::array();
  for (const auto& label : settings) {
    std::vector<const BenchmarkCell*> mine;
    for (const auto& c : cells)
      if (c.setting == label) mine.push_back(&c);
    std::vector<std::string> models;
    std::set<std::string> metrics;
    for (const auto* c : mine) {
      if (std::find(models.begin(), models.end(), c->model) == models.end()) models.push_back(c->model);
      for (const auto& [k, v] : c->report.metrics) metrics.insert(k);
    }
    // values[model][metric] ordered by repetition
    std::map<std::string, std::map<std::string, std::vector<double>>> values;
    std::vector<const BenchmarkCell*> sorted = mine;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const auto* a, const auto* b) { return a->repetition < b->repetition; });
    for (const auto* c : sorted)
      for (const auto& k : metrics) {
        auto it = c->report.metrics.find(k);
        values[c->model][k].push_back(it == c->report.metrics.end() ? std::nan("") : it->second);
      }

    json jm = json::object();
    for (const auto& m : models) {
      json per = json::object();
      for (const auto& k : metrics) {
        const auto& v = values[m][k];
        json arr = json::array();
        for (double x : v) arr.push_back(finite_or_null(x));
        per[k] = json{{"values", arr}, {"median", finite_or_null(median_of(v))}, {"mean", finite_or_null(mean_of(v))}};
      }
      jm[m] = per;
    }

    json jw = json::object();
    for (const std::string& k : std::set<std::string>{metric, "bag_nll"}) {
      json pairs = json::object();
      for (const auto& a : models)
        for (const auto& b : models) {
          if (a == b) continue;
          const auto& va = values[a][k];
          const auto& vb = values[b][k];
          bool ok = va.size() == vb.size() && va.size() >= 5;
          for (std::size_t i = 0; ok && i < va.size(); ++i) ok = std::isfinite(va[i]) && std::isfinite(vb[i]);
          pairs[a + "<" + b] = ok ? json(wilcoxon_signed_rank(va, vb).p_value) : json(nullptr);
        }
      jw[k] = pairs;
    }
    const auto* first = mine.front();
    out.push_back(json{{"label", label},
                       {"n_bags", first->n_bags},
                       {"n_mean", first->n_mean},
                       {"repetitions", sorted.back()->repetition + 1},
                       {"models", jm},
                       {"wilcoxon", jw}});
  }
  return out;
}

BenchmarkResult run_benchmark(const ExperimentConfig& cfg, int threads, std::ostream* log) {
  struct Setting {
    std::string label;
    Index n_bags;
    double n_mean;
    std::optional<SwissRollConfig> gen;
  };
  std::vector<Setting> settings;
  if (cfg.dataset.generator) {
    const auto& g = *cfg.dataset.generator;
    const std::vector<Index> nb = cfg.sweep_n_bags.empty() ? std::vector<Index>{g.n_bags} : cfg.sweep_n_bags;
    const std::vector<double> nm = cfg.sweep_n_mean.empty() ? std::vector<double>{g.n_mean} : cfg.sweep_n_mean;
    for (Index b : nb)
      for (double m : nm) {
        SwissRollConfig s = g;
        s.n_bags = b;
        s.n_mean = m;
        settings.push_back({setting_label(b, m), b, m, s});
      }
  } else {
    settings.push_back({"csv", 0, 0.0, std::nullopt});
  }

  std::vector<RepData> data;
  for (const auto& s : settings)
    for (int r = 0; r < cfg.repetitions; ++r) {
      data.push_back(materialize(cfg, r, s.gen));
      if (!s.gen) settings.front().n_bags = data.back().ds.num_bags();
    }

  const std::size_t n_models = cfg.models.size();
  const std::size_t n_reps = static_cast<std::size_t>(cfg.repetitions);
  BenchmarkResult res;
  res.cells.resize(settings.size() * n_reps * n_models);
  std::mutex log_mu;
  parallel_for(res.cells.size(), threads, [&](std::size_t i) {
    const std::size_t si = i / (n_reps * n_models);
    const std::size_t r = (i / n_models) % n_reps;
    const std::size_t mi = i % n_models;
    const RepData& rd = data[si * n_reps + r];
    const auto t0 = std::chrono::steady_clock::now();
    FitOutcome fit = fit_model(cfg.models[mi], rd, true, 1);
    BenchmarkCell& c = res.cells[i];
    c.setting = settings[si].label;
    c.n_bags = settings[si].n_bags;
    c.n_mean = settings[si].n_mean;
    c.repetition = static_cast<int>(r);
    c.model = cfg.models[mi].spec.name;
    c.report = evaluate_model(fit.result.model, rd.ds, rd.splits, cfg.eval);
    c.tuning = std::move(fit.tuning);
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) {
      std::lock_guard lk(log_mu);
      *log << c.setting << " rep " << r << ' ' << c.model << ": " << cfg.wilcoxon_metric << '='
           << fmt(c.report.metrics.count(cfg.wilcoxon_metric) ? c.report.metrics.at(cfg.wilcoxon_metric)
                                                               : std::nan(""))
           << " (" << std::fixed << std::setprecision(1) << c.seconds << "s)" << std::defaultfloat << '\n'
           << std::flush;
    }
  });
  res.comparison = json{{"metric", cfg.wilcoxon_metric},
                        {"config_digest", cfg.digest},
                        {"settings", comparison_table(res.cells, cfg.wilcoxon_metric)}};
  return res;
}

// ---------------------------------------------------------------------------
// Gradient self-check

BaggedDataset tiny_dataset(Likelihood lik, std::uint64_t seed, Index n_bags, Index max_members, Index d) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> unif(0.5, 2.0);
  std::uniform_int_distribution<Index> size(1, max_members);
  std::vector<Index> sizes(static_cast<std::size_t>(n_bags));
  for (auto& s : sizes) s = size(rng);
  Index n = 0;
  for (Index s : sizes) n += s;

  BaggedDataset ds;
  ds.meta.likelihood = lik;
  ds.meta.generator = "tiny";
  ds.meta.seed = seed;
  ds.X.resize(n, d);
  ds.S.resize(n, 2);
  ds.p.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < d; ++k) ds.X(i, k) = gauss(rng);
    ds.S(i, 0) = gauss(rng);
    ds.S(i, 1) = gauss(rng);
    ds.p(i) = unif(rng);
  }
  Index row = 0;
  for (Index a = 0; a < n_bags; ++a) {
    DatasetBag b;
    b.id = "b" + std::to_string(a);
    for (Index k = 0; k < sizes[static_cast<std::size_t>(a)]; ++k, ++row) {
      b.members.push_back(row);
      ds.bag_of.push_back(a);
      ds.individual_id.push_back(std::to_string(row));
      b.p_total += ds.p(row);
    }
    switch (lik) {
      case Likelihood::Poisson:
        b.y = static_cast<double>(std::poisson_distribution<int>(1.5 * b.p_total)(rng));
        break;
      case Likelihood::Normal:
        b.y = b.p_total * (1.0 + 0.5 * gauss(rng));
        break;
      case Likelihood::Exponential:
        b.y = std::exponential_distribution<double>(1.0 / b.p_total)(rng);
        break;
    }
    ds.bags.push_back(std::move(b));
  }
  ds.rebuild_index();
  ds.validate();
  return ds;
}

std::vector<ModelSpec> gradcheck_specs() {
  std::vector<ModelSpec> out;
  ModelSpec sq = ModelSpec::from_name("vbagg-sq");
  sq.landmarks = 3;
  sq.optimize_landmarks = true;
  sq.kernel = KernelSpec::additive({KernelSpec::rbf(1.2, 1.0, {0}), KernelSpec::matern32(1.5, 0.8, {1})});
  out.push_back(sq);

  ModelSpec raw = sq;
  raw.name = "vbagg-sq-unwhitened";
  raw.whiten = false;
  out.push_back(raw);

  ModelSpec ex = ModelSpec::from_name("vbagg-exp");
  ex.landmarks = 3;
  ex.kernel = KernelSpec::ard({1.0, 1.5});
  out.push_back(ex);

  ModelSpec no = ModelSpec::from_name("vbagg-normal");
  no.landmarks = 3;
  no.per_bag_tau = true;
  out.push_back(no);

  ModelSpec ez = ModelSpec::from_name("vbagg-exponential");
  ez.landmarks = 3;
  out.push_back(ez);

  ModelSpec ny = ModelSpec::from_name("nystrom");
  ny.landmarks = 3;
  ny.lambda1 = 0.5;
  ny.log_gamma_prior = std::log(2.0);
  ny.laplacian.mode = LaplacianMode::Exact;
  out.push_back(ny);

  ModelSpec mlp = ModelSpec::from_name("mlp");
  mlp.hidden = 4;
  mlp.lambda1 = 0.5;
  mlp.lambda2 = 0.3;
  mlp.laplacian.mode = LaplacianMode::Rff;
  mlp.laplacian.n_features = 64;
  out.push_back(mlp);
  return out;
}

std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opts, std::uint64_t seed) {
  std::vector<GradcheckRow> rows;
  const auto specs = gradcheck_specs();
  for (std::size_t f = 0; f < specs.size(); ++f) {
    const ModelSpec& spec = specs[f];
    for (int inst = 0; inst < opts.instances; ++inst) {
      const std::uint64_t s = seed * 7919 + f * 104729 + static_cast<std::uint64_t>(inst);
      BaggedDataset ds = tiny_dataset(spec.likelihood, s);
      std::vector<Index> all(static_cast<std::size_t>(ds.num_bags()));
      for (std::size_t a = 0; a < all.size(); ++a) all[a] = static_cast<Index>(a);
      const auto bags = make_bag_data(ds, all);
      TrainConfig tc;
      tc.seed = s;
      auto t = make_trainable(spec, ds, bags, tc);
      VectorXd theta = t->get();
      std::mt19937_64 rng(s ^ 0xabcdefULL);
      std::normal_distribution<double> gauss(0.0, 0.1);
      for (Index i = 0; i < theta.size(); ++i) theta(i) += gauss(rng);
      t->set(theta);
      const BagBatch batch = BagBatch::all(bags);
      const GradCheckResult g = grad_check(objective_of(*t, batch), theta, opts.step);
      GradcheckRow row;
      row.family = spec.name;
      row.instance = inst;
      row.n_params = theta.size();
      row.max_rel_error = g.max_rel_error;
      row.worst_param = g.worst_index >= 0 ? t->param_name(g.worst_index) : "";
      row.pass = std::isfinite(g.max_rel_error) && g.max_rel_error <= opts.tolerance;
      rows.push_back(row);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_generate(const ExperimentConfig& cfg, std::ostream& log) {
  if (!cfg.dataset.generator) throw ConfigError("config /dataset: generate needs a 'generator' dataset");
  for (int r = 0; r < cfg.repetitions; ++r) {
    const RepData rd = materialize(cfg, r);
    const fs::path dir = rep_dir(cfg.output_dir, "data", r);
    save_rep(rd, dir);
    log << "wrote " << dir.string() << " (" << rd.ds.num_bags() << " bags, " << rd.ds.num_individuals()
        << " individuals, seed " << rd.seed << ")\n";
  }
}

void cmd_train(const ExperimentConfig& cfg, std::ostream& log, bool use_grid, int threads) {
  std::vector<RepData> data;
  for (int r = 0; r < cfg.repetitions; ++r) data.push_back(obtain_rep(cfg, r, log));
  const std::size_t n_models = cfg.models.size();
  std::mutex log_mu;
  parallel_for(data.size() * n_models, threads, [&](std::size_t i) {
    const int r = static_cast<int>(i / n_models);
    const ModelEntry& e = cfg.models[i % n_models];
    FitOutcome fit = fit_model(e, data[static_cast<std::size_t>(r)], use_grid, 1);
    const fs::path dir = rep_dir(cfg.output_dir, "models", r);
    fs::create_directories(dir);
    save_checkpoint(fit.result.model, dir / (e.spec.name + ".json"));
    write_trace_csv(fit.result.trace, dir / (e.spec.name + ".trace.csv"));
    if (!fit.tuning.is_null()) write_json(fit.tuning, dir / (e.spec.name + ".tune.json"));
    std::lock_guard lk(log_mu);
    log << "rep " << r << ' ' << e.spec.name << ": " << fit.result.epochs_run << " epochs, validation bag NLL "
        << fmt(fit.result.validation_nll) << '\n';
  });
}

void cmd_evaluate(const ExperimentConfig& cfg, std::ostream& log) {
  for (int r = 0; r < cfg.repetitions; ++r) {
    const fs::path ddir = rep_dir(cfg.output_dir, "data", r);
    if (!rep_on_disk(ddir)) throw DataError("no dataset at " + ddir.string() + "; run generate or train first");
    const RepData rd = load_rep(cfg, r, ddir);
    EvalReport rep;
    rep.repetition = r;
    rep.seed = rd.seed;
    rep.config_digest = cfg.digest;
    const fs::path out = rep_dir(cfg.output_dir, "reports", r);
    fs::create_directories(out);
    std::vector<Index> all_rows(static_cast<std::size_t>(rd.ds.num_individuals()));
    for (std::size_t i = 0; i < all_rows.size(); ++i) all_rows[i] = static_cast<Index>(i);
    for (const auto& e : cfg.models) {
      const fs::path ck = rep_dir(cfg.output_dir, "models", r) / (e.spec.name + ".json");
      if (!fs::exists(ck)) throw DataError("missing checkpoint " + ck.string());
      const FittedModel m = load_checkpoint(ck);
      rep.models.push_back(evaluate_model(m, rd.ds, rd.splits, cfg.eval));
      write_predictions_csv(rd.ds, all_rows, m.predict_rows(rd.ds, all_rows),
                            out / ("predictions_" + e.spec.name + ".csv"));
    }
    emit_report(rep, out / "report.json");
    log << "wrote " << (out / "report.json").string() << '\n';
  }
}

void cmd_benchmark(const ExperimentConfig& cfg, std::ostream& out, std::ostream& log, int threads) {
  const BenchmarkResult res = run_benchmark(cfg, threads, &log);
  const fs::path dir = cfg.output_dir / "benchmark";
  fs::create_directories(dir);
  write_json(res.comparison, dir / "comparison.json");

  // one report per setting and repetition
  std::map<std::pair<std::string, int>, EvalReport> reports;
  std::vector<std::string> order;
  for (const auto& c : res.cells) {
    auto& r = reports[{c.setting, c.repetition}];
    r.repetition = c.repetition;
    r.seed = repetition_seed(cfg, c.repetition);
    r.config_digest = cfg.digest;
    r.models.push_back(c.report);
    if (std::find(order.begin(), order.end(), c.setting) == order.end()) order.push_back(c.setting);
  }
  for (const auto& [key, r] : reports) {
    const auto idx = std::find(order.begin(), order.end(), key.first) - order.begin();
    emit_report(r, dir / ("setting_" + std::to_string(idx)) / ("rep_" + std::to_string(key.second)) / "report.json");
  }
  for (const auto& c : res.cells)
    if (!c.tuning.is_null()) {
      const auto idx = std::find(order.begin(), order.end(), c.setting) - order.begin();
      write_json(c.tuning, dir / ("setting_" + std::to_string(idx)) / ("rep_" + std::to_string(c.repetition)) /
                               (c.model + ".tune.json"));
    }

  std::ofstream csv(dir / "table.csv", std::ios::binary);
  csv << "setting,n_bags,n_mean,model,metric,median,mean\n";
  for (const auto& s : res.comparison["settings"])
    for (const auto& [model, metrics] : s["models"].items())
      for (const auto& [metric, v] : metrics.items())
        csv << '"' << s["label"].get<std::string>() << "\"," << s["n_bags"].get<Index>() << ','
            << fmt(s["n_mean"].get<double>()) << ',' << model << ',' << metric << ','
            << (v["median"].is_null() ? std::string("nan") : fmt(v["median"].get<double>())) << ','
            << (v["mean"].is_null() ? std::string("nan") : fmt(v["mean"].get<double>())) << '\n';

  const std::string& metric = cfg.wilcoxon_metric;
  for (const auto& s : res.comparison["settings"]) {
    out << s["label"].get<std::string>() << "  median " << metric << '\n';
    for (const auto& [model, metrics] : s["models"].items()) {
      const json& v = metrics.contains(metric) ? metrics[metric]["median"] : json(nullptr);
      out << "  " << std::left << std::setw(20) << model << (v.is_null() ? std::string("nan") : fmt(v.get<double>()))
          << '\n';
    }
  }
  log << "wrote " << (dir / "comparison.json").string() << '\n';
}

bool cmd_gradcheck(const ExperimentConfig& cfg, std::ostream& out) {
  const auto rows = run_gradcheck(cfg.gradcheck, cfg.seed);
  bool ok = true;
  json j = json::array();
  for (const auto& r : rows) {
    ok = ok && r.pass;
    out << std::left << std::setw(20) << r.family << " #" << r.instance << "  params " << std::setw(4) << r.n_params
        << " max rel err " << std::setw(12) << fmt(r.max_rel_error) << ' ' << (r.pass ? "ok" : "FAIL")
        << (r.pass ? "" : " (" + r.worst_param + ")") << '\n';
    j.push_back(json{{"family", r.family},
                     {"instance", r.instance},
                     {"n_params", r.n_params},
                     {"max_rel_error", finite_or_null(r.max_rel_error)},
                     {"worst_param", r.worst_param},
                     {"pass", r.pass}});
  }
  write_json(json{{"tolerance", cfg.gradcheck.tolerance}, {"step", cfg.gradcheck.step}, {"rows", j}},
             cfg.output_dir / "gradcheck.json");
  return ok;
}

void cmd_predict(const fs::path& checkpoint, const fs::path& individuals, const fs::path& out_csv) {
  if (!fs::exists(checkpoint)) throw DataError("missing checkpoint " + checkpoint.string());
  const FittedModel m = load_checkpoint(checkpoint);
  const IndividualRows rows = load_individuals_csv(individuals);
  if (m.input_dim() >= 0 && m.input_dim() != rows.X.cols())
    throw DimensionMismatch("checkpoint expects " + std::to_string(m.input_dim()) + " covariates, " +
                            individuals.string() + " has " + std::to_string(rows.X.cols()));
  auto preds = m.predict(rows.X, rows.bag_id);
  if (!out_csv.parent_path().empty()) fs::create_directories(out_csv.parent_path());
  std::ofstream out(out_csv, std::ios::binary);
  if (!out) throw DataError("cannot write " + out_csv.string());
  out << "individual_id,bag_id,pred_mean,pred_m,pred_s,link\n";
  for (std::size_t i = 0; i < preds.size(); ++i)
    out << rows.individual_id[i] << ',' << rows.bag_id[i] << ',' << fmt(predictive_mean(preds[i])) << ','
        << fmt(preds[i].m) << ',' << fmt(preds[i].s) << ',' << to_string(preds[i].link) << '\n';
}

}  // namespace aggva
