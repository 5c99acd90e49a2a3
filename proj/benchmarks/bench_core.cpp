#include "aggva/bag_models.hpp"
#include "aggva/baselines.hpp"
#include "aggva/data.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace aggva;

namespace {

MatrixXd gaussian(Index r, Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  MatrixXd M(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) M(i, j) = z(rng);
  return M;
}

void BM_KernelMatrix(benchmark::State& st) {
  const Index n = st.range(0);
  MatrixXd X = gaussian(n, 18, 1);
  auto k = KernelSpec::rbf(2.0);
  for (auto _ : st) benchmark::DoNotOptimize(kernel_matrix(k, X));
  st.SetComplexityN(n);
}
BENCHMARK(BM_KernelMatrix)->Arg(50)->Arg(200)->Arg(800);

void BM_Elbo(benchmark::State& st) {
  SwissRollConfig cfg;
  cfg.n_bags = 32;
  cfg.n_mean = 150;
  cfg.n_std = 50;
  cfg.seed = 2;
  const auto ds = make_swiss_roll_dataset(cfg);
  std::vector<Index> pos(static_cast<std::size_t>(ds.num_bags()));
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<Index>(i);
  const auto bags = make_bag_data(ds, pos);
  std::mt19937_64 rng(3);
  VbaggModel model;
  model.link = st.range(1) ? Link::Sq : Link::Exp;
  model.state = VariationalState::from_prior(select_landmarks(ds.X, st.range(0), rng), KernelSpec::rbf(8.0), 3.0);
  const auto batch = BagBatch::all(bags);
  for (auto _ : st) benchmark::DoNotOptimize(vbagg_elbo(model, batch, true).value);
}
BENCHMARK(BM_Elbo)->Args({20, 1})->Args({40, 1})->Args({40, 0})->Args({80, 1})->Unit(benchmark::kMillisecond);

void BM_NystromMap(benchmark::State& st) {
  MatrixXd W = gaussian(st.range(0), 18, 4);
  MatrixXd X = gaussian(1000, 18, 5);
  NystromFeatureMap fmap(W, KernelSpec::rbf(3.0));
  for (auto _ : st) benchmark::DoNotOptimize(fmap.map(X));
}
BENCHMARK(BM_NystromMap)->Arg(40)->Arg(160)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
