#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "memlab/autodiff.hpp"
#include "memlab/corpus.hpp"
#include "memlab/covsim.hpp"
#include "memlab/mia.hpp"
#include "memlab/model.hpp"
#include "memlab/probing.hpp"
#include "memlab/rng.hpp"
#include "memlab/trainer.hpp"
#include "memlab/vocab.hpp"

using namespace memlab;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({r, c});
  for (double& v : t.data()) v = rng.normal();
  return t;
}

ModelConfig desk_config() { return ModelConfig::for_vocabulary(Vocabulary::standard()); }

std::vector<corpus::SyntheticSample> scenes(std::size_t n) {
  std::vector<corpus::SyntheticSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(corpus::make_scene_sample(derive_seed(1, "bench", i)));
  return out;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(112)->Arg(256);

static void BM_Forward(benchmark::State& state) {
  const ModelParams p = ModelParams::init(desk_config(), 1);
  const auto s = scenes(1).front();
  for (auto _ : state) benchmark::DoNotOptimize(forward(p, trainer::input_of(s)));
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);

static void BM_LossAndGradients(benchmark::State& state) {
  const ModelParams p = ModelParams::init(desk_config(), 1);
  const auto s = scenes(1).front();
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_gradients(p, trainer::input_of(s)));
}
BENCHMARK(BM_LossAndGradients)->Unit(benchmark::kMillisecond);

static void BM_SimilarityTrial(benchmark::State& state) {
  const ModelParams p = ModelParams::init(desk_config(), 1);
  const auto batch = scenes(static_cast<std::size_t>(state.range(0)));
  const auto privacy = corpus::privacy_preset("paper-table7");
  for (auto _ : state)
    benchmark::DoNotOptimize(trainer::similarity_trial(p, batch, trainer::Variant::Privacy, privacy, 3));
}
BENCHMARK(BM_SimilarityTrial)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

static void BM_RenderWatermark(benchmark::State& state) {
  const auto s = corpus::make_scene_sample(5);
  const auto rec = corpus::privacy_preset("paper-table7").u1[2];
  for (auto _ : state) benchmark::DoNotOptimize(corpus::render_watermark(s, rec, corpus::WatermarkMode::Full));
}
BENCHMARK(BM_RenderWatermark);

static void BM_CovsimMonteCarlo(benchmark::State& state) {
  covsim::CovSimConfig cfg;
  cfg.batch = static_cast<std::size_t>(state.range(0));
  cfg.trials = 2000;
  for (auto _ : state) benchmark::DoNotOptimize(covsim::run_mc(cfg));
}
BENCHMARK(BM_CovsimMonteCarlo)->Arg(2)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_Pca(benchmark::State& state) {
  const Tensor x = random_matrix(static_cast<std::size_t>(state.range(0)), 64, 3);
  for (auto _ : state) benchmark::DoNotOptimize(probing::pca_project(x, 2));
}
BENCHMARK(BM_Pca)->Arg(272)->Arg(1360);

static void BM_LogisticProbe(benchmark::State& state) {
  const std::size_t n = 816;
  const Tensor x = random_matrix(n, 64, 4);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % 2);
  probing::ProbeConfig cfg;
  cfg.standardize = true;
  for (auto _ : state) benchmark::DoNotOptimize(probing::train_logistic_probe(x, y, cfg));
}
BENCHMARK(BM_LogisticProbe)->Unit(benchmark::kMillisecond);

static void BM_CompressedLength(benchmark::State& state) {
  const std::string text = corpus::serialize_sample_text(
      corpus::render_watermark(corpus::make_scene_sample(2), corpus::privacy_preset("paper-table7").u2[0],
                               corpus::WatermarkMode::Full));
  for (auto _ : state) benchmark::DoNotOptimize(mia::compressed_length(text));
}
BENCHMARK(BM_CompressedLength);

static void BM_AucRoc(benchmark::State& state) {
  Rng rng(6);
  std::vector<double> scores(static_cast<std::size_t>(state.range(0)));
  std::vector<int> labels(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = rng.normal();
    labels[i] = static_cast<int>(i % 2);
  }
  for (auto _ : state) benchmark::DoNotOptimize(mia::auc_roc(scores, labels));
}
BENCHMARK(BM_AucRoc)->Arg(200)->Arg(20000);
BENCHMARK_MAIN();
