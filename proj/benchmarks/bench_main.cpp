#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "flipreid/eval.hpp"
#include "flipreid/rerank.hpp"
#include "flipreid/training.hpp"

using namespace flipreid;

namespace {

std::vector<Image> random_images(std::size_t n, const ModelConfig &cfg, std::mt19937_64 &gen) {
  std::uniform_int_distribution<int> pix(0, 255);
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) {
    Image img(3, std::uint32_t(cfg.height), std::uint32_t(cfg.width), 0);
    for (auto &p : img.pixels) p = static_cast<std::uint8_t>(pix(gen));
    out.push_back(std::move(img));
  }
  return out;
}

EmbeddingSet random_set(std::size_t n, std::size_t dim, std::mt19937_64 &gen) {
  std::normal_distribution<double> nd;
  EmbeddingSet s;
  s.features = Matrix(n, dim);
  for (double &v : s.features.values()) v = nd(gen);
  for (std::size_t i = 0; i < n; ++i) {
    s.identities.push_back(std::uint32_t(i % 50));
    s.cameras.push_back(std::uint32_t(i % 3));
  }
  return s;
}

void BM_EmbedForward(benchmark::State &state) {
  ModelConfig cfg;
  std::mt19937_64 gen(1);
  const Model model(cfg, 1);
  const Tensor4 x = preprocess(random_images(std::size_t(state.range(0)), cfg, gen), cfg.preprocess);
  for (auto _ : state) benchmark::DoNotOptimize(model.embed(x));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EmbedForward)->Arg(16)->Arg(64);

void BM_FlipReIDStep(benchmark::State &state) {
  ModelConfig cfg;
  cfg.num_classes = 4;
  std::mt19937_64 gen(2);
  Model model(cfg, 2);
  auto imgs = random_images(16, cfg, gen);
  for (std::size_t i = 0; i < 16; ++i) imgs.push_back(horizontal_flip(imgs[i]));
  const Tensor4 x = preprocess(imgs, cfg.preprocess);
  std::vector<std::uint32_t> labels;
  for (std::uint32_t i = 0; i < 16; ++i) labels.push_back(i / 4);
  for (auto _ : state) {
    model.zero_grad();
    benchmark::DoNotOptimize(step_loss(model, x, labels, TrainMode::flipreid, {}, true).report.total);
  }
}
BENCHMARK(BM_FlipReIDStep);

void BM_Evaluate(benchmark::State &state) {
  std::mt19937_64 gen(3);
  const auto q = random_set(std::size_t(state.range(0)), 48, gen);
  const auto g = random_set(std::size_t(state.range(0)) * 4, 48, gen);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(q, g).mAP);
}
BENCHMARK(BM_Evaluate)->Arg(50)->Arg(200);

void BM_Rerank(benchmark::State &state) {
  std::mt19937_64 gen(4);
  const auto q = random_set(std::size_t(state.range(0)), 48, gen);
  const auto g = random_set(std::size_t(state.range(0)) * 4, 48, gen);
  const Matrix qg = euclidean_distances(q.features, g.features);
  const Matrix qq = euclidean_distances(q.features, q.features);
  const Matrix gg = euclidean_distances(g.features, g.features);
  for (auto _ : state) benchmark::DoNotOptimize(rerank(qg, qq, gg, {}));
}
BENCHMARK(BM_Rerank)->Arg(25)->Arg(100);

} // namespace

BENCHMARK_MAIN();
