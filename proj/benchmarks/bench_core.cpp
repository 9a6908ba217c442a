// Hot-path benchmarks: raw matmul, one transformer layer forward, a full
// visual-tower forward, and one optimizer step on a small batch.

#include <benchmark/benchmark.h>

#include <vector>

#include "stfusion/aggregation.hpp"
#include "stfusion/data.hpp"
#include "stfusion/layers.hpp"
#include "stfusion/model.hpp"
#include "stfusion/objective.hpp"
#include "stfusion/rng.hpp"
#include "stfusion/tensor.hpp"

namespace {

stf::Tensor random_tensor(stf::Shape shape, uint64_t seed) {
  stf::Tensor t(std::move(shape));
  stf::Rng rng(seed);
  for (double& v : t.values) v = rng.normal();
  return t;
}

void bm_matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  stf::Tape tp;
  const stf::Var a = tp.input(random_tensor({n, n}, 1));
  const stf::Var b = tp.input(random_tensor({n, n}, 2));
  for (auto _ : state) {
    stf::Tape fresh;
    const stf::Var x = fresh.input(tp.value(a));
    const stf::Var y = fresh.input(tp.value(b));
    benchmark::DoNotOptimize(fresh.value(fresh.matmul(x, y)).values.data());
  }
}
BENCHMARK(bm_matmul)->Arg(16)->Arg(64)->Arg(128);

stf::ModelConfig bench_config() {
  stf::ModelConfig cfg;  // defaults: d=32, 4 heads, two-layer towers
  return cfg;
}

void bm_transformer_layer(benchmark::State& state) {
  const stf::ModelConfig cfg = bench_config();
  const stf::ModelParams params = stf::ModelParams::init(cfg, 16, 3);
  const stf::Tensor x = random_tensor({17, cfg.d}, 4);
  for (auto _ : state) {
    stf::Tape tp;
    const stf::ModelVars mv = stf::lift(tp, params, false);
    benchmark::DoNotOptimize(
        tp.value(stf::transformer_layer(tp, tp.input(x), mv.vision[0])).values.data());
  }
}
BENCHMARK(bm_transformer_layer);

struct PipelineFixture {
  stf::CorpusSpec spec;
  std::vector<stf::CorpusItem> corpus;
  stf::Vocab vocab;
  stf::ModelParams params;

  PipelineFixture() {
    spec = stf::CorpusSpec::mixed();
    spec.n_items = 8;
    spec.ocr_probability = 1.0;
    spec.seed = 5;
    corpus = stf::generate_corpus(spec);
    vocab = stf::build_vocab(corpus);
    params = stf::ModelParams::init(bench_config(), vocab.size(), 6);
  }
};

void bm_visual_tower_forward(benchmark::State& state) {
  static const PipelineFixture fx;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        stf::visual_tower_forward(fx.params, fx.vocab, fx.corpus[0].image, fx.corpus[0].ocr));
  }
}
BENCHMARK(bm_visual_tower_forward);

void bm_train_step(benchmark::State& state) {
  static const PipelineFixture fx;
  stf::ModelParams p = fx.params;
  stf::AdamState opt = stf::AdamState::init(p);
  stf::TrainConfig tc;
  const stf::Batch batch{{0, 1, 2, 3}, {0, 0, 0, 0}};
  for (auto _ : state) {
    benchmark::DoNotOptimize(stf::train_step(p, fx.vocab, fx.corpus, batch, tc, opt).total);
  }
}
BENCHMARK(bm_train_step);

}  // namespace

BENCHMARK_MAIN();
