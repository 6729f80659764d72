#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "charnmt/tokenize.hpp"
#include "charnmt/trainer.hpp"

using namespace charnmt;

namespace {

ModelConfig bench_model(std::size_t encoder_layers) {
  ModelConfig m;
  m.embedding_dim = 64;
  m.encoder.num_bilstm_layers = encoder_layers;
  m.encoder.model_dim = 64;
  m.encoder.projection_dim = 64;
  m.encoder.dropout = 0.2;
  m.decoder.num_layers = 2;
  m.decoder.model_dim = 64;
  m.decoder.dropout = 0.2;
  return m;
}

Batch random_batch(std::size_t batch, std::size_t length, int vocab, Rng& rng) {
  std::uniform_int_distribution<int> tok(static_cast<int>(kNumSpecials), vocab - 1);
  Batch b;
  for (std::size_t i = 0; i < batch; ++i) {
    std::vector<int> s(length), t(length);
    for (auto& x : s) x = tok(rng);
    for (auto& x : t) x = tok(rng);
    b.source.push_back(std::move(s));
    b.target.push_back(std::move(t));
  }
  return b;
}

// One optimiser update as a function of encoder depth; the per-layer cost is
// the slope across depths.
void BM_TrainStep(benchmark::State& state) {
  const auto layers = static_cast<std::size_t>(state.range(0));
  Seq2Seq model(bench_model(layers), 100, 100);
  Trainer trainer(model, TrainingConfig{});
  Rng rng(1);
  const std::vector<Batch> group{random_batch(16, 40, 100, rng)};
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step(group).loss);
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_TrainStep)->Arg(2)->Arg(4)->Arg(6)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_EncodeForward(benchmark::State& state) {
  Seq2Seq model(bench_model(4), 100, 100);
  Rng rng(2);
  init_parameters(model.params(), 0.04, rng);
  const Batch b = random_batch(16, static_cast<std::size_t>(state.range(0)), 100, rng);
  for (auto _ : state) {
    Tape tape(false);
    benchmark::DoNotOptimize(model.encode(tape, b.source, false, rng, Real(1)).states.value().ptr());
  }
}
BENCHMARK(BM_EncodeForward)->Arg(20)->Arg(80)->Unit(benchmark::kMillisecond);

void BM_BeamSearch(benchmark::State& state) {
  Seq2Seq model(bench_model(2), 100, 100);
  Rng rng(3);
  init_parameters(model.params(), 0.04, rng);
  const Batch b = random_batch(1, 30, 100, rng);
  BeamConfig cfg = model.beam_config(30);
  cfg.beam_size = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(model.translate(b.source[0], cfg).best.score);
}
BENCHMARK(BM_BeamSearch)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_LearnBpe(benchmark::State& state) {
  Rng rng(4);
  std::vector<std::string> lines;
  for (int i = 0; i < 2000; ++i) {
    std::string line;
    for (int w = 0; w < 8; ++w) {
      if (w) line += ' ';
      const int len = 2 + static_cast<int>(rng() % 8);
      for (int k = 0; k < len; ++k) line += static_cast<char>('a' + rng() % 12);
    }
    lines.push_back(line);
  }
  for (auto _ : state) benchmark::DoNotOptimize(learn_bpe(lines, 500).merges.size());
}
BENCHMARK(BM_LearnBpe)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
