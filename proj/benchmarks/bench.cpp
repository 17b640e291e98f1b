#include <benchmark/benchmark.h>

#include "dcp/data.hpp"
#include "dcp/engine.hpp"
#include "dcp/network.hpp"
#include "dcp/prune.hpp"
#include "dcp/random.hpp"
#include "dcp/trainer.hpp"

namespace {

using namespace dcp;

Tensor noise(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(shape);
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.normal());
  return t;
}

// args: batch, in, out, side
void BM_Conv2dForward(benchmark::State& state) {
  const auto b = std::size_t(state.range(0)), ci = std::size_t(state.range(1)), co = std::size_t(state.range(2)),
             s = std::size_t(state.range(3));
  const Tensor x = noise({b, ci, s, s}, 1), w = noise({co, ci, 3, 3}, 2);
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, 1, 1).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(9 * b * ci * co * s * s));
}
BENCHMARK(BM_Conv2dForward)->Args({32, 16, 16, 32})->Args({32, 32, 64, 16})->Args({32, 64, 64, 8})
    ->Unit(benchmark::kMillisecond);

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto s = std::size_t(state.range(0));
  Tensor x = noise({32, 16, s, s}, 1), w = noise({32, 16, 3, 3}, 2);
  w.set_requires_grad();
  for (auto _ : state) {
    w.zero_grad();
    backward(sum(conv2d(x, w, 1, 1)));
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

// One gated SGD step of the desk-scale network: an epoch over a single batch.
void BM_TrainStep(benchmark::State& state) {
  train::retain_freed_memory();
  const auto ds = data::synth_dataset(10, std::size_t(state.range(0)), 1);
  train::TrainConfig cfg;
  cfg.prune_rate = 0.3;
  cfg.epochs = 1 << 30;
  cfg.batch_size = ds.size();
  train::Trainer t(zoo::Network(zoo::build_tinycnn(), 1), cfg, ds, nullptr);
  for (auto _ : state) t.run_epoch();
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TrainStep)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_SelectChannels(benchmark::State& state) {
  const auto channels = zoo::infer_shapes(zoo::build_vgg16(10, 1.0)).prunable_channels;
  Rng rng(3);
  engine::LayerValues u;
  for (auto c : channels) {
    u.emplace_back(c);
    for (float& v : u.back()) v = static_cast<float>(rng.uniform());
  }
  for (auto _ : state) benchmark::DoNotOptimize(engine::select_channels(u, 0.5, 1).threshold);
}
BENCHMARK(BM_SelectChannels);

void BM_TaylorCriterion(benchmark::State& state) {
  const Shape shape{128, 64, 8, 8};
  const Tensor z = noise(shape, 4), g = noise(shape, 5);
  for (auto _ : state) benchmark::DoNotOptimize(engine::taylor_criterion<float>(z.data(), g.data(), shape).data());
}
BENCHMARK(BM_TaylorCriterion);

void BM_ExportCompact(benchmark::State& state) {
  zoo::Network net(zoo::build_resnet32(), 1);
  auto keep = prune::PruneSpec::keep_all(net.prunable_channels());
  for (auto& k : keep.keep) k.resize(k.size() / 2);
  for (auto _ : state) benchmark::DoNotOptimize(prune::export_compact(net, keep).parameter_count());
}
BENCHMARK(BM_ExportCompact)->Unit(benchmark::kMillisecond);

}  // namespace

// The packaged benchmark_main archive carries LTO bytecode from another
// compiler release, so the entry point lives here.
BENCHMARK_MAIN();
