#include <benchmark/benchmark.h>

#include <filesystem>

#include "ugda/extreme_points.hpp"
#include "ugda/heatmap.hpp"
#include "ugda/intensity.hpp"
#include "ugda/losses.hpp"
#include "ugda/measures.hpp"
#include "ugda/nifti.hpp"
#include "ugda/objective.hpp"
#include "ugda/phantom.hpp"

namespace {

using namespace ugda;

const PhantomStudy& study() {
  static const PhantomStudy s = generate_study(7, PhantomParams::defaults(Domain::source), "bench");
  return s;
}

void BM_GeneratePhantom(benchmark::State& state) {
  const auto params = PhantomParams::defaults(Domain::target);
  uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(generate_study(seed++, params));
}
BENCHMARK(BM_GeneratePhantom)->Unit(benchmark::kMillisecond);

void BM_DiceScore(benchmark::State& state) {
  const auto& s = study();
  const auto other = resample_mask(resample_mask(s.mask, {48, 48, 18}), s.mask.shape());
  for (auto _ : state) benchmark::DoNotOptimize(dice_score(s.mask, other));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(s.mask.size()));
}
BENCHMARK(BM_DiceScore);

void BM_ExtractExtremePoints(benchmark::State& state) {
  const auto& s = study();
  for (auto _ : state) benchmark::DoNotOptimize(extract_extreme_points(s.mask));
}
BENCHMARK(BM_ExtractExtremePoints);

void BM_Mxa(benchmark::State& state) {
  const auto& s = study();
  const auto truth = extract_extreme_points(s.mask);
  for (auto _ : state) benchmark::DoNotOptimize(mxa(s.mask, truth));
}
BENCHMARK(BM_Mxa);

void BM_RenderHeatmaps(benchmark::State& state) {
  const auto& s = study();
  const auto pts = extract_extreme_points(s.mask);
  for (auto _ : state) benchmark::DoNotOptimize(render_heatmaps(pts, s.mask.shape()));
}
BENCHMARK(BM_RenderHeatmaps)->Unit(benchmark::kMillisecond);

void BM_ResampleToModelGrid(benchmark::State& state) {
  const auto& s = study();
  for (auto _ : state) benchmark::DoNotOptimize(resample_volume(s.volume, {32, 32, 24}));
}
BENCHMARK(BM_ResampleToModelGrid);

void BM_LargestComponent(benchmark::State& state) {
  const auto& s = study();
  for (auto _ : state) benchmark::DoNotOptimize(largest_component(s.mask));
}
BENCHMARK(BM_LargestComponent);

void BM_NiftiWriteRead(benchmark::State& state) {
  const auto path = (std::filesystem::temp_directory_path() / "ugda_bench.nii.gz").string();
  for (auto _ : state) {
    write_volume(path, study().volume);
    benchmark::DoNotOptimize(read_volume(path));
  }
  std::filesystem::remove(path);
}
BENCHMARK(BM_NiftiWriteRead)->Unit(benchmark::kMillisecond);

Batch model_batch(int64_t b) {
  Batch batch;
  batch.image = torch::rand({b, 1, 32, 32, 24});
  batch.heatmaps = torch::rand({b, 6, 32, 32, 24});
  batch.mask = (torch::rand({b, 1, 32, 32, 24}) > 0.7).to(torch::kFloat);
  batch.roles.assign(static_cast<size_t>(b), BatchRole::source());
  return batch;
}

// Full-size networks on the default 32x32x24 model grid, one thread.
void BM_DualForward(benchmark::State& state) {
  torch::set_num_threads(1);
  torch::manual_seed(0);
  ModelSet m = ModelSet::create(Variant::ugda, PhnnConfig::heatmap_net(), PhnnConfig::seg_net(), {});
  m.eval();
  const Batch batch = model_batch(state.range(0));
  torch::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(forward_dual(m, batch, HeatmapFeed::predicted));
}
BENCHMARK(BM_DualForward)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_SupervisedStep(benchmark::State& state) {
  torch::set_num_threads(1);
  torch::manual_seed(0);
  ModelSet m = ModelSet::create(Variant::supervised_dual, PhnnConfig::heatmap_net(), PhnnConfig::seg_net(), {});
  const Batch batch = model_batch(2);
  torch::optim::Adam opt(m.main_parameters(), torch::optim::AdamOptions(3e-3));
  for (auto _ : state) {
    opt.zero_grad();
    pretrain_loss(m, batch, Variant::supervised_dual, {}).total().backward();
    opt.step();
  }
}
BENCHMARK(BM_SupervisedStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
