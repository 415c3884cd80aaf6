#include <random>

#include <benchmark/benchmark.h>

#include "n2n/layers.hpp"
#include "n2n/metrics.hpp"
#include "n2n/networks.hpp"
#include "n2n/registration.hpp"
#include "n2n/trainer.hpp"

using namespace n2n;

namespace {

Tensor<float> noise(int c, int h, int w, std::uint64_t seed) {
  Tensor<float> t(c, h, w);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

Image noise_image(int h, int w, std::uint64_t seed) {
  Image im(h, w);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  for (auto& v : im.values()) v = static_cast<float>(u(rng));
  return im;
}

// Smooth blob pattern so registration has something to lock on to.
Image blobs(int side) {
  Image im(side, side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double dy = (y - side * 0.45) / (side * 0.3), dx = (x - side * 0.55) / (side * 0.2);
      const double ey = (y - side * 0.6) / (side * 0.1), ex = (x - side * 0.35) / (side * 0.15);
      im(y, x) = static_cast<float>((dy * dy + dx * dx < 1 ? 150 : 0) + (ey * ey + ex * ex < 1 ? 90 : 0));
    }
  }
  return im;
}

void BM_Conv2dForward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const int side = static_cast<int>(state.range(1));
  nn::Conv2d<float> conv("bench", c, 2 * c, 4, 2, 1);
  std::mt19937_64 rng(1);
  nn::init_normal(conv.weight(), rng, 0.0, 0.02);
  const auto x = noise(c, side, side, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv.forward(x));
}
BENCHMARK(BM_Conv2dForward)->Args({8, 256})->Args({64, 64})->Args({128, 32})->Unit(benchmark::kMillisecond);

void BM_GeneratorForward(benchmark::State& state) {
  nn::GeneratorConfig gc;
  gc.width_multiplier = 1.0 / static_cast<double>(state.range(0));
  nn::Generator<float> g(gc);
  std::mt19937_64 rng(1);
  g.init(rng);
  const auto x = noise(1, 256, 256, 3);
  for (auto _ : state) benchmark::DoNotOptimize(g.forward(x, false, 0));
}
BENCHMARK(BM_GeneratorForward)->Arg(8)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  train::TrainConfig c;
  c.width_multiplier = 0.125;
  c.seed = 1;
  train::Trainer t(c);
  const auto x = noise(1, 256, 256, 4);
  const auto y = noise(1, 256, 256, 5);
  for (auto _ : state) benchmark::DoNotOptimize(t.train_step(x, y));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_Metrics(benchmark::State& state) {
  const auto a = noise_image(256, 256, 6);
  const auto b = noise_image(256, 256, 7);
  for (auto _ : state) {
    benchmark::DoNotOptimize(metrics::mae(a, b));
    benchmark::DoNotOptimize(metrics::psnr(a, b));
    benchmark::DoNotOptimize(metrics::mutual_information(a, b));
    benchmark::DoNotOptimize(metrics::ssim(a, b));
  }
}
BENCHMARK(BM_Metrics)->Unit(benchmark::kMicrosecond);

void BM_RegisterAffine(benchmark::State& state) {
  const auto fixed = blobs(128);
  const auto moving = reg::warp(fixed, reg::affine_to_field(reg::rotation(0.3), 128, 128));
  const auto cost = state.range(0) == 0 ? reg::Cost::NCC : reg::Cost::MI;
  for (auto _ : state) benchmark::DoNotOptimize(reg::register_affine(fixed, moving, cost));
}
BENCHMARK(BM_RegisterAffine)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_WarpFuse(benchmark::State& state) {
  const auto im = blobs(128);
  const auto d1 = reg::affine_to_field(reg::rotation(0.3), 128, 128);
  const auto d2 = reg::affine_to_field(reg::translation(2.0, -3.0), 128, 128);
  for (auto _ : state) benchmark::DoNotOptimize(reg::warp(im, reg::fuse_fields(d1, d2, 0.4)));
}
BENCHMARK(BM_WarpFuse)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
