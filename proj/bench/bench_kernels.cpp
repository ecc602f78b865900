// Parallel kernels against their serial:: twins. Run with
// OMP_NUM_THREADS=<n> to see the scaling; on one core the pairs should tie.
#include <benchmark/benchmark.h>

#include <filesystem>
#include <random>

#include "uaom/features.hpp"
#include "uaom/model_io.hpp"
#include "uaom/nnf.hpp"
#include "uaom/tensor.hpp"

using namespace uaom;

namespace {

Tensor noise(int h, int w, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Tensor t(h, w, c);
  for (float& v : t.data()) v = u(rng);
  return t;
}

ConvLayerSpec conv_layer(int in, int out) {
  ConvLayerSpec c;
  c.in_channels = in;
  c.out_channels = out;
  c.kernel_h = c.kernel_w = 3;
  c.padding = 1;
  c.has_relu = true;
  const Tensor w = noise(1, 1, out * in * 9, 1);
  c.weights.assign(w.data().begin(), w.data().end());
  c.bias.assign(static_cast<std::size_t>(out), 0.01f);
  return c;
}

DescriptorSet unit_rows(std::size_t n, std::uint64_t seed) {
  const Tensor t = noise(1, 1, static_cast<int>(n * 128), seed);
  DescriptorSet d;
  d.values.assign(t.data().begin(), t.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 128; ++k) s += d.values[i * 128 + k] * d.values[i * 128 + k];
    for (std::size_t k = 0; k < 128; ++k) d.values[i * 128 + k] /= static_cast<float>(std::sqrt(s));
  }
  return d;
}

FeatureQuad quad(int side, int channels) {
  return make_quad(noise(side, side, channels, 2), noise(side, side, channels, 3), noise(side, side, channels, 4),
                   noise(side, side, channels, 5));
}

PatchSet patches(std::size_t n) {
  PatchSet p;
  for (std::size_t i = 0; i < n; ++i) {
    p.patches.push_back(noise(32, 32, 1, 10 + i));
    p.source.push_back(i);
  }
  return p;
}

const NetworkModel& descriptor_model() {
  static const NetworkModel m = load_model(std::filesystem::path(UAOM_FIXTURE_DIR) / "descriptor.uaom");
  return m;
}

void conv(benchmark::State& st, bool parallel) {
  const Tensor x = noise(96, 96, 16, 7);
  const ConvLayerSpec c = conv_layer(16, 32);
  for (auto _ : st) benchmark::DoNotOptimize(parallel ? conv2d(x, c) : serial::conv2d(x, c));
}

void distances(benchmark::State& st, bool parallel) {
  const DescriptorSet a = unit_rows(800, 1), b = unit_rows(800, 2);
  for (auto _ : st) benchmark::DoNotOptimize(parallel ? distance_matrix(a, b) : serial::distance_matrix(a, b));
}

void brute(benchmark::State& st, bool parallel) {
  const FeatureQuad q = quad(24, 8);
  for (auto _ : st) benchmark::DoNotOptimize(parallel ? brute_force_nnf(q, 1) : serial::brute_force_nnf(q, 1));
}

void describe_patches(benchmark::State& st, bool parallel) {
  const PatchSet p = patches(64);
  const NetworkModel& m = descriptor_model();
  for (auto _ : st) benchmark::DoNotOptimize(parallel ? describe(p, m) : serial::describe(p, m));
}

}  // namespace

BENCHMARK_CAPTURE(conv, serial, false)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(conv, openmp, true)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(distances, serial, false)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(distances, openmp, true)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(brute, serial, false)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(brute, openmp, true)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(describe_patches, serial, false)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(describe_patches, openmp, true)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
