#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <benchmark/benchmark.h>

#include "protestlens/text_model.hpp"
#include "protestlens/vision_model.hpp"
#include "protestlens/vocab.hpp"

namespace {

using protestlens::Tensor;

Tensor<float> randn(const protestlens::Shape& shape, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<float> values(n);
  for (float& v : values) v = static_cast<float>(dist(rng));
  return Tensor<float>::from(shape, std::move(values));
}

std::string sample_paragraph() {
  std::string out;
  for (int i = 0; i < 24; ++i) {
    out += "Crowds gathered near the courthouse on Tuesday, carrying signs and "
           "chanting for higher wages; police kept one lane of Main Street open. ";
  }
  return out;
}

void bm_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor<float> a = randn({n, n}, 1);
  Tensor<float> b = randn({n, n}, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(protestlens::matmul(a, b));
  }
  state.SetItemsProcessed(state.iterations() *
                          static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(bm_matmul)->Arg(32)->Arg(64)->Arg(128)->Arg(256);

// The {len, len} rows make the same kernel do dense work (every pair falls
// inside the band); the gap against the {len, 16} rows is the banded win.
void bm_sliding_window_attention(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const auto window = static_cast<std::size_t>(state.range(1));
  const std::size_t heads = 4, dh = 16;
  Tensor<float> q = randn({heads, len, dh}, 3);
  Tensor<float> k = randn({heads, len, dh}, 4);
  Tensor<float> v = randn({heads, len, dh}, 5);
  std::vector<protestlens::TokenFlag> flags(len, protestlens::TokenFlag::local);
  flags[0] = protestlens::TokenFlag::global;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        protestlens::sliding_window_attention(q, k, v, window, flags));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(len));
}
BENCHMARK(bm_sliding_window_attention)
    ->Args({128, 16})
    ->Args({256, 16})
    ->Args({512, 16})
    ->Args({1024, 16})
    ->Args({128, 128})
    ->Args({256, 256})
    ->Args({512, 512})
    ->Args({1024, 1024});

void bm_cosine_window_attention(benchmark::State& state) {
  const auto nwin = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  const std::size_t heads = 4, dh = 16;
  Tensor<float> q = randn({nwin, heads, s, dh}, 6);
  Tensor<float> k = randn({nwin, heads, s, dh}, 7);
  Tensor<float> v = randn({nwin, heads, s, dh}, 8);
  Tensor<float> log_tau = Tensor<float>::zeros({heads});
  Tensor<float> bias = randn({heads, s, s}, 9);
  for (auto _ : state) {
    benchmark::DoNotOptimize(protestlens::cosine_window_attention<float>(
        q, k, v, log_tau, bias, nullptr, 0.01f));
  }
  state.SetItemsProcessed(state.iterations() *
                          static_cast<std::int64_t>(nwin * s));
}
BENCHMARK(bm_cosine_window_attention)
    ->Args({4, 16})
    ->Args({16, 16})
    ->Args({16, 64})
    ->Args({64, 64});

void bm_tokenize(benchmark::State& state) {
  const std::string text = sample_paragraph();
  for (auto _ : state) {
    benchmark::DoNotOptimize(protestlens::tokenize(text));
  }
  state.SetBytesProcessed(state.iterations() *
                          static_cast<std::int64_t>(text.size()));
}
BENCHMARK(bm_tokenize);

void bm_encode_text(benchmark::State& state) {
  const std::string text = sample_paragraph();
  protestlens::Vocabulary vocab =
      protestlens::build_vocabulary({text}, 200);
  protestlens::TextModelConfig config;
  config.max_len = 128;
  config.window = 16;
  for (auto _ : state) {
    benchmark::DoNotOptimize(protestlens::encode_text(text, vocab, config));
  }
  state.SetBytesProcessed(state.iterations() *
                          static_cast<std::int64_t>(text.size()));
}
BENCHMARK(bm_encode_text);

}  // namespace

BENCHMARK_MAIN();
