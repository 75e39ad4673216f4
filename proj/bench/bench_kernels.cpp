#include <benchmark/benchmark.h>

#include <vector>

#include "dream/kernels.hpp"
#include "dream/model.hpp"
#include "dream/rng.hpp"
#include "dream/task.hpp"

using namespace dream;
using namespace dream::kernels;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform() - 0.5;
  return v;
}

using MatmulFn = void (*)(std::span<const double>, std::span<const double>, std::span<double>, std::size_t,
                          std::size_t, std::size_t, bool);

void run_matmul(benchmark::State& state, MatmulFn fn) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1);
  const auto b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    fn(a, b, c, n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["flops"] = benchmark::Counter(2.0 * static_cast<double>(n * n * n), benchmark::Counter::kIsIterationInvariantRate);
}

void BM_MatmulNN_Serial(benchmark::State& s) { run_matmul(s, matmul_nn_serial); }
void BM_MatmulNN_Parallel(benchmark::State& s) { run_matmul(s, matmul_nn_parallel); }
void BM_MatmulNT_Serial(benchmark::State& s) { run_matmul(s, matmul_nt_serial); }
void BM_MatmulNT_Parallel(benchmark::State& s) { run_matmul(s, matmul_nt_parallel); }
void BM_MatmulTN_Serial(benchmark::State& s) { run_matmul(s, matmul_tn_serial); }
void BM_MatmulTN_Parallel(benchmark::State& s) { run_matmul(s, matmul_tn_parallel); }

using AttentionFn = void (*)(std::span<const double>, std::span<const double>, std::span<const double>,
                             const AttentionMask&, const AttentionShape&, std::span<double>, std::span<double>);

void run_attention(benchmark::State& state, AttentionFn fn) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const AttentionShape shape{n, n, 4, 16};
  const std::size_t d = shape.heads * shape.head_dim;
  const auto q = random_values(n * d, 3);
  const auto k = random_values(n * d, 4);
  const auto v = random_values(n * d, 5);
  const auto mask = AttentionMask::causal(static_cast<int>(n), 0);
  std::vector<double> out(n * d), probs(shape.heads * n * n);
  for (auto _ : state) {
    fn(q, k, v, mask, shape, out, probs);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_Attention_Serial(benchmark::State& s) { run_attention(s, attention_forward_serial); }
void BM_Attention_Parallel(benchmark::State& s) { run_attention(s, attention_forward_parallel); }

void run_prefill(benchmark::State& state, Backend backend) {
  BackendGuard guard(backend);
  ModelConfig c;
  const auto models = init_models(c);
  const auto prompt = task::prompt_sequence(task::gen_sample(7, c));
  NoGradGuard ng;
  for (auto _ : state) {
    auto out = target_forward(models.target, prompt.ids, nullptr, false);
    benchmark::DoNotOptimize(out.logits.values().data());
  }
}

void BM_TargetPrefill_Serial(benchmark::State& s) { run_prefill(s, Backend::kSerial); }
void BM_TargetPrefill_Parallel(benchmark::State& s) { run_prefill(s, Backend::kParallel); }

}  // namespace

BENCHMARK(BM_MatmulNN_Serial)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_MatmulNN_Parallel)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_MatmulNT_Serial)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_MatmulNT_Parallel)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_MatmulTN_Serial)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_MatmulTN_Parallel)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Attention_Serial)->Arg(64)->Arg(160)->Arg(320);
BENCHMARK(BM_Attention_Parallel)->Arg(64)->Arg(160)->Arg(320);
BENCHMARK(BM_TargetPrefill_Serial);
BENCHMARK(BM_TargetPrefill_Parallel);

BENCHMARK_MAIN();
