// Microbenchmarks for the kernels the training loop lives in. Wall-clock
// numbers are environment-dependent; the analytic cost model in the library
// is the portable source of truth.

#include <benchmark/benchmark.h>

#include "sstlm/harness.hpp"

namespace {

using namespace sstlm;

Tensor<float> random_mat(int64_t rows, int64_t cols, Rng& rng) {
    std::vector<float> values(static_cast<size_t>(rows * cols));
    for (auto& v : values) v = static_cast<float>(rng.normal());
    return Tensor<float>::from({rows, cols}, std::move(values));
}

void BM_Matmul(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(1);
    auto a = random_mat(n, n, rng);
    auto b = random_mat(n, n, rng);
    autodiff::NoGradGuard no_grad;
    for (auto _ : state) {
        auto c = matmul(a, b);
        benchmark::DoNotOptimize(c.values().data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_AttendCausal(benchmark::State& state) {
    const int64_t m = state.range(0);
    const int64_t cache = state.range(1);
    const int64_t dh = 16;
    Rng rng(2);
    auto q = random_mat(m, dh, rng);
    auto k = random_mat(cache + m, dh, rng);
    auto v = random_mat(cache + m, dh, rng);
    autodiff::NoGradGuard no_grad;
    for (auto _ : state) {
        auto out = attend_causal(q, k, v, cache);
        benchmark::DoNotOptimize(out.values().data());
    }
}
BENCHMARK(BM_AttendCausal)->Args({96, 0})->Args({96, 512})->Args({640, 1024});

void BM_ForwardLong(benchmark::State& state) {
    const int64_t n = state.range(0);
    RunConfig run;
    run.model.n_layers = 2;
    run.model.max_position = 2 * n + 600;
    run.interval_len = 64;
    run.task.n = n;
    run.task.num_pairs = 1;
    run.policy.kind = state.range(1) == 0 ? PolicyKind::Full : PolicyKind::Sst;

    const VocabLayout vocab = VocabLayout::build(run.model.vocab_size, run.task);
    Rng rng(3);
    auto params = ModelParams<float>::init(run.model, rng);
    auto inst = generate(run.task, vocab, rng);
    const int64_t n_intervals = static_cast<int64_t>(partition(n, run.interval_len).size());
    const std::vector<int64_t> ratios(static_cast<size_t>(n_intervals), 4);

    autodiff::NoGradGuard no_grad;
    for (auto _ : state) {
        auto result = forward_long(params, run, inst, ratios);
        benchmark::DoNotOptimize(result.logits.defined());
    }
}
BENCHMARK(BM_ForwardLong)->Args({1024, 0})->Args({1024, 1})->Args({4096, 1});

void BM_CostModelSweep(benchmark::State& state) {
    ModelConfig cfg;
    for (auto _ : state) {
        for (int64_t n : {1024, 2048, 4096, 8192, 16384}) {
            auto dense = cost_model(cfg, Policy{PolicyKind::Full, {}}, 1, n, 512);
            auto sst = cost_model(cfg, Policy{PolicyKind::Sst, {}}, 8, n, 512);
            benchmark::DoNotOptimize(dense.total_flops + sst.total_flops);
        }
    }
}
BENCHMARK(BM_CostModelSweep);

void BM_SimilarityMergePlan(benchmark::State& state) {
    const int64_t w = state.range(0), d = 64;
    Rng rng(4);
    std::vector<double> rows(static_cast<size_t>(w * d));
    for (auto& v : rows) v = rng.normal();
    for (auto _ : state) {
        auto lens = similarity_merge_plan(rows, w, d, w / 4);
        benchmark::DoNotOptimize(lens.size());
    }
}
BENCHMARK(BM_SimilarityMergePlan)->Arg(128)->Arg(512);

}  // namespace

BENCHMARK_MAIN();
