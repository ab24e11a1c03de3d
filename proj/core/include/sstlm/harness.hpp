#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sstlm/compress.hpp"
#include "sstlm/cost_model.hpp"
#include "sstlm/kv_cache.hpp"
#include "sstlm/model.hpp"
#include "sstlm/parallel.hpp"
#include "sstlm/run_config.hpp"
#include "sstlm/tasks.hpp"

namespace sstlm {

// Fixed stream ids for deriving independent rng domains from one run seed.
namespace rng_phase {
constexpr uint64_t kInit = 0;
constexpr uint64_t kTrainData = 1;
constexpr uint64_t kRatio = 2;
constexpr uint64_t kProbe = 3;
constexpr uint64_t kEval = 4;
constexpr uint64_t kBench = 5;
}  // namespace rng_phase

inline uint64_t data_domain_key(const RunConfig& run) {
    return Rng::mix(run.seed, run.task.seed);
}

// Per-interval compression ratios for one sequence: one draw per sequence by
// default, one per interval when the config asks for mixed ratios.
inline std::vector<int64_t> make_ratio_plan(const RunConfig& run, int64_t n_intervals,
                                            int64_t step, Rng& rng) {
    std::vector<int64_t> ratios(static_cast<size_t>(n_intervals));
    if (run.ratio_per_interval) {
        for (auto& r : ratios) r = sample_ratio(run.schedule, step, run.steps, rng);
    } else {
        const int64_t r = sample_ratio(run.schedule, step, run.steps, rng);
        std::fill(ratios.begin(), ratios.end(), r);
    }
    return ratios;
}

template <typename T>
struct ForwardResult {
    Tensor<T> logits;  // [target_len x V]; undefined when the instance has no target
    CacheStats cache_stats;
    uint64_t attn_pairs = 0;
    uint64_t matmul_flops = 0;
    int64_t visible_at_decode = 0;
};

// Encodes prompt + stream into the cache under the configured policy.
// Returns the next free absolute position. `interval_ratios` must hold one
// ratio per interval for the sst and baseline policies.
template <typename T>
int64_t encode_context(const ModelParams<T>& params, const RunConfig& run,
                       std::span<const int32_t> prompt, std::span<const int32_t> stream,
                       std::span<const int64_t> interval_ratios, KvCache<T>& cache) {
    int64_t pos = 0;
    if (!prompt.empty()) {
        std::vector<int64_t> positions(prompt.size());
        for (size_t i = 0; i < prompt.size(); ++i) positions[i] = pos++;
        auto step = encode_block(params, prompt, positions, cache, /*want_logits=*/false);
        append_block(cache, step, std::vector<KvRole>(prompt.size(), KvRole::Prompt));
    }
    if (stream.empty()) return pos;

    const auto spans = partition(static_cast<int64_t>(stream.size()), run.interval_len);
    if (run.policy.kind != PolicyKind::Full &&
        interval_ratios.size() != spans.size())
        throw ValueError("encode_context: need one ratio per interval");

    for (size_t i = 0; i < spans.size(); ++i) {
        const auto& span = spans[i];
        const auto content = stream.subspan(static_cast<size_t>(span.begin),
                                            static_cast<size_t>(span.len()));
        const int32_t interval_index = static_cast<int32_t>(i);
        switch (run.policy.kind) {
            case PolicyKind::Full: {
                std::vector<int64_t> positions(content.size());
                for (size_t j = 0; j < content.size(); ++j) positions[j] = pos++;
                auto step = encode_block(params, content, positions, cache, false);
                append_block(cache, step, std::vector<KvRole>(content.size(), KvRole::Content));
                break;
            }
            case PolicyKind::Sst: {
                auto [tokens, layout] = interleave_sst(span.len(), interval_ratios[i],
                                                       VocabLayout::sst_id, content,
                                                       interval_index);
                std::vector<int64_t> positions(tokens.size());
                for (size_t j = 0; j < tokens.size(); ++j) positions[j] = pos++;
                std::vector<KvRole> roles(tokens.size(), KvRole::Content);
                for (int64_t slot : layout.slots) roles[static_cast<size_t>(slot)] = KvRole::Sst;
                auto step = encode_block<T>(params, tokens, positions, cache, false);
                append_block(cache, step, roles, interval_index);
                cache.retain_ssts(interval_index);
                break;
            }
            case PolicyKind::Baseline: {
                BaselinePolicy policy = run.policy.baseline;
                policy.ratio = interval_ratios[i];
                Tensor<T> embeds = embedding(params.tok_embed, content);
                Tensor<T> compressed = baseline_compress(policy, embeds);
                std::vector<int64_t> positions(static_cast<size_t>(compressed.dim(0)));
                for (auto& p : positions) p = pos++;
                auto step = encode_block_embeds(params, std::move(compressed), positions, cache,
                                                false);
                append_block(cache, step, std::vector<KvRole>(positions.size(), KvRole::Sst),
                             interval_index);
                break;
            }
        }
    }
    return pos;
}

// One long-form pass per Stage-3 semantics: prompt KVs retained, each stream
// interval interleaved/encoded/retained under the policy, then the target
// decoded teacher-forced against prompt + retained summaries + its own
// prefix. Target logits come back aligned with the target tokens.
template <typename T>
ForwardResult<T> forward_long(const ModelParams<T>& params, const RunConfig& run,
                              const TaskInstance& inst,
                              std::span<const int64_t> interval_ratios,
                              std::function<void(const SpillRecord&)> spill_sink = nullptr) {
    const auto& counters = OpCounters::get();
    const uint64_t pairs0 = counters.attn_pairs;
    const uint64_t flops0 = counters.matmul_flops;

    KvCache<T> cache(params.cfg.n_layers, params.cfg.d_model);
    if (spill_sink) cache.set_spill_sink(std::move(spill_sink));

    int64_t pos = encode_context(params, run, inst.prompt, inst.stream, interval_ratios, cache);

    ForwardResult<T> result;
    result.visible_at_decode = cache.size();
    const int64_t target_len = static_cast<int64_t>(inst.target.size());
    if (target_len > 0) {
        std::vector<int32_t> decode_tokens;
        decode_tokens.reserve(static_cast<size_t>(target_len));
        decode_tokens.push_back(VocabLayout::answer_id);
        decode_tokens.insert(decode_tokens.end(), inst.target.begin(), inst.target.end() - 1);
        std::vector<int64_t> positions(decode_tokens.size());
        for (auto& p : positions) p = pos++;
        auto step = encode_block<T>(params, decode_tokens, positions, cache, /*want_logits=*/true);
        result.logits = step.logits;
    }

    result.cache_stats = cache.stats();
    result.attn_pairs = counters.attn_pairs - pairs0;
    result.matmul_flops = counters.matmul_flops - flops0;
    return result;
}

template <typename T>
std::vector<int32_t> argmax_tokens(const Tensor<T>& logits) {
    const int64_t rows = logits.dim(0), v = logits.dim(1);
    std::vector<int32_t> out(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) {
        const T* row = logits.values().data() + i * v;
        out[static_cast<size_t>(i)] =
            static_cast<int32_t>(std::max_element(row, row + v) - row);
    }
    return out;
}

// Free-running decode for qualitative inspection: feeds back its own argmax
// token by token instead of the ground-truth prefix.
template <typename T>
std::vector<int32_t> greedy_decode(const ModelParams<T>& params, const RunConfig& run,
                                   const TaskInstance& inst,
                                   std::span<const int64_t> interval_ratios, int64_t max_len) {
    autodiff::NoGradGuard no_grad;
    KvCache<T> cache(params.cfg.n_layers, params.cfg.d_model);
    int64_t pos = encode_context(params, run, inst.prompt, inst.stream, interval_ratios, cache);

    std::vector<int32_t> out;
    int32_t token = VocabLayout::answer_id;
    for (int64_t i = 0; i < max_len; ++i) {
        const int64_t position = pos++;
        auto step = encode_block<T>(params, std::span<const int32_t>(&token, 1),
                                    std::span<const int64_t>(&position, 1), cache, true);
        append_block(cache, step, {KvRole::Prompt});
        token = argmax_tokens(step.logits)[0];
        out.push_back(token);
    }
    return out;
}

struct EvalRow {
    std::string task;
    std::string policy;
    int64_t ratio = 1;
    int64_t n = 0;
    int64_t instances = 0;
    double exact_match = 0.0;
    double token_accuracy = 0.0;

    static std::string csv_header() {
        return "task,policy,ratio,n,instances,exact_match,token_accuracy";
    }
    std::string csv_row() const;
};

// Teacher-forced evaluation on freshly generated held-out instances. The
// instance stream is ratio-independent, so every swept ratio sees identical
// data. sst and baseline policies sweep `ratios`; full retention reports one
// row.
template <typename T>
std::vector<EvalRow> evaluate_with_params(const ModelParams<T>& params, const RunConfig& run,
                                          int64_t num_instances,
                                          std::span<const int64_t> ratios) {
    const VocabLayout vocab = VocabLayout::build(run.model.vocab_size, run.task);
    const uint64_t data_key = data_domain_key(run);

    std::vector<TaskInstance> instances(static_cast<size_t>(num_instances));
    for (int64_t i = 0; i < num_instances; ++i) {
        Rng rng = Rng(data_key).split(rng_phase::kEval).split(static_cast<uint64_t>(i));
        instances[static_cast<size_t>(i)] = generate(run.task, vocab, rng);
    }

    std::vector<int64_t> sweep(ratios.begin(), ratios.end());
    if (run.policy.kind == PolicyKind::Full) sweep = {1};

    std::vector<EvalRow> rows;
    const int64_t n_intervals =
        static_cast<int64_t>(partition(run.task.n, run.interval_len).size());
    for (int64_t ratio : sweep) {
        std::vector<TaskScore> scores(static_cast<size_t>(num_instances));
        parallel_for(num_instances, worker_count(), [&](int64_t i) {
            autodiff::NoGradGuard no_grad;
            const std::vector<int64_t> plan(static_cast<size_t>(n_intervals), ratio);
            auto result = forward_long(params, run, instances[static_cast<size_t>(i)], plan);
            scores[static_cast<size_t>(i)] = score(instances[static_cast<size_t>(i)],
                                                   argmax_tokens(result.logits));
        });
        EvalRow row;
        row.task = task_kind_name(run.task.kind);
        row.policy = run.policy.name();
        row.ratio = ratio;
        row.n = run.task.n;
        row.instances = num_instances;
        for (const auto& s : scores) {
            row.exact_match += s.exact_match ? 1.0 : 0.0;
            row.token_accuracy += s.token_accuracy;
        }
        row.exact_match /= static_cast<double>(num_instances);
        row.token_accuracy /= static_cast<double>(num_instances);
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Entry points implemented in harness.cpp
// ---------------------------------------------------------------------------

struct TrainResult {
    std::string checkpoint_path;
    std::string metrics_path;
    double final_loss = 0.0;
    double final_probe_em = 0.0;
    int64_t steps_run = 0;
};

TrainResult train(const RunConfig& run, const std::string& out_dir);

struct EvalOutput {
    std::vector<EvalRow> rows;
    std::vector<std::string> cache_stat_rows;  // CacheStats CSV per swept ratio
};

EvalOutput evaluate_checkpoint(const RunConfig& run, const std::string& checkpoint_path,
                               int64_t num_instances);

struct BenchRow {
    CostReport report;
    std::optional<double> wall_ms;       // measured, environment-dependent
    std::optional<int64_t> peak_rss_kb;  // measured, environment-dependent
};

std::vector<BenchRow> bench_sweep(const ModelConfig& cfg, std::span<const int64_t> lengths,
                                  std::span<const Policy> policies, int64_t ratio,
                                  int64_t interval_len, bool measure);
std::string bench_rows_to_csv(const std::vector<BenchRow>& rows, bool measure);

struct EquivReport {
    int trials = 0;
    double max_rel_f32 = 0.0;
    double max_rel_f64 = 0.0;
    double seconds = 0.0;
};

// Chunked-with-full-retention vs single-pass logits over random
// configurations; the cornerstone cache-correctness oracle.
EquivReport run_equiv_check(uint64_t seed, int trials, int64_t n_max);

struct GradCheckReport {
    double max_rel = 0.0;
    int64_t coords_checked = 0;
    std::vector<std::pair<std::string, double>> per_tensor;
};

// Central finite differences (64-bit, h=1e-4) against the tape on a small
// model with summary-token interleaving in the loop.
GradCheckReport run_grad_check(uint64_t seed, int64_t samples_per_tensor);

}  // namespace sstlm
