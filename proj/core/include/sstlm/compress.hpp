#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sstlm/errors.hpp"
#include "sstlm/rng.hpp"
#include "sstlm/tensor.hpp"

namespace sstlm {

struct IntervalSpan {
    int64_t begin = 0;
    int64_t end = 0;
    int64_t len() const { return end - begin; }
};

// Split [0, n) into contiguous intervals of length w; the final interval may
// be shorter.
std::vector<IntervalSpan> partition(int64_t n, int64_t w);

// Interleaving plan for one interval: after every complete group of `ratio`
// content tokens one summary-token slot is placed, and a trailing partial
// group (if any) gets one as well. sst_count == ceil(interval_len / ratio).
struct SstLayout {
    int32_t interval_index = 0;
    int64_t interval_len = 0;
    int64_t ratio = 1;
    int64_t sst_count = 0;
    std::vector<int64_t> slots;  // positions of summary tokens in the interleaved interval

    int64_t interleaved_len() const { return interval_len + sst_count; }
};

SstLayout make_sst_layout(int32_t interval_index, int64_t interval_len, int64_t ratio);

// Inserts the summary token after each ratio-group of `content`. Returns the
// interleaved token sequence together with its layout.
std::pair<std::vector<int32_t>, SstLayout> interleave_sst(int64_t interval_len, int64_t ratio,
                                                          int32_t sst_id,
                                                          std::span<const int32_t> content,
                                                          int32_t interval_index = 0);

enum class ScheduleMode {
    Curriculum,  // staged candidate pools widening over training
    Fixed,       // single ratio for every step (the "no random ratio" ablation)
};

struct CurriculumStage {
    double until_frac = 1.0;  // stage active while step < until_frac * total_steps
    std::vector<int64_t> pool;
};

struct CurriculumSchedule {
    ScheduleMode mode = ScheduleMode::Curriculum;
    int64_t fixed_ratio = 8;
    std::vector<CurriculumStage> stages;

    static CurriculumSchedule defaults() {
        CurriculumSchedule s;
        s.stages = {{0.5, {2, 4}}, {1.0, {2, 4, 8}}};
        return s;
    }

    void validate() const;
    int64_t max_ratio() const;

    // "curriculum" | "fixed:<a>" (alias "no_random:<a>")
    std::string mode_string() const;
    static void parse_mode(const std::string& text, CurriculumSchedule& out);
};

// Draws the compression ratio for one training sequence at `step`. Curriculum
// mode picks uniformly from the active stage's pool; fixed mode returns the
// configured ratio without consuming randomness.
int64_t sample_ratio(const CurriculumSchedule& schedule, int64_t step, int64_t total_steps,
                     Rng& rng);

enum class BaselineKind { AvgPool, MaxPool, SimilarityMerge };

struct BaselinePolicy {
    BaselineKind kind = BaselineKind::AvgPool;
    int64_t ratio = 4;
};

std::string baseline_kind_name(BaselineKind kind);
BaselineKind parse_baseline_kind(const std::string& name);

// Greedy merge plan over rows: repeatedly merge the most cosine-similar
// adjacent pair of segments (ties to the lowest index), size-weighted means,
// until `target` segments remain. Returns contiguous segment lengths.
std::vector<int64_t> similarity_merge_plan(std::span<const double> rows, int64_t n, int64_t d,
                                           int64_t target);

// Compress [w x d] embeddings to [ceil(w/ratio) x d]. Pooling variants act on
// consecutive ratio-groups; similarity merging follows the plan above. All
// variants stay on the gradient tape.
template <typename T>
Tensor<T> baseline_compress(const BaselinePolicy& policy, const Tensor<T>& embeds) {
    if (embeds.rank() != 2) throw ShapeError("baseline_compress expects rank-2 embeddings");
    if (policy.ratio < 1) throw ValueError("baseline_compress: ratio must be >= 1");
    const int64_t w = embeds.dim(0), d = embeds.dim(1);
    if (w < 1) throw ValueError("baseline_compress: empty input");
    switch (policy.kind) {
        case BaselineKind::AvgPool:
            return pool_avg_rows(embeds, policy.ratio);
        case BaselineKind::MaxPool:
            return pool_max_rows(embeds, policy.ratio);
        case BaselineKind::SimilarityMerge: {
            const int64_t target = (w + policy.ratio - 1) / policy.ratio;
            std::vector<double> rows(embeds.values().begin(), embeds.values().end());
            auto seg_lens = similarity_merge_plan(rows, w, d, target);
            return segment_mean_rows(embeds, std::move(seg_lens));
        }
    }
    throw ValueError("baseline_compress: unknown kind");
}

}  // namespace sstlm
