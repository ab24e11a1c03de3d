#include "sstlm/compress.hpp"

#include <algorithm>
#include <cmath>

namespace sstlm {

std::vector<IntervalSpan> partition(int64_t n, int64_t w) {
    if (n == 0) throw ValueError("partition: empty sequence");
    if (n < 0) throw ValueError("partition: negative length");
    if (w < 1) throw ValueError("partition: interval length must be >= 1");
    std::vector<IntervalSpan> spans;
    spans.reserve(static_cast<size_t>((n + w - 1) / w));
    for (int64_t begin = 0; begin < n; begin += w)
        spans.push_back({begin, std::min(n, begin + w)});
    return spans;
}

SstLayout make_sst_layout(int32_t interval_index, int64_t interval_len, int64_t ratio) {
    if (interval_len < 1) throw ValueError("sst layout: empty interval");
    if (ratio < 1) throw ValueError("sst layout: ratio must be >= 1");
    SstLayout layout;
    layout.interval_index = interval_index;
    layout.interval_len = interval_len;
    layout.ratio = ratio;
    layout.sst_count = (interval_len + ratio - 1) / ratio;
    layout.slots.reserve(static_cast<size_t>(layout.sst_count));
    int64_t consumed = 0;
    int64_t out_pos = 0;
    while (consumed < interval_len) {
        const int64_t group = std::min(ratio, interval_len - consumed);
        consumed += group;
        out_pos += group;
        layout.slots.push_back(out_pos);
        ++out_pos;
    }
    return layout;
}

std::pair<std::vector<int32_t>, SstLayout> interleave_sst(int64_t interval_len, int64_t ratio,
                                                          int32_t sst_id,
                                                          std::span<const int32_t> content,
                                                          int32_t interval_index) {
    if (content.empty()) throw ValueError("interleave_sst: empty content");
    if (static_cast<int64_t>(content.size()) != interval_len)
        throw ValueError("interleave_sst: content length " + std::to_string(content.size()) +
                         " != interval length " + std::to_string(interval_len));
    SstLayout layout = make_sst_layout(interval_index, interval_len, ratio);

    std::vector<int32_t> tokens;
    tokens.reserve(static_cast<size_t>(layout.interleaved_len()));
    size_t slot = 0;
    for (int64_t i = 0; i < interval_len; ++i) {
        tokens.push_back(content[static_cast<size_t>(i)]);
        if (slot < layout.slots.size() &&
            static_cast<int64_t>(tokens.size()) == layout.slots[slot]) {
            tokens.push_back(sst_id);
            ++slot;
        }
    }
    if (slot != layout.slots.size() ||
        static_cast<int64_t>(tokens.size()) != layout.interleaved_len())
        throw Error("interleave_sst: layout/sequence mismatch");
    return {std::move(tokens), std::move(layout)};
}

void CurriculumSchedule::validate() const {
    if (mode == ScheduleMode::Fixed) {
        if (fixed_ratio < 1) throw ConfigError("schedule: fixed ratio must be >= 1");
        return;
    }
    if (stages.empty()) throw ConfigError("schedule: curriculum requires at least one stage");
    double prev = 0.0;
    for (const auto& stage : stages) {
        if (stage.pool.empty()) throw ConfigError("schedule: empty ratio pool");
        for (int64_t r : stage.pool)
            if (r < 1) throw ConfigError("schedule: ratios must be >= 1");
        if (stage.until_frac <= prev || stage.until_frac > 1.0)
            throw ConfigError("schedule: stage boundaries must be increasing fractions in (0, 1]");
        prev = stage.until_frac;
    }
    if (prev != 1.0) throw ConfigError("schedule: final stage must end at fraction 1.0");
}

int64_t CurriculumSchedule::max_ratio() const {
    if (mode == ScheduleMode::Fixed) return fixed_ratio;
    int64_t mx = 1;
    for (const auto& stage : stages)
        for (int64_t r : stage.pool) mx = std::max(mx, r);
    return mx;
}

std::string CurriculumSchedule::mode_string() const {
    if (mode == ScheduleMode::Fixed) return "fixed:" + std::to_string(fixed_ratio);
    return "curriculum";
}

void CurriculumSchedule::parse_mode(const std::string& text, CurriculumSchedule& out) {
    if (text == "curriculum") {
        out.mode = ScheduleMode::Curriculum;
        return;
    }
    for (const std::string prefix : {"fixed:", "no_random:"}) {
        if (text.rfind(prefix, 0) == 0) {
            out.mode = ScheduleMode::Fixed;
            try {
                out.fixed_ratio = std::stoll(text.substr(prefix.size()));
            } catch (const std::exception&) {
                throw ConfigError("schedule: cannot parse ratio in mode '" + text + "'");
            }
            if (out.fixed_ratio < 1) throw ConfigError("schedule: fixed ratio must be >= 1");
            return;
        }
    }
    throw ConfigError("schedule: unknown mode '" + text +
                      "' (expected curriculum | fixed:<a> | no_random:<a>)");
}

int64_t sample_ratio(const CurriculumSchedule& schedule, int64_t step, int64_t total_steps,
                     Rng& rng) {
    if (schedule.mode == ScheduleMode::Fixed) return schedule.fixed_ratio;
    if (total_steps < 1) throw ValueError("sample_ratio: total_steps must be >= 1");
    if (step < 0 || step >= total_steps)
        throw ValueError("sample_ratio: step " + std::to_string(step) +
                         " outside [0," + std::to_string(total_steps) + ")");
    for (const auto& stage : schedule.stages) {
        const int64_t stage_end = static_cast<int64_t>(stage.until_frac * static_cast<double>(total_steps));
        if (step < stage_end || &stage == &schedule.stages.back())
            return stage.pool[rng.index(stage.pool.size())];
    }
    return schedule.stages.back().pool[rng.index(schedule.stages.back().pool.size())];
}

std::string baseline_kind_name(BaselineKind kind) {
    switch (kind) {
        case BaselineKind::AvgPool: return "avg_pool";
        case BaselineKind::MaxPool: return "max_pool";
        case BaselineKind::SimilarityMerge: return "similarity";
    }
    return "unknown";
}

BaselineKind parse_baseline_kind(const std::string& name) {
    if (name == "avg_pool") return BaselineKind::AvgPool;
    if (name == "max_pool") return BaselineKind::MaxPool;
    if (name == "similarity" || name == "similarity_merge") return BaselineKind::SimilarityMerge;
    throw ConfigError("unknown baseline kind '" + name + "'");
}

namespace {

double cosine(const double* a, const double* b, int64_t d) {
    double dot = 0, na = 0, nb = 0;
    for (int64_t j = 0; j < d; ++j) {
        dot += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
    }
    return dot / (std::sqrt(na * nb) + 1e-12);
}

}  // namespace

std::vector<int64_t> similarity_merge_plan(std::span<const double> rows, int64_t n, int64_t d,
                                           int64_t target) {
    if (target < 1 || target > n) throw ValueError("similarity_merge_plan: bad target count");
    struct Segment {
        std::vector<double> mean;
        int64_t count;
        int64_t len;
    };
    std::vector<Segment> segs(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        segs[static_cast<size_t>(i)].mean.assign(rows.begin() + i * d, rows.begin() + (i + 1) * d);
        segs[static_cast<size_t>(i)].count = 1;
        segs[static_cast<size_t>(i)].len = 1;
    }
    while (static_cast<int64_t>(segs.size()) > target) {
        size_t best = 0;
        double best_score = -2.0;
        for (size_t i = 0; i + 1 < segs.size(); ++i) {
            const double score = cosine(segs[i].mean.data(), segs[i + 1].mean.data(), d);
            if (score > best_score) {
                best_score = score;
                best = i;
            }
        }
        Segment& a = segs[best];
        Segment& b = segs[best + 1];
        const double wa = static_cast<double>(a.count), wb = static_cast<double>(b.count);
        for (int64_t j = 0; j < d; ++j)
            a.mean[static_cast<size_t>(j)] =
                (a.mean[static_cast<size_t>(j)] * wa + b.mean[static_cast<size_t>(j)] * wb) /
                (wa + wb);
        a.count += b.count;
        a.len += b.len;
        segs.erase(segs.begin() + static_cast<int64_t>(best) + 1);
    }
    std::vector<int64_t> lens;
    lens.reserve(segs.size());
    for (const auto& s : segs) lens.push_back(s.len);
    return lens;
}

}  // namespace sstlm
