#include "sstlm/tasks.hpp"

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

namespace sstlm {

std::string task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::NeedleRecall: return "needle_recall";
        case TaskKind::MarkerCount: return "marker_count";
        case TaskKind::SegmentOrder: return "segment_order";
    }
    return "unknown";
}

TaskKind parse_task_kind(const std::string& name) {
    if (name == "needle_recall") return TaskKind::NeedleRecall;
    if (name == "marker_count") return TaskKind::MarkerCount;
    if (name == "segment_order") return TaskKind::SegmentOrder;
    throw ConfigError("unknown task kind '" + name + "'");
}

VocabLayout VocabLayout::build(int64_t vocab_size, const TaskConfig& cfg) {
    VocabLayout v;
    v.vocab_size = vocab_size;
    v.num_marker_ids = cfg.num_markers;
    v.content_base = v.marker_base + static_cast<int32_t>(cfg.num_markers);
    v.num_content_ids = vocab_size - v.content_base;
    if (cfg.num_markers < 1) throw ConfigError("task: num_markers must be >= 1");
    if (v.num_content_ids < 4)
        throw ConfigError("task: vocab overflow — vocab_size " + std::to_string(vocab_size) +
                          " leaves fewer than 4 content ids after control, digit and marker ids");
    return v;
}

std::vector<int32_t> VocabLayout::digits_of(int64_t value) const {
    if (value < 0) throw ValueError("digits_of: negative value");
    std::vector<int32_t> out;
    do {
        out.push_back(digit(value % 10));
        value /= 10;
    } while (value > 0);
    std::reverse(out.begin(), out.end());
    return out;
}

namespace {

// Distinct random positions so insertions can never overwrite each other.
std::vector<int64_t> distinct_positions(int64_t count, int64_t lo, int64_t hi, Rng& rng) {
    if (hi - lo + 1 < count) throw ConfigError("task: stream too short for requested insertions");
    std::set<int64_t> chosen;
    while (static_cast<int64_t>(chosen.size()) < count) chosen.insert(rng.uniform_int(lo, hi));
    return {chosen.begin(), chosen.end()};
}

std::vector<int64_t> sample_distinct_indices(int64_t count, int64_t pool, Rng& rng) {
    if (count > pool) throw ConfigError("task: marker pool too small");
    std::vector<int64_t> ids(static_cast<size_t>(pool));
    for (int64_t i = 0; i < pool; ++i) ids[static_cast<size_t>(i)] = i;
    // Partial Fisher-Yates.
    for (int64_t i = 0; i < count; ++i) {
        const int64_t j = rng.uniform_int(i, pool - 1);
        std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
    }
    ids.resize(static_cast<size_t>(count));
    return ids;
}

std::vector<int32_t> filler_stream(const TaskConfig& cfg, const VocabLayout& vocab, Rng& rng) {
    std::vector<int32_t> stream(static_cast<size_t>(cfg.n));
    for (auto& t : stream)
        t = vocab.content_base + static_cast<int32_t>(rng.uniform_int(0, vocab.num_content_ids - 1));
    return stream;
}

TaskInstance gen_needle(const TaskConfig& cfg, const VocabLayout& vocab, Rng& rng) {
    if (cfg.num_pairs < 1) throw ConfigError("needle_recall: num_pairs must be >= 1");
    if (cfg.value_len < 1) throw ConfigError("needle_recall: value_len must be >= 1");
    TaskInstance inst;
    inst.kind = TaskKind::NeedleRecall;
    inst.stream = filler_stream(cfg, vocab, rng);

    const int64_t pair_len = 1 + cfg.value_len;
    // Pair start slots on a stride grid, so pairs cannot interleave.
    const int64_t slots = cfg.n / pair_len;
    auto slot_idx = distinct_positions(cfg.num_pairs, 0, slots - 1, rng);
    auto key_idx = sample_distinct_indices(cfg.num_pairs, cfg.num_markers, rng);

    std::vector<std::vector<int32_t>> values(static_cast<size_t>(cfg.num_pairs));
    for (int64_t p = 0; p < cfg.num_pairs; ++p) {
        const int64_t at = slot_idx[static_cast<size_t>(p)] * pair_len;
        inst.stream[static_cast<size_t>(at)] = vocab.marker(key_idx[static_cast<size_t>(p)]);
        auto& value = values[static_cast<size_t>(p)];
        for (int64_t j = 0; j < cfg.value_len; ++j) {
            value.push_back(vocab.digit(rng.uniform_int(0, 9)));
            inst.stream[static_cast<size_t>(at + 1 + j)] = value.back();
        }
    }
    const int64_t query = rng.uniform_int(0, cfg.num_pairs - 1);
    inst.prompt = {VocabLayout::task_recall_id,
                   vocab.marker(key_idx[static_cast<size_t>(query)])};
    inst.target = values[static_cast<size_t>(query)];
    return inst;
}

TaskInstance gen_marker_count(const TaskConfig& cfg, const VocabLayout& vocab, Rng& rng) {
    TaskInstance inst;
    inst.kind = TaskKind::MarkerCount;
    inst.stream = filler_stream(cfg, vocab, rng);

    const int64_t count = rng.uniform_int(1, cfg.num_markers);
    auto marker_idx = sample_distinct_indices(count, cfg.num_markers, rng);
    int64_t insertions = 0;
    std::vector<int64_t> repeats(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        repeats[static_cast<size_t>(i)] = rng.uniform_int(1, cfg.max_marker_repeats);
        insertions += repeats[static_cast<size_t>(i)];
    }
    auto positions = distinct_positions(insertions, 0, cfg.n - 1, rng);
    // Shuffle so a marker's occurrences land anywhere, not in blocks.
    for (size_t i = positions.size(); i > 1; --i)
        std::swap(positions[i - 1], positions[rng.index(i)]);
    size_t at = 0;
    for (int64_t i = 0; i < count; ++i)
        for (int64_t r = 0; r < repeats[static_cast<size_t>(i)]; ++r)
            inst.stream[static_cast<size_t>(positions[at++])] =
                vocab.marker(marker_idx[static_cast<size_t>(i)]);

    inst.prompt = {VocabLayout::task_count_id};
    inst.target = vocab.digits_of(count);
    return inst;
}

TaskInstance gen_segment_order(const TaskConfig& cfg, const VocabLayout& vocab, Rng& rng) {
    if (cfg.num_segments < 1) throw ConfigError("segment_order: num_segments must be >= 1");
    TaskInstance inst;
    inst.kind = TaskKind::SegmentOrder;
    inst.stream = filler_stream(cfg, vocab, rng);

    auto tag_idx = sample_distinct_indices(cfg.num_segments, cfg.num_markers, rng);
    auto positions = distinct_positions(cfg.num_segments, 0, cfg.n - 1, rng);  // already sorted
    for (int64_t i = 0; i < cfg.num_segments; ++i) {
        const int32_t tag = vocab.marker(tag_idx[static_cast<size_t>(i)]);
        inst.stream[static_cast<size_t>(positions[static_cast<size_t>(i)])] = tag;
        inst.target.push_back(tag);
    }
    inst.prompt = {VocabLayout::task_order_id};
    return inst;
}

}  // namespace

TaskInstance generate(const TaskConfig& cfg, const VocabLayout& vocab, Rng& rng) {
    if (cfg.n < 1) throw ConfigError("task: stream length must be >= 1");
    switch (cfg.kind) {
        case TaskKind::NeedleRecall: return gen_needle(cfg, vocab, rng);
        case TaskKind::MarkerCount: return gen_marker_count(cfg, vocab, rng);
        case TaskKind::SegmentOrder: return gen_segment_order(cfg, vocab, rng);
    }
    throw ConfigError("task: unknown kind");
}

TaskScore score(const TaskInstance& instance, std::span<const int32_t> output) {
    TaskScore s;
    s.exact_match = output.size() == instance.target.size() &&
                    std::equal(output.begin(), output.end(), instance.target.begin());
    size_t lcp = 0;
    const size_t bound = std::min(output.size(), instance.target.size());
    while (lcp < bound && output[lcp] == instance.target[lcp]) ++lcp;
    s.token_accuracy =
        instance.target.empty() ? 1.0 : static_cast<double>(lcp) / instance.target.size();
    return s;
}

std::string instance_to_jsonl(const TaskConfig& cfg, uint64_t seed, const TaskInstance& instance) {
    nlohmann::json j;
    j["task_kind"] = task_kind_name(instance.kind);
    j["seed"] = seed;
    j["n"] = cfg.n;
    j["prompt"] = instance.prompt;
    j["stream"] = instance.stream;
    j["target"] = instance.target;
    return j.dump();
}

TaskInstance instance_from_jsonl(const std::string& line) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw IoError("malformed instance record");
    TaskInstance inst;
    inst.kind = parse_task_kind(j.at("task_kind").get<std::string>());
    inst.prompt = j.at("prompt").get<std::vector<int32_t>>();
    inst.stream = j.at("stream").get<std::vector<int32_t>>();
    inst.target = j.at("target").get<std::vector<int32_t>>();
    return inst;
}

}  // namespace sstlm
