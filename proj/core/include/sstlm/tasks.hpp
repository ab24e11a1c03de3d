#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sstlm/errors.hpp"
#include "sstlm/rng.hpp"

namespace sstlm {

enum class TaskKind { NeedleRecall, MarkerCount, SegmentOrder };

std::string task_kind_name(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct TaskConfig {
    TaskKind kind = TaskKind::NeedleRecall;
    int64_t n = 2048;             // stream length (the compressible span)
    int64_t num_markers = 8;      // marker id pool; marker_count answers lie in [1, num_markers]
    int64_t num_pairs = 3;        // (key, value) pairs hidden in the stream
    int64_t num_segments = 3;     // ordered tags for segment_order
    int64_t value_len = 1;        // digits per needle value
    int64_t max_marker_repeats = 3;
    uint64_t seed = 0;            // data-domain seed, mixed with the run seed
};

// Fixed id layout inside the model vocabulary. Control ids and digits come
// first, then the marker pool, then content filler. Marker ids are disjoint
// from content ids and from the summary-token id by construction.
struct VocabLayout {
    static constexpr int32_t pad_id = 0;
    static constexpr int32_t sst_id = 1;
    static constexpr int32_t answer_id = 2;  // decode-start control token
    static constexpr int32_t task_recall_id = 3;
    static constexpr int32_t task_count_id = 4;
    static constexpr int32_t task_order_id = 5;
    static constexpr int32_t digit0_id = 6;  // ten consecutive digit ids

    int64_t vocab_size = 0;
    int32_t marker_base = 16;
    int64_t num_marker_ids = 0;
    int32_t content_base = 0;
    int64_t num_content_ids = 0;

    static VocabLayout build(int64_t vocab_size, const TaskConfig& cfg);

    int32_t digit(int64_t d) const { return digit0_id + static_cast<int32_t>(d); }
    int32_t marker(int64_t i) const { return marker_base + static_cast<int32_t>(i); }
    bool is_marker(int32_t id) const {
        return id >= marker_base && id < marker_base + num_marker_ids;
    }
    bool is_content(int32_t id) const {
        return id >= content_base && id < content_base + num_content_ids;
    }
    bool is_digit(int32_t id) const { return id >= digit0_id && id < digit0_id + 10; }

    // Little-endian-free decimal digits, most significant first.
    std::vector<int32_t> digits_of(int64_t value) const;
};

struct TaskInstance {
    TaskKind kind = TaskKind::NeedleRecall;
    std::vector<int32_t> prompt;
    std::vector<int32_t> stream;
    std::vector<int32_t> target;
};

// Deterministic given (cfg, rng state); ground truth is exact by
// construction.
TaskInstance generate(const TaskConfig& cfg, const VocabLayout& vocab, Rng& rng);

struct TaskScore {
    bool exact_match = false;
    double token_accuracy = 0.0;  // matching-prefix fraction of the target
};

TaskScore score(const TaskInstance& instance, std::span<const int32_t> output);

// One line-delimited JSON record per instance.
std::string instance_to_jsonl(const TaskConfig& cfg, uint64_t seed, const TaskInstance& instance);
TaskInstance instance_from_jsonl(const std::string& line);

}  // namespace sstlm
