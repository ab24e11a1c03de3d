#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sstlm/errors.hpp"
#include "sstlm/tensor.hpp"

namespace sstlm {

enum class KvRole {
    Prompt,   // non-compressible text (instruction and teacher-forced answer prefix)
    Content,  // stream tokens, evicted once their interval's summaries are encoded
    Sst,      // retained summary entries
};

inline const char* kv_role_name(KvRole role) {
    switch (role) {
        case KvRole::Prompt: return "prompt";
        case KvRole::Content: return "content";
        case KvRole::Sst: return "sst";
    }
    return "?";
}

struct KvEntryMeta {
    KvRole role = KvRole::Content;
    int64_t position = 0;
    std::optional<int32_t> interval;
};

struct CacheStats {
    int64_t appended = 0;
    int64_t retained = 0;
    int64_t evicted = 0;
    int64_t peak = 0;
    int64_t bytes_estimate = 0;  // peak * layers * 2 * d_model * dtype width

    static std::string csv_header() {
        return "seq_len,interval_len,ratio,retained,evicted,peak,bytes_estimate";
    }
    std::string csv_row(int64_t seq_len, int64_t interval_len, int64_t ratio) const {
        return std::to_string(seq_len) + "," + std::to_string(interval_len) + "," +
               std::to_string(ratio) + "," + std::to_string(retained) + "," +
               std::to_string(evicted) + "," + std::to_string(peak) + "," +
               std::to_string(bytes_estimate);
    }
};

// Metadata of an entry removed from attention-visible storage, with per-layer
// K/V norms for inspection. Evicted entries are never re-admitted.
struct SpillRecord {
    KvEntryMeta meta;
    std::vector<double> k_norm;
    std::vector<double> v_norm;
};

// Per-layer K/V entries appended by encoded blocks. K rows are stored exactly
// as produced (post-rotation); retention rebuilds each layer's tensors via a
// row gather, which keeps retained rows bit-identical and on the tape.
template <typename T>
class KvCache {
public:
    KvCache(int64_t n_layers, int64_t d_model)
        : n_layers_(n_layers), d_model_(d_model), layers_(static_cast<size_t>(n_layers)) {
        if (n_layers < 1 || d_model < 1) throw ValueError("kv cache: bad dimensions");
    }

    int64_t n_layers() const { return n_layers_; }
    int64_t d_model() const { return d_model_; }
    int64_t size() const { return static_cast<int64_t>(meta_.size()); }
    bool empty() const { return meta_.empty(); }

    int64_t max_position() const { return meta_.empty() ? -1 : meta_.back().position; }

    const std::vector<KvEntryMeta>& entries() const { return meta_; }

    const Tensor<T>& layer_keys(int64_t layer) const { return layers_.at(layer).k; }
    const Tensor<T>& layer_values(int64_t layer) const { return layers_.at(layer).v; }

    void set_spill_sink(std::function<void(const SpillRecord&)> sink) {
        spill_sink_ = std::move(sink);
    }

    // Appends one encoded block. K/V per layer are [m x d_model]; metadata is
    // shared across layers. Positions must be strictly increasing and beyond
    // everything already stored.
    void append(const std::vector<Tensor<T>>& keys, const std::vector<Tensor<T>>& values,
                const std::vector<KvEntryMeta>& meta) {
        if (meta.empty()) return;  // empty append is a no-op
        if (static_cast<int64_t>(keys.size()) != n_layers_ ||
            static_cast<int64_t>(values.size()) != n_layers_)
            throw ShapeError("kv append: layer count mismatch");
        const int64_t m = static_cast<int64_t>(meta.size());
        for (int64_t l = 0; l < n_layers_; ++l) {
            if (keys[l].dim(0) != m || values[l].dim(0) != m || keys[l].dim(1) != d_model_ ||
                values[l].dim(1) != d_model_)
                throw ShapeError("kv append: entry count/d_model mismatch at layer " +
                                 std::to_string(l));
        }
        int64_t prev = max_position();
        for (const auto& e : meta) {
            if (e.position <= prev)
                throw OrderError("kv append: position " + std::to_string(e.position) +
                                 " not beyond " + std::to_string(prev));
            prev = e.position;
        }

        for (int64_t l = 0; l < n_layers_; ++l) {
            auto& layer = layers_[static_cast<size_t>(l)];
            if (!layer.k.defined()) {
                layer.k = keys[static_cast<size_t>(l)];
                layer.v = values[static_cast<size_t>(l)];
            } else {
                layer.k = concat<T>({layer.k, keys[static_cast<size_t>(l)]}, 0);
                layer.v = concat<T>({layer.v, values[static_cast<size_t>(l)]}, 0);
            }
        }
        for (const auto& e : meta) {
            meta_.push_back(e);
            if (e.interval) intervals_seen_.insert(*e.interval);
        }
        stats_.appended += m;
        stats_.retained += m;
        stats_.peak = std::max(stats_.peak, stats_.retained);
    }

    // Applies the retention policy after interval `interval_index` is fully
    // encoded: every content-role entry of that interval (and of any earlier
    // interval) leaves attention-visible storage; summary and prompt entries
    // are untouched. Returns the number of entries evicted.
    int64_t retain_ssts(int32_t interval_index) {
        if (!intervals_seen_.count(interval_index))
            throw OrderError("retain_ssts: interval " + std::to_string(interval_index) +
                             " has not been encoded");
        if (intervals_retained_.count(interval_index))
            throw OrderError("retain_ssts: interval " + std::to_string(interval_index) +
                             " already retained");

        std::vector<int64_t> keep;
        keep.reserve(meta_.size());
        std::vector<size_t> drop;
        for (size_t i = 0; i < meta_.size(); ++i) {
            const auto& e = meta_[i];
            const bool evict =
                e.role == KvRole::Content && e.interval && *e.interval <= interval_index;
            if (evict)
                drop.push_back(i);
            else
                keep.push_back(static_cast<int64_t>(i));
        }
        if (spill_sink_) {
            for (size_t i : drop) spill(i);
        }
        if (!drop.empty()) {
            for (int64_t l = 0; l < n_layers_; ++l) {
                auto& layer = layers_[static_cast<size_t>(l)];
                layer.k = gather_rows(layer.k, keep);
                layer.v = gather_rows(layer.v, keep);
            }
            std::vector<KvEntryMeta> kept;
            kept.reserve(keep.size());
            for (int64_t i : keep) kept.push_back(meta_[static_cast<size_t>(i)]);
            meta_ = std::move(kept);
        }
        intervals_retained_.insert(interval_index);
        stats_.evicted += static_cast<int64_t>(drop.size());
        stats_.retained -= static_cast<int64_t>(drop.size());
        return static_cast<int64_t>(drop.size());
    }

    CacheStats stats() const {
        CacheStats s = stats_;
        s.bytes_estimate = s.peak * n_layers_ * 2 * d_model_ * static_cast<int64_t>(sizeof(T));
        return s;
    }

    int64_t count_role(KvRole role) const {
        int64_t n = 0;
        for (const auto& e : meta_)
            if (e.role == role) ++n;
        return n;
    }

private:
    void spill(size_t index) {
        SpillRecord rec;
        rec.meta = meta_[index];
        rec.k_norm.reserve(static_cast<size_t>(n_layers_));
        rec.v_norm.reserve(static_cast<size_t>(n_layers_));
        for (int64_t l = 0; l < n_layers_; ++l) {
            const auto& layer = layers_[static_cast<size_t>(l)];
            double kn = 0, vn = 0;
            for (int64_t j = 0; j < d_model_; ++j) {
                const double kv = static_cast<double>(layer.k.values()[index * d_model_ + j]);
                const double vv = static_cast<double>(layer.v.values()[index * d_model_ + j]);
                kn += kv * kv;
                vn += vv * vv;
            }
            rec.k_norm.push_back(std::sqrt(kn));
            rec.v_norm.push_back(std::sqrt(vn));
        }
        spill_sink_(rec);
    }

    struct Layer {
        Tensor<T> k, v;
    };

    int64_t n_layers_;
    int64_t d_model_;
    std::vector<Layer> layers_;
    std::vector<KvEntryMeta> meta_;
    CacheStats stats_;
    std::set<int32_t> intervals_seen_;
    std::set<int32_t> intervals_retained_;
    std::function<void(const SpillRecord&)> spill_sink_;
};

}  // namespace sstlm
