#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sstlm/compress.hpp"
#include "sstlm/model.hpp"

namespace sstlm {

enum class PolicyKind { Full, Sst, Baseline };

struct Policy {
    PolicyKind kind = PolicyKind::Sst;
    BaselinePolicy baseline{};  // used when kind == Baseline

    std::string name() const;
    static Policy parse(const std::string& name);  // full|dense|sst|avg_pool|max_pool|similarity
};

// Analytic forward cost of one long-form pass: prompt block, interval blocks
// under the policy, then the teacher-forced decode block. Attention flops are
// 4 * d_model per (query, visible key) pair (scores plus weighted sum);
// linear flops are the standard 2mkn of the projection/MLP matmuls, with the
// LM head counted only over decode rows. No tensors are allocated.
struct CostReport {
    int64_t seq_len = 0;
    std::string policy;
    int64_t ratio = 1;
    uint64_t attn_pairs = 0;  // sum over layers and queries of visible context
    uint64_t attn_flops = 0;
    uint64_t linear_flops = 0;
    uint64_t total_flops = 0;
    int64_t peak_kv_entries = 0;
    int64_t tokens_processed = 0;

    static std::string csv_header() {
        return "length,policy,ratio,attn_flops,linear_flops,total_flops,peak_kv";
    }
    std::string csv_row() const;
};

CostReport cost_model(const ModelConfig& cfg, const Policy& policy, int64_t ratio, int64_t n,
                      int64_t interval_len, int64_t prompt_len = 0, int64_t target_len = 0);

}  // namespace sstlm
