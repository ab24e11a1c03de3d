#include "sstlm/cost_model.hpp"

namespace sstlm {

std::string Policy::name() const {
    switch (kind) {
        case PolicyKind::Full: return "full";
        case PolicyKind::Sst: return "sst";
        case PolicyKind::Baseline: return baseline_kind_name(baseline.kind);
    }
    return "unknown";
}

Policy Policy::parse(const std::string& name) {
    Policy p;
    if (name == "full" || name == "dense") {
        p.kind = PolicyKind::Full;
    } else if (name == "sst") {
        p.kind = PolicyKind::Sst;
    } else {
        p.kind = PolicyKind::Baseline;
        p.baseline.kind = parse_baseline_kind(name);
    }
    return p;
}

std::string CostReport::csv_row() const {
    return std::to_string(seq_len) + "," + policy + "," + std::to_string(ratio) + "," +
           std::to_string(attn_flops) + "," + std::to_string(linear_flops) + "," +
           std::to_string(total_flops) + "," + std::to_string(peak_kv_entries);
}

CostReport cost_model(const ModelConfig& cfg, const Policy& policy, int64_t ratio, int64_t n,
                      int64_t interval_len, int64_t prompt_len, int64_t target_len) {
    if (n < 1 || interval_len < 1 || ratio < 1 || prompt_len < 0 || target_len < 0)
        throw ValueError("cost_model: parameters must be positive");

    CostReport report;
    report.seq_len = n;
    report.policy = policy.name();
    report.ratio = policy.kind == PolicyKind::Full ? 1 : ratio;

    const uint64_t d = static_cast<uint64_t>(cfg.d_model);
    const uint64_t layers = static_cast<uint64_t>(cfg.n_layers);

    uint64_t pairs = 0;    // per-layer accumulated below, multiplied at the end
    int64_t visible = 0;   // current cache entries
    int64_t peak = 0;
    int64_t tokens = 0;

    auto encode_block = [&](int64_t m, bool evict_after_to, int64_t kept_after) {
        // m queries against `visible` cache entries plus the intra-block
        // causal triangle.
        pairs += static_cast<uint64_t>(m) * static_cast<uint64_t>(visible) +
                 static_cast<uint64_t>(m) * static_cast<uint64_t>(m + 1) / 2;
        tokens += m;
        visible += m;
        peak = std::max(peak, visible);
        if (evict_after_to) visible = kept_after;
    };

    if (prompt_len > 0) encode_block(prompt_len, false, 0);

    for (const auto& span : partition(n, interval_len)) {
        const int64_t w = span.len();
        switch (policy.kind) {
            case PolicyKind::Full:
                encode_block(w, false, 0);
                break;
            case PolicyKind::Sst: {
                const int64_t k = (w + ratio - 1) / ratio;
                encode_block(w + k, true, visible + k);
                break;
            }
            case PolicyKind::Baseline: {
                const int64_t rows = (w + ratio - 1) / ratio;
                encode_block(rows, false, 0);
                break;
            }
        }
    }

    int64_t decode_rows = 0;
    if (target_len > 0) {
        // Decode block [answer-start, t_1 .. t_{L-1}]: queries attend to the
        // retained cache plus their own prefix, but their K/V entries are
        // never appended (nothing attends after them), so the peak is
        // unaffected.
        decode_rows = target_len;
        pairs += static_cast<uint64_t>(decode_rows) * static_cast<uint64_t>(visible) +
                 static_cast<uint64_t>(decode_rows) * static_cast<uint64_t>(decode_rows + 1) / 2;
        tokens += decode_rows;
    }

    report.attn_pairs = pairs * layers;
    report.attn_flops = report.attn_pairs * 4 * d;
    const uint64_t per_token_linear = layers * (8 * d * d + 4 * d * static_cast<uint64_t>(cfg.d_ff));
    report.linear_flops = static_cast<uint64_t>(tokens) * per_token_linear +
                          static_cast<uint64_t>(decode_rows) * 2 * d *
                              static_cast<uint64_t>(cfg.vocab_size);
    report.total_flops = report.attn_flops + report.linear_flops;
    report.peak_kv_entries = peak;
    report.tokens_processed = tokens;
    return report;
}

}  // namespace sstlm
