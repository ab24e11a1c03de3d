#include <doctest.h>

#include "oracles.hpp"
#include "sstlm/cost_model.hpp"

using namespace sstlm;

namespace {

ModelConfig desk_config() {
    return ModelConfig{};  // vocab 64, d 64, heads 4, layers 2, d_ff 256
}

uint64_t oracle_pairs(const ModelConfig& cfg, const Policy& policy, int64_t ratio, int64_t n,
                      int64_t w, int64_t prompt, int64_t target) {
    oracles::CountingAttention attn;
    if (prompt > 0) attn.block(prompt);
    for (const auto& span : partition(n, w)) {
        switch (policy.kind) {
            case PolicyKind::Full:
                attn.block(span.len());
                break;
            case PolicyKind::Sst: {
                const int64_t k = (span.len() + ratio - 1) / ratio;
                const int64_t before = attn.visible;
                attn.block(span.len() + k);
                attn.evict_to(before + k);
                break;
            }
            case PolicyKind::Baseline:
                attn.block((span.len() + ratio - 1) / ratio);
                break;
        }
    }
    if (target > 0) attn.block(target);
    return attn.pairs * static_cast<uint64_t>(cfg.n_layers);
}

}  // namespace

TEST_CASE("cost model: one summary per interval in the extreme-ratio limit") {
    // ratio >= w leaves a single summary entry per interval: after N
    // intervals the cross-interval context is exactly N entries.
    ModelConfig cfg = desk_config();
    Policy sst{PolicyKind::Sst, {}};
    const int64_t w = 512, n = 8 * w;
    auto report = cost_model(cfg, sst, /*ratio=*/w, n, w);
    // Peak: the last interval carries w + 1 new entries over 7 retained ones.
    CHECK(report.peak_kv_entries == 7 + w + 1);
}

TEST_CASE("cost model: strict win over dense at n = 16w, ratio 8") {
    ModelConfig cfg = desk_config();
    const int64_t w = 512, n = 16 * w;
    auto dense = cost_model(cfg, Policy{PolicyKind::Full, {}}, 1, n, w);
    auto sst = cost_model(cfg, Policy{PolicyKind::Sst, {}}, 8, n, w);
    CHECK(sst.attn_flops < dense.attn_flops);
    CHECK(sst.total_flops < dense.total_flops);
    CHECK(sst.attn_pairs == oracle_pairs(cfg, Policy{PolicyKind::Sst, {}}, 8, n, w, 0, 0));
    CHECK(dense.attn_pairs == oracle_pairs(cfg, Policy{PolicyKind::Full, {}}, 1, n, w, 0, 0));
}

TEST_CASE("cost model: peak entries for n=5120, w=512, ratio 8, no prompt") {
    ModelConfig cfg = desk_config();
    auto report = cost_model(cfg, Policy{PolicyKind::Sst, {}}, 8, 5120, 512);
    CHECK(report.peak_kv_entries == 512 + 64 + 9 * 64);  // 1152
    const auto counts = oracles::simulate_sst_cache(0, std::vector<int64_t>(10, 512), 8);
    CHECK(counts.retained == 640);
    CHECK(counts.peak == report.peak_kv_entries);
}

TEST_CASE("cost model: attention pair counts match the counting oracle on a grid") {
    ModelConfig cfg = desk_config();
    cfg.n_layers = 3;
    for (int64_t n : {64, 300, 1024, 2048})
        for (int64_t w : {64, 512})
            for (int64_t ratio : {2, 8})
                for (int64_t prompt : {0, 5})
                    for (int64_t target : {0, 3})
                        for (auto kind : {PolicyKind::Full, PolicyKind::Sst, PolicyKind::Baseline}) {
                            Policy policy{kind, {BaselineKind::AvgPool, ratio}};
                            auto report = cost_model(cfg, policy, ratio, n, w, prompt, target);
                            CHECK(report.attn_pairs ==
                                  oracle_pairs(cfg, policy, ratio, n, w, prompt, target));
                            CHECK(report.attn_flops ==
                                  report.attn_pairs * 4 * static_cast<uint64_t>(cfg.d_model));
                            CHECK(report.total_flops ==
                                  report.attn_flops + report.linear_flops);
                        }
}

TEST_CASE("cost model: dense grows superquadratically, sst/dense ratio decreases") {
    ModelConfig cfg = desk_config();
    const int64_t w = 512;
    double prev_dense = 0, prev_ratio = 2.0, prev_growth = 0;
    for (int64_t n : {1024, 2048, 4096, 8192, 16384}) {
        auto dense = cost_model(cfg, Policy{PolicyKind::Full, {}}, 1, n, w);
        auto sst = cost_model(cfg, Policy{PolicyKind::Sst, {}}, 8, n, w);
        const double ratio = static_cast<double>(sst.total_flops) /
                             static_cast<double>(dense.total_flops);
        CHECK(ratio < 1.0);
        CHECK(ratio < prev_ratio);
        if (prev_dense > 0) {
            const double growth = static_cast<double>(dense.total_flops) / prev_dense;
            CHECK(growth > 2.0);  // superlinear in the doubling sense
            if (prev_growth > 0) CHECK(growth >= prev_growth);
            prev_growth = growth;
        }
        prev_dense = static_cast<double>(dense.total_flops);
        prev_ratio = ratio;
    }
}

TEST_CASE("csv schema is fixed") {
    CHECK(CostReport::csv_header() ==
          "length,policy,ratio,attn_flops,linear_flops,total_flops,peak_kv");
    auto report = cost_model(desk_config(), Policy{PolicyKind::Sst, {}}, 8, 1024, 512);
    const std::string row = report.csv_row();
    CHECK(row.substr(0, 10) == "1024,sst,8");
}

TEST_CASE("policy parsing: dense aliases full; baseline names round-trip") {
    CHECK(Policy::parse("dense").kind == PolicyKind::Full);
    CHECK(Policy::parse("full").kind == PolicyKind::Full);
    CHECK(Policy::parse("sst").kind == PolicyKind::Sst);
    auto avg = Policy::parse("avg_pool");
    CHECK(avg.kind == PolicyKind::Baseline);
    CHECK(avg.name() == "avg_pool");
    CHECK_THROWS_AS(Policy::parse("h2o"), ConfigError);
}
