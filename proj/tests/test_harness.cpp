#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "sstlm/checkpoint.hpp"
#include "sstlm/harness.hpp"

using namespace sstlm;

namespace {

RunConfig small_run(TaskKind kind = TaskKind::NeedleRecall) {
    RunConfig run;
    run.model.vocab_size = 64;
    run.model.d_model = 32;
    run.model.n_heads = 4;
    run.model.n_layers = 2;
    run.model.d_ff = 64;
    run.model.max_position = 2048;
    run.interval_len = 32;
    run.task.kind = kind;
    run.task.n = 128;
    run.task.num_pairs = 1;
    run.steps = 4;
    run.batch_size = 2;
    run.eval_every = 2;
    run.probe_instances = 4;
    return run;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string temp_dir(const std::string& tag) {
    auto path = std::filesystem::temp_directory_path() / ("sstlm_test_" + tag);
    std::filesystem::remove_all(path);
    return path.string();
}

}  // namespace

TEST_CASE("forward_long: full policy equals one uninterrupted causal pass") {
    RunConfig run = small_run();
    run.policy.kind = PolicyKind::Full;
    const VocabLayout vocab = VocabLayout::build(run.model.vocab_size, run.task);
    Rng rng(3);
    auto params = ModelParams<float>::init(run.model, rng);
    Rng data_rng(5);
    const TaskInstance inst = generate(run.task, vocab, data_rng);

    autodiff::NoGradGuard no_grad;
    auto result = forward_long<float>(params, run, inst, {});

    // Single pass over prompt + stream + decode prefix as one block.
    std::vector<int32_t> all;
    all.insert(all.end(), inst.prompt.begin(), inst.prompt.end());
    all.insert(all.end(), inst.stream.begin(), inst.stream.end());
    all.push_back(VocabLayout::answer_id);
    all.insert(all.end(), inst.target.begin(), inst.target.end() - 1);
    std::vector<int64_t> positions(all.size());
    for (size_t i = 0; i < all.size(); ++i) positions[i] = static_cast<int64_t>(i);
    KvCache<float> cache(run.model.n_layers, run.model.d_model);
    auto single = encode_block<float>(params, all, positions, cache, true);

    const int64_t v = run.model.vocab_size;
    const int64_t L = static_cast<int64_t>(inst.target.size());
    const int64_t offset = (single.logits.dim(0) - L) * v;
    double max_abs = 1e-30, max_diff = 0;
    for (int64_t i = 0; i < L * v; ++i) {
        const double a = result.logits.values()[i];
        const double b = single.logits.values()[offset + i];
        max_abs = std::max(max_abs, std::abs(b));
        max_diff = std::max(max_diff, std::abs(a - b));
    }
    CHECK(max_diff / max_abs < 1e-4);
}

TEST_CASE("forward_long: summary entries visible during decode") {
    RunConfig run = small_run();
    run.interval_len = 512;
    run.task.n = 1024;
    run.model.max_position = 4096;
    const VocabLayout vocab = VocabLayout::build(run.model.vocab_size, run.task);
    Rng rng(7);
    auto params = ModelParams<float>::init(run.model, rng);
    Rng data_rng(9);
    const TaskInstance inst = generate(run.task, vocab, data_rng);

    autodiff::NoGradGuard no_grad;
    const std::vector<int64_t> ratios = {8, 8};
    auto result = forward_long(params, run, inst, ratios);
    // 1024/8 = 128 summary entries plus the prompt.
    CHECK(result.visible_at_decode == 128 + static_cast<int64_t>(inst.prompt.size()));
    CHECK(result.cache_stats.retained ==
          128 + static_cast<int64_t>(inst.prompt.size()));
    CHECK(result.cache_stats.evicted == 1024);
}

TEST_CASE("forward_long: ratio 16 extrapolation runs without error") {
    RunConfig run = small_run();
    const VocabLayout vocab = VocabLayout::build(run.model.vocab_size, run.task);
    Rng rng(11);
    auto params = ModelParams<float>::init(run.model, rng);
    Rng data_rng(13);
    const TaskInstance inst = generate(run.task, vocab, data_rng);
    autodiff::NoGradGuard no_grad;
    const std::vector<int64_t> ratios(4, 16);
    auto result = forward_long(params, run, inst, ratios);
    CHECK(result.logits.dim(0) == static_cast<int64_t>(inst.target.size()));
}

TEST_CASE("instrumented attention-score count equals the analytic model exactly") {
    Rng meta_rng(17);
    for (int trial = 0; trial < 12; ++trial) {
        RunConfig run = small_run(static_cast<TaskKind>(meta_rng.uniform_int(0, 2)));
        run.interval_len = meta_rng.uniform() < 0.5 ? 32 : 64;
        run.task.n = meta_rng.uniform_int(2, 8) * run.interval_len - meta_rng.uniform_int(0, 7);
        const int64_t ratio = std::vector<int64_t>{2, 4, 8, 16}[meta_rng.index(4)];
        const int kind = static_cast<int>(meta_rng.uniform_int(0, 2));
        run.policy.kind = kind == 0 ? PolicyKind::Full : kind == 1 ? PolicyKind::Sst
                                                                   : PolicyKind::Baseline;
        run.policy.baseline.kind = static_cast<BaselineKind>(meta_rng.uniform_int(0, 2));

        const VocabLayout vocab = VocabLayout::build(run.model.vocab_size, run.task);
        Rng rng(meta_rng.next_u64());
        auto params = ModelParams<float>::init(run.model, rng);
        const TaskInstance inst = generate(run.task, vocab, rng);

        autodiff::NoGradGuard no_grad;
        const int64_t n_intervals =
            static_cast<int64_t>(partition(run.task.n, run.interval_len).size());
        const std::vector<int64_t> ratios(static_cast<size_t>(n_intervals), ratio);
        auto result = forward_long(params, run, inst, ratios);

        const auto predicted =
            cost_model(run.model, run.policy, ratio, run.task.n, run.interval_len,
                       static_cast<int64_t>(inst.prompt.size()),
                       static_cast<int64_t>(inst.target.size()));
        CHECK(result.attn_pairs == predicted.attn_pairs);
        CHECK(result.cache_stats.peak == predicted.peak_kv_entries);
    }
}

TEST_CASE("train: zero steps leaves the checkpoint at initialization") {
    RunConfig run = small_run();
    run.steps = 0;
    const std::string dir = temp_dir("init");
    auto result = train(run, dir);
    auto loaded = load_checkpoint<float>(result.checkpoint_path);

    Rng init_rng = Rng(run.seed).split(rng_phase::kInit);
    auto expected = ModelParams<float>::init(run.model, init_rng);
    auto named = expected.named();
    REQUIRE(loaded.size() == named.size());
    for (size_t i = 0; i < named.size(); ++i) {
        CHECK(loaded[i].first == named[i].first);
        CHECK(std::memcmp(loaded[i].second.values().data(), named[i].second.values().data(),
                          named[i].second.values().size_bytes()) == 0);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("train: initial loss sits at ln(vocab) for a cold model") {
    RunConfig run = small_run();
    run.steps = 1;
    run.eval_every = 1;
    run.batch_size = 8;
    const std::string dir = temp_dir("lnv");
    auto result = train(run, dir);
    // The first logged loss is computed before any update.
    CHECK(std::abs(result.final_loss - std::log(64.0)) < 0.1);
    std::filesystem::remove_all(dir);
}

TEST_CASE("train: identical config and seed give byte-identical outputs") {
    RunConfig run = small_run();
    run.steps = 6;
    const std::string dir1 = temp_dir("det1");
    const std::string dir2 = temp_dir("det2");
    auto r1 = train(run, dir1);
    auto r2 = train(run, dir2);
    CHECK(read_file(r1.metrics_path) == read_file(r2.metrics_path));
    CHECK(read_file(r1.checkpoint_path) == read_file(r2.checkpoint_path));
    std::filesystem::remove_all(dir1);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("train: loss is finite and decreases on a learnable toy run") {
    RunConfig run = small_run();
    run.task.n = 32;
    run.interval_len = 16;
    run.steps = 60;
    run.batch_size = 8;
    run.lr = 2e-3;
    run.eval_every = 60;
    const std::string dir = temp_dir("learn");
    auto result = train(run, dir);
    CHECK(std::isfinite(result.final_loss));
    CHECK(result.final_loss < std::log(64.0));
    std::filesystem::remove_all(dir);
}

TEST_CASE("evaluate: deterministic rows, full retention reported once") {
    RunConfig run = small_run();
    run.steps = 0;
    const std::string dir = temp_dir("eval");
    auto trained = train(run, dir);

    auto out1 = evaluate_checkpoint(run, trained.checkpoint_path, 6);
    auto out2 = evaluate_checkpoint(run, trained.checkpoint_path, 6);
    REQUIRE(out1.rows.size() == run.eval_ratios.size());
    for (size_t i = 0; i < out1.rows.size(); ++i) {
        CHECK(out1.rows[i].csv_row() == out2.rows[i].csv_row());
        CHECK(out1.rows[i].ratio == run.eval_ratios[i]);
    }
    CHECK(out1.cache_stat_rows == out2.cache_stat_rows);

    run.policy.kind = PolicyKind::Full;
    auto full = evaluate_checkpoint(run, trained.checkpoint_path, 6);
    REQUIRE(full.rows.size() == 1);
    CHECK(full.rows[0].policy == "full");
    std::filesystem::remove_all(dir);
}

TEST_CASE("bench: csv schema, ascending lengths enforced, analytic determinism") {
    ModelConfig cfg;
    const std::vector<int64_t> lengths = {1024, 2048, 4096};
    const std::vector<Policy> policies = {Policy::parse("dense"), Policy::parse("sst")};
    auto rows = bench_sweep(cfg, lengths, policies, 8, 512, false);
    REQUIRE(rows.size() == 6);
    const std::string csv = bench_rows_to_csv(rows, false);
    CHECK(csv.rfind("length,policy,ratio,", 0) == 0);
    auto rows2 = bench_sweep(cfg, lengths, policies, 8, 512, false);
    CHECK(bench_rows_to_csv(rows2, false) == csv);

    const std::vector<int64_t> bad = {2048, 1024};
    CHECK_THROWS_AS(bench_sweep(cfg, bad, policies, 8, 512, false), ConfigError);
}

TEST_CASE("loss masking: target logits are exactly the rows the loss sees") {
    RunConfig run = small_run();
    const VocabLayout vocab = VocabLayout::build(run.model.vocab_size, run.task);
    Rng rng(19);
    auto params = ModelParams<float>::init(run.model, rng);
    const TaskInstance inst = generate(run.task, vocab, rng);
    const std::vector<int64_t> ratios(4, 2);
    auto result = forward_long(params, run, inst, ratios);
    // Logit rows == target length: positions outside the target contribute no
    // loss term and no gradient path through the LM head.
    CHECK(result.logits.dim(0) == static_cast<int64_t>(inst.target.size()));
    auto loss = cross_entropy_mean(result.logits, inst.target);
    loss.backward();
    CHECK(params.lm_head_w.has_grad());
}

TEST_CASE("run config: json round-trip, unknown keys, override paths") {
    RunConfig run;
    const std::string text = run_config_to_json(run);
    RunConfig back = run_config_from_json(text);
    CHECK(run_config_to_json(back) == text);

    CHECK_THROWS_AS(run_config_from_json("{\"stepz\": 3}"), ConfigError);

    auto resolved =
        resolve_run_config(std::nullopt, {"schedule.mode=fixed:8", "task.n=999", "lr=0.01"}, 5);
    CHECK(resolved.schedule.mode == ScheduleMode::Fixed);
    CHECK(resolved.schedule.fixed_ratio == 8);
    CHECK(resolved.task.n == 999);
    CHECK(resolved.lr == doctest::Approx(0.01));
    CHECK(resolved.seed == 5);

    CHECK_THROWS_AS(resolve_run_config(std::nullopt, {"schedule.mod=fixed:8"}, std::nullopt),
                    ConfigError);
    CHECK_THROWS_AS(resolve_run_config(std::nullopt, {"task.n=-4"}, std::nullopt), ConfigError);
}

TEST_CASE("grad-check harness stays within tolerance") {
    auto report = run_grad_check(/*seed=*/123, /*samples_per_tensor=*/12);
    CHECK(report.max_rel < 1e-3);
    CHECK(report.coords_checked >= 100);
}

TEST_CASE("equiv-check harness: quick smoke at small sizes") {
    auto report = run_equiv_check(/*seed=*/5, /*trials=*/6, /*n_max=*/192);
    CHECK(report.max_rel_f32 <= 1e-4);
    CHECK(report.max_rel_f64 <= 1e-10);
}
