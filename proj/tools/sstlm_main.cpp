// Command-line front end: train / eval / bench / equiv-check / grad-check /
// gen-data. Every run is reproducible from (config, seed); outputs land under
// --out together with a resolved-config snapshot.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sstlm/checkpoint.hpp"
#include "sstlm/harness.hpp"

namespace {

using nlohmann::json;

struct CommonArgs {
    std::optional<std::string> config_path;
    std::vector<std::string> overrides;
    std::optional<uint64_t> seed;
    std::string out_dir = "out";
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Run config JSON file");
    cmd->add_option("--override", args.overrides,
                    "Dotted-path config override, e.g. schedule.mode=fixed:8 (repeatable)");
    cmd->add_option("--seed", args.seed, "Override the run seed");
    cmd->add_option("--out", args.out_dir, "Output directory");
}

sstlm::RunConfig resolve(const CommonArgs& args) {
    return sstlm::resolve_run_config(args.config_path, args.overrides, args.seed);
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw sstlm::IoError("cannot open '" + path + "' for writing");
    out << content;
}

void write_snapshot(const sstlm::RunConfig& run, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    write_file(out_dir + "/config.resolved.json", sstlm::run_config_to_json(run));
}

std::vector<int64_t> parse_int_list(const std::string& text, const char* what) {
    std::vector<int64_t> out;
    std::stringstream ss(text);
    std::string token;
    while (std::getline(ss, token, ',')) {
        try {
            out.push_back(std::stoll(token));
        } catch (const std::exception&) {
            throw sstlm::ConfigError(std::string(what) + ": cannot parse '" + token + "'");
        }
    }
    if (out.empty()) throw sstlm::ConfigError(std::string(what) + ": empty list");
    return out;
}

int cmd_train(const CommonArgs& args) {
    const auto run = resolve(args);
    write_snapshot(run, args.out_dir);
    const auto result = sstlm::train(run, args.out_dir);
    json summary{{"checkpoint", result.checkpoint_path},
                 {"metrics", result.metrics_path},
                 {"steps_run", result.steps_run},
                 {"final_loss", result.final_loss},
                 {"exact_match", result.final_probe_em}};
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint, int64_t instances,
             bool greedy) {
    const auto run = resolve(args);
    write_snapshot(run, args.out_dir);
    auto output = sstlm::evaluate_checkpoint(run, checkpoint, instances);

    std::string csv = sstlm::EvalRow::csv_header() + "\n";
    for (const auto& row : output.rows) csv += row.csv_row() + "\n";
    write_file(args.out_dir + "/eval.csv", csv);

    std::string cache_csv;
    for (const auto& row : output.cache_stat_rows) cache_csv += row + "\n";
    write_file(args.out_dir + "/cache_stats.csv", cache_csv);

    if (greedy) {
        // Qualitative: free-running decode of one instance per swept ratio.
        const auto vocab = sstlm::VocabLayout::build(run.model.vocab_size, run.task);
        sstlm::Rng rng = sstlm::Rng(sstlm::data_domain_key(run)).split(sstlm::rng_phase::kEval).split(0);
        const auto inst = sstlm::generate(run.task, vocab, rng);
        auto named = sstlm::load_checkpoint<float>(checkpoint, false);
        sstlm::Rng scratch(0);
        auto params = sstlm::ModelParams<float>::init(run.model, scratch);
        auto target = params.named();
        for (size_t i = 0; i < target.size(); ++i)
            std::copy(named[i].second.values().begin(), named[i].second.values().end(),
                      target[i].second.values_mut().begin());
        const int64_t n_intervals =
            static_cast<int64_t>(sstlm::partition(run.task.n, run.interval_len).size());
        std::string lines;
        for (const auto& row : output.rows) {
            std::vector<int64_t> plan(static_cast<size_t>(n_intervals), row.ratio);
            auto tokens = sstlm::greedy_decode(params, run, inst, plan,
                                               static_cast<int64_t>(inst.target.size()));
            json j{{"ratio", row.ratio}, {"greedy", tokens}, {"target", inst.target}};
            lines += j.dump() + "\n";
        }
        write_file(args.out_dir + "/greedy.jsonl", lines);
    }

    std::cout << csv;
    return 0;
}

int cmd_bench(const CommonArgs& args, const std::string& lengths_text,
              const std::string& policies_text, int64_t ratio, bool measure, bool to_file) {
    const auto run = resolve(args);
    const auto lengths = parse_int_list(lengths_text, "--lengths");

    std::vector<sstlm::Policy> policies;
    {
        std::stringstream ss(policies_text);
        std::string token;
        while (std::getline(ss, token, ',')) policies.push_back(sstlm::Policy::parse(token));
        if (policies.empty()) throw sstlm::ConfigError("--policies: empty list");
    }

    const auto rows =
        sstlm::bench_sweep(run.model, lengths, policies, ratio, run.interval_len, measure);
    const std::string csv = sstlm::bench_rows_to_csv(rows, measure);
    if (to_file) {
        write_snapshot(run, args.out_dir);
        write_file(args.out_dir + "/bench.csv", csv);
    }
    std::cout << csv;
    return 0;
}

int cmd_equiv(uint64_t seed, int trials, int64_t n_max) {
    const auto report = sstlm::run_equiv_check(seed, trials, n_max);
    const bool pass = report.max_rel_f32 <= 1e-4 && report.max_rel_f64 <= 1e-10;
    json j{{"trials", report.trials},
           {"max_rel_f32", report.max_rel_f32},
           {"max_rel_f64", report.max_rel_f64},
           {"tolerance_f32", 1e-4},
           {"tolerance_f64", 1e-10},
           {"seconds", report.seconds},
           {"pass", pass}};
    std::cout << j.dump() << "\n";
    return pass ? 0 : 1;
}

int cmd_grad(uint64_t seed, int64_t samples) {
    const auto report = sstlm::run_grad_check(seed, samples);
    const bool pass = report.max_rel <= 1e-3;
    json per_tensor = json::object();
    for (const auto& [name, rel] : report.per_tensor) per_tensor[name] = rel;
    json j{{"max_rel", report.max_rel},
           {"coords_checked", report.coords_checked},
           {"tolerance", 1e-3},
           {"per_tensor", per_tensor},
           {"pass", pass}};
    std::cout << j.dump() << "\n";
    return pass ? 0 : 1;
}

int cmd_gen_data(const CommonArgs& args, int64_t count) {
    const auto run = resolve(args);
    write_snapshot(run, args.out_dir);
    const auto vocab = sstlm::VocabLayout::build(run.model.vocab_size, run.task);
    const uint64_t key = sstlm::data_domain_key(run);
    std::string lines;
    for (int64_t i = 0; i < count; ++i) {
        sstlm::Rng rng = sstlm::Rng(key).split(sstlm::rng_phase::kEval).split(static_cast<uint64_t>(i));
        const auto inst = sstlm::generate(run.task, vocab, rng);
        lines += sstlm::instance_to_jsonl(run.task, run.seed, inst) + "\n";
    }
    write_file(args.out_dir + "/instances.jsonl", lines);
    std::cout << "wrote " << count << " instances to " << args.out_dir << "/instances.jsonl\n";
    return 0;
}

int fail(const char* type, const std::string& message, int code) {
    json j{{"error", {{"type", type}, {"message", message}}}};
    std::cerr << j.dump() << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Long-context summary-token KV compression runtime"};
    app.require_subcommand(1);

    CommonArgs train_args, eval_args, bench_args, gen_args;

    auto* train_cmd = app.add_subcommand("train", "Train a model under the configured policy");
    add_common(train_cmd, train_args);

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint across compression ratios");
    add_common(eval_cmd, eval_args);
    std::string eval_ckpt;
    int64_t eval_instances = 200;
    bool eval_greedy = false;
    eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
    eval_cmd->add_option("--instances", eval_instances, "Held-out instances per ratio");
    eval_cmd->add_flag("--greedy", eval_greedy, "Also write free-running decodes (qualitative)");

    auto* bench_cmd = app.add_subcommand("bench", "Analytic cost sweep (optionally measured)");
    add_common(bench_cmd, bench_args);
    std::string bench_lengths = "1024,2048,4096,8192,16384";
    std::string bench_policies = "dense,sst";
    int64_t bench_ratio = 8;
    bool bench_measure = false;
    bench_cmd->add_option("--lengths", bench_lengths, "Comma-separated sequence lengths");
    bench_cmd->add_option("--policies", bench_policies,
                          "Comma-separated policies (dense,sst,avg_pool,max_pool,similarity)");
    bench_cmd->add_option("--ratio", bench_ratio, "Compression ratio for non-dense policies");
    bench_cmd->add_flag("--measure", bench_measure,
                        "Add measured wall-clock / peak-RSS columns (environment-dependent)");

    auto* equiv_cmd = app.add_subcommand(
        "equiv-check", "Chunked-vs-single-pass logit equivalence under full retention");
    uint64_t equiv_seed = 7;
    int equiv_trials = 100;
    int64_t equiv_n_max = 2048;
    equiv_cmd->add_option("--seed", equiv_seed, "Seed for random configurations");
    equiv_cmd->add_option("--trials", equiv_trials, "Number of random configurations");
    equiv_cmd->add_option("--n-max", equiv_n_max, "Maximum sequence length");

    auto* grad_cmd = app.add_subcommand("grad-check",
                                        "Finite-difference check of the analytic gradients");
    uint64_t grad_seed = 7;
    int64_t grad_samples = 50;
    grad_cmd->add_option("--seed", grad_seed, "Seed for the probe instance and sampling");
    grad_cmd->add_option("--samples", grad_samples, "Sampled coordinates per parameter tensor");

    auto* gen_cmd = app.add_subcommand("gen-data", "Write task instances as JSONL");
    add_common(gen_cmd, gen_args);
    int64_t gen_count = 100;
    gen_cmd->add_option("--count", gen_count, "Number of instances");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::stringstream ss;
        ss << e.what();
        return fail("usage", ss.str(), 2);
    }

    try {
        if (train_cmd->parsed()) return cmd_train(train_args);
        if (eval_cmd->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_instances, eval_greedy);
        if (bench_cmd->parsed())
            return cmd_bench(bench_args, bench_lengths, bench_policies, bench_ratio,
                             bench_measure, bench_cmd->count("--out") > 0);
        if (equiv_cmd->parsed()) return cmd_equiv(equiv_seed, equiv_trials, equiv_n_max);
        if (grad_cmd->parsed()) return cmd_grad(grad_seed, grad_samples);
        if (gen_cmd->parsed()) return cmd_gen_data(gen_args, gen_count);
        return fail("usage", "no subcommand given", 2);
    } catch (const sstlm::ConfigError& e) {
        return fail("config", e.what(), 2);
    } catch (const std::exception& e) {
        return fail("runtime", e.what(), 1);
    }
}
