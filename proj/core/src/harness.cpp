#include "sstlm/harness.hpp"

#include <sys/resource.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>

#include <nlohmann/json.hpp>

#include "sstlm/checkpoint.hpp"

namespace sstlm {

using nlohmann::json;

namespace {

std::string format_double(double v, const char* fmt = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), fmt, v);
    return buf;
}

double lr_at_step(const RunConfig& run, int64_t step) {
    double lr = run.lr;
    if (run.warmup_steps > 0 && step < run.warmup_steps)
        lr *= static_cast<double>(step + 1) / static_cast<double>(run.warmup_steps);
    if (run.lr_decay == "cosine" && run.steps > run.warmup_steps) {
        const double progress =
            std::max(0.0, static_cast<double>(step - run.warmup_steps)) /
            static_cast<double>(run.steps - run.warmup_steps);
        const double floor = 0.05;
        lr *= floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
    }
    return lr;
}

// Ratio the held-out probe is scored at: configurable, defaulting to the
// hardest ratio the schedule will ever train on, so early stopping tracks the
// end goal rather than the current stage.
int64_t probe_ratio(const RunConfig& run) {
    return run.probe_ratio > 0 ? run.probe_ratio : run.schedule.max_ratio();
}

template <typename T>
double probe_exact_match(const ModelParams<T>& params, const RunConfig& run,
                         const std::vector<TaskInstance>& probe, int64_t ratio) {
    const int64_t n_intervals =
        static_cast<int64_t>(partition(run.task.n, run.interval_len).size());
    std::vector<int> hits(probe.size(), 0);
    parallel_for(static_cast<int64_t>(probe.size()), worker_count(), [&](int64_t i) {
        autodiff::NoGradGuard no_grad;
        const std::vector<int64_t> plan(static_cast<size_t>(n_intervals), ratio);
        auto result = forward_long(params, run, probe[static_cast<size_t>(i)], plan);
        const auto out = argmax_tokens(result.logits);
        hits[static_cast<size_t>(i)] =
            score(probe[static_cast<size_t>(i)], out).exact_match ? 1 : 0;
    });
    int64_t total = 0;
    for (int h : hits) total += h;
    return static_cast<double>(total) / static_cast<double>(probe.size());
}

template <typename T>
TrainResult train_impl(const RunConfig& run, const std::string& out_dir) {
    const VocabLayout vocab = VocabLayout::build(run.model.vocab_size, run.task);
    const uint64_t data_key = data_domain_key(run);

    Rng init_rng = Rng(run.seed).split(rng_phase::kInit);
    ModelParams<T> params = ModelParams<T>::init(run.model, init_rng);
    auto leaves = params.all_params();
    typename AdamOptimizer<T>::Hyper hyper;
    hyper.lr = static_cast<T>(run.lr);
    AdamOptimizer<T> optimizer(leaves, hyper);

    std::vector<TaskInstance> probe(static_cast<size_t>(run.probe_instances));
    for (int64_t i = 0; i < run.probe_instances; ++i) {
        Rng rng = Rng(data_key).split(rng_phase::kProbe).split(static_cast<uint64_t>(i));
        probe[static_cast<size_t>(i)] = generate(run.task, vocab, rng);
    }

    std::filesystem::create_directories(out_dir);
    const std::string metrics_path = out_dir + "/metrics.jsonl";
    std::ofstream metrics(metrics_path, std::ios::trunc);
    if (!metrics) throw IoError("cannot open '" + metrics_path + "' for writing");

    std::ofstream spill;
    std::mutex spill_mutex;
    std::function<void(const SpillRecord&)> spill_sink;
    if (!run.spill_path.empty()) {
        spill.open(run.spill_path, std::ios::trunc);
        if (!spill) throw IoError("cannot open spill file '" + run.spill_path + "'");
        spill_sink = [&spill, &spill_mutex](const SpillRecord& rec) {
            json j{{"position", rec.meta.position},
                   {"interval", rec.meta.interval ? json(*rec.meta.interval) : json()},
                   {"role", kv_role_name(rec.meta.role)},
                   {"k_norm", rec.k_norm},
                   {"v_norm", rec.v_norm}};
            std::lock_guard<std::mutex> lock(spill_mutex);
            spill << j.dump() << "\n";
        };
    }

    const size_t n_params = leaves.size();

    TrainResult result;
    double loss_accum = 0.0;
    int64_t loss_count = 0;
    double last_probe_em = 0.0;
    bool stop = false;

    for (int64_t step = 0; step < run.steps && !stop; ++step) {
        const int64_t batch = run.batch_size;
        std::vector<double> losses(static_cast<size_t>(batch), 0.0);
        std::vector<std::vector<std::vector<T>>> grads(static_cast<size_t>(batch));

        // Easy-to-hard stream lengths, when scheduled; the probe always runs
        // at the full task length.
        TaskConfig step_task = run.task;
        step_task.n = run.train_length_at(step);
        const int64_t step_intervals =
            static_cast<int64_t>(partition(step_task.n, run.interval_len).size());

        parallel_for(batch, worker_count(), [&](int64_t b) {
            Rng data_rng = Rng(data_key)
                               .split(rng_phase::kTrainData)
                               .split(static_cast<uint64_t>(step))
                               .split(static_cast<uint64_t>(b));
            const TaskInstance inst = generate(step_task, vocab, data_rng);
            Rng ratio_rng = Rng(run.seed)
                                .split(rng_phase::kRatio)
                                .split(static_cast<uint64_t>(step))
                                .split(static_cast<uint64_t>(b));
            const auto ratios = make_ratio_plan(run, step_intervals, step, ratio_rng);

            ModelParams<T> local = params.clone(/*requires_grad=*/true);
            auto res = forward_long(local, run, inst, ratios, spill_sink);
            Tensor<T> loss = cross_entropy_mean(res.logits, inst.target);
            losses[static_cast<size_t>(b)] = static_cast<double>(loss.item());
            loss.backward();

            auto local_leaves = local.all_params();
            auto& slot = grads[static_cast<size_t>(b)];
            slot.resize(local_leaves.size());
            for (size_t pi = 0; pi < local_leaves.size(); ++pi) {
                if (local_leaves[pi].has_grad()) {
                    slot[pi].assign(local_leaves[pi].grad().begin(),
                                    local_leaves[pi].grad().end());
                } else {
                    slot[pi].assign(static_cast<size_t>(local_leaves[pi].size()), T(0));
                }
            }
        });

        double batch_loss = 0.0;
        for (double l : losses) batch_loss += l;
        batch_loss /= static_cast<double>(batch);
        if (!std::isfinite(batch_loss))
            throw ValueError("training diverged: non-finite loss at step " +
                             std::to_string(step));
        optimizer.set_lr(static_cast<T>(lr_at_step(run, step)));

        // Reduce in batch order so results are identical for any worker count.
        const T inv_batch = T(1) / static_cast<T>(batch);
        for (size_t pi = 0; pi < n_params; ++pi) {
            leaves[pi].zero_grad();
            auto g = leaves[pi].grad_mut();
            for (int64_t b = 0; b < batch; ++b) {
                const auto& src = grads[static_cast<size_t>(b)][pi];
                for (size_t i = 0; i < src.size(); ++i) g[i] += src[i];
            }
            for (size_t i = 0; i < g.size(); ++i) g[i] *= inv_batch;
        }
        optimizer.step();
        optimizer.zero_grad();

        loss_accum += batch_loss;
        ++loss_count;
        result.final_loss = batch_loss;
        result.steps_run = step + 1;

        const bool last_step = step + 1 == run.steps;
        if ((step + 1) % run.eval_every == 0 || last_step) {
            last_probe_em = probe_exact_match(params, run, probe, probe_ratio(run));
            json record{{"step", step + 1},
                        {"loss", loss_accum / static_cast<double>(loss_count)},
                        {"exact_match", last_probe_em}};
            metrics << record.dump() << "\n";
            metrics.flush();
            loss_accum = 0.0;
            loss_count = 0;
            // Early stopping is only honoured once training has reached the
            // full stream length; stopping mid-curriculum would freeze a
            // model that has never seen the end-goal positions.
            if (run.early_stop_em > 0.0 && last_probe_em >= run.early_stop_em &&
                run.train_length_at(step) == run.task.n)
                stop = true;
        }
    }

    result.final_probe_em = last_probe_em;
    result.checkpoint_path = out_dir + "/checkpoint.bin";
    result.metrics_path = metrics_path;
    save_checkpoint(result.checkpoint_path, params.named());

    std::ofstream snapshot(out_dir + "/config.resolved.json", std::ios::trunc);
    snapshot << run_config_to_json(run);
    return result;
}

template <typename T>
EvalOutput evaluate_impl(const RunConfig& run, const std::string& checkpoint_path,
                         int64_t num_instances) {
    Rng scratch_rng(0);
    ModelParams<T> params = ModelParams<T>::init(run.model, scratch_rng);
    // Replace freshly initialized values with the checkpoint contents.
    auto named = params.named();
    auto loaded = load_checkpoint<T>(checkpoint_path, /*requires_grad=*/false);
    if (loaded.size() != named.size())
        throw IoError("checkpoint holds " + std::to_string(loaded.size()) + " tensors, model needs " +
                      std::to_string(named.size()));
    for (size_t i = 0; i < named.size(); ++i) {
        if (loaded[i].first != named[i].first)
            throw IoError("checkpoint tensor order mismatch at '" + loaded[i].first + "'");
        if (loaded[i].second.shape() != named[i].second.shape())
            throw IoError("checkpoint tensor '" + loaded[i].first + "' has shape " +
                          shape_str(loaded[i].second.shape()) + ", model expects " +
                          shape_str(named[i].second.shape()));
        auto dst = named[i].second.values_mut();
        std::copy(loaded[i].second.values().begin(), loaded[i].second.values().end(), dst.begin());
    }

    EvalOutput out;
    out.rows = evaluate_with_params(params, run, num_instances, run.eval_ratios);

    // Cache accounting for one representative instance per swept ratio.
    const VocabLayout vocab = VocabLayout::build(run.model.vocab_size, run.task);
    Rng rng = Rng(data_domain_key(run)).split(rng_phase::kEval).split(0);
    const TaskInstance inst = generate(run.task, vocab, rng);
    const int64_t n_intervals =
        static_cast<int64_t>(partition(run.task.n, run.interval_len).size());
    out.cache_stat_rows.push_back(CacheStats::csv_header());
    for (const auto& row : out.rows) {
        autodiff::NoGradGuard no_grad;
        const std::vector<int64_t> plan(static_cast<size_t>(n_intervals), row.ratio);
        auto result = forward_long(params, run, inst, plan);
        out.cache_stat_rows.push_back(
            result.cache_stats.csv_row(run.task.n, run.interval_len, row.ratio));
    }
    return out;
}

}  // namespace

std::string EvalRow::csv_row() const {
    return task + "," + policy + "," + std::to_string(ratio) + "," + std::to_string(n) + "," +
           std::to_string(instances) + "," + format_double(exact_match) + "," +
           format_double(token_accuracy);
}

TrainResult train(const RunConfig& run, const std::string& out_dir) {
    run.validate();
    if (run.dtype == "f64") return train_impl<double>(run, out_dir);
    return train_impl<float>(run, out_dir);
}

EvalOutput evaluate_checkpoint(const RunConfig& run, const std::string& checkpoint_path,
                               int64_t num_instances) {
    run.validate();
    if (num_instances < 1) throw ConfigError("eval: need at least one instance");
    if (run.dtype == "f64") return evaluate_impl<double>(run, checkpoint_path, num_instances);
    return evaluate_impl<float>(run, checkpoint_path, num_instances);
}

std::vector<BenchRow> bench_sweep(const ModelConfig& cfg, std::span<const int64_t> lengths,
                                  std::span<const Policy> policies, int64_t ratio,
                                  int64_t interval_len, bool measure) {
    for (size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1]) throw ConfigError("bench: lengths must be ascending");
    if (lengths.empty() || policies.empty()) throw ConfigError("bench: nothing to sweep");

    std::vector<BenchRow> rows;
    for (int64_t n : lengths) {
        for (const auto& policy : policies) {
            BenchRow row;
            row.report = cost_model(cfg, policy, ratio, n, interval_len);
            if (measure) {
                RunConfig run;
                run.model = cfg;
                run.model.max_position = 2 * n + interval_len + 16;
                run.interval_len = interval_len;
                run.policy = policy;
                run.task.n = n;

                TaskInstance inst;
                Rng rng = Rng(rng_phase::kBench).split(static_cast<uint64_t>(n));
                inst.stream.resize(static_cast<size_t>(n));
                for (auto& t : inst.stream)
                    t = static_cast<int32_t>(
                        rng.uniform_int(VocabLayout::digit0_id, cfg.vocab_size - 1));

                Rng prng = Rng(rng_phase::kBench).split(7);
                ModelParams<float> params = ModelParams<float>::init(run.model, prng);
                const int64_t n_intervals =
                    static_cast<int64_t>(partition(n, interval_len).size());
                const std::vector<int64_t> plan(static_cast<size_t>(n_intervals), ratio);

                autodiff::NoGradGuard no_grad;
                const auto t0 = std::chrono::steady_clock::now();
                auto result = forward_long(params, run, inst, plan);
                const auto t1 = std::chrono::steady_clock::now();
                (void)result;
                row.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
                rusage usage{};
                getrusage(RUSAGE_SELF, &usage);
                row.peak_rss_kb = usage.ru_maxrss;
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::string bench_rows_to_csv(const std::vector<BenchRow>& rows, bool measure) {
    std::string csv = CostReport::csv_header();
    if (measure) csv += ",measured_wall_ms,measured_peak_rss_kb";
    csv += "\n";
    for (const auto& row : rows) {
        csv += row.report.csv_row();
        if (measure) {
            csv += "," + format_double(row.wall_ms.value_or(0.0), "%.3f");
            csv += "," + std::to_string(row.peak_rss_kb.value_or(0));
        }
        csv += "\n";
    }
    return csv;
}

namespace {

template <typename T>
std::vector<Tensor<T>> chunked_logits(const ModelParams<T>& params,
                                      std::span<const int32_t> tokens, int64_t w) {
    KvCache<T> cache(params.cfg.n_layers, params.cfg.d_model);
    std::vector<Tensor<T>> blocks;
    for (const auto& span : partition(static_cast<int64_t>(tokens.size()), w)) {
        std::vector<int64_t> positions(static_cast<size_t>(span.len()));
        for (int64_t i = 0; i < span.len(); ++i) positions[static_cast<size_t>(i)] = span.begin + i;
        auto step = encode_block(params,
                                 tokens.subspan(static_cast<size_t>(span.begin),
                                                static_cast<size_t>(span.len())),
                                 positions, cache, /*want_logits=*/true);
        append_block(cache, step, std::vector<KvRole>(static_cast<size_t>(span.len()),
                                                      KvRole::Content));
        blocks.push_back(step.logits);
    }
    return blocks;
}

template <typename T>
double equiv_max_rel(const ModelParams<T>& params, std::span<const int32_t> tokens, int64_t w) {
    autodiff::NoGradGuard no_grad;
    const int64_t n = static_cast<int64_t>(tokens.size());
    KvCache<T> empty_cache(params.cfg.n_layers, params.cfg.d_model);
    std::vector<int64_t> positions(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) positions[static_cast<size_t>(i)] = i;
    auto single = encode_block(params, tokens, positions, empty_cache, true);

    auto blocks = chunked_logits(params, tokens, w);

    double max_abs_ref = 0.0;
    for (T v : single.logits.values())
        max_abs_ref = std::max(max_abs_ref, std::abs(static_cast<double>(v)));
    max_abs_ref = std::max(max_abs_ref, 1e-30);

    double max_abs_diff = 0.0;
    int64_t row = 0;
    const int64_t v = params.cfg.vocab_size;
    for (const auto& block : blocks) {
        for (int64_t i = 0; i < block.dim(0); ++i, ++row) {
            for (int64_t j = 0; j < v; ++j) {
                const double a = static_cast<double>(block.values()[i * v + j]);
                const double b = static_cast<double>(single.logits.values()[row * v + j]);
                max_abs_diff = std::max(max_abs_diff, std::abs(a - b));
            }
        }
    }
    return max_abs_diff / max_abs_ref;
}

}  // namespace

EquivReport run_equiv_check(uint64_t seed, int trials, int64_t n_max) {
    if (trials < 1 || n_max < 2) throw ConfigError("equiv-check: bad trial parameters");
    const auto t0 = std::chrono::steady_clock::now();
    EquivReport report;
    report.trials = trials;
    for (int t = 0; t < trials; ++t) {
        Rng rng = Rng(seed).split(static_cast<uint64_t>(t));
        ModelConfig cfg;
        const int64_t d_choices[] = {16, 32, 64};
        cfg.d_model = d_choices[rng.index(3)];
        const int64_t head_choices[] = {2, 4};
        cfg.n_heads = head_choices[rng.index(2)];
        cfg.n_layers = rng.uniform_int(1, 3);
        cfg.d_ff = cfg.d_model * rng.uniform_int(2, 4);
        cfg.vocab_size = 32;
        cfg.max_position = n_max + 1;

        const int64_t n = rng.uniform_int(2, n_max);
        const int64_t w = rng.uniform() < 0.5 ? 64 : 512;
        std::vector<int32_t> tokens(static_cast<size_t>(n));
        for (auto& tok : tokens)
            tok = static_cast<int32_t>(rng.uniform_int(0, cfg.vocab_size - 1));

        ModelParams<float> params32 = ModelParams<float>::init(cfg, rng);
        ModelParams<double> params64 = params32.cast<double>();

        report.max_rel_f32 = std::max(report.max_rel_f32, equiv_max_rel(params32, tokens, w));
        report.max_rel_f64 = std::max(report.max_rel_f64, equiv_max_rel(params64, tokens, w));
    }
    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

GradCheckReport run_grad_check(uint64_t seed, int64_t samples_per_tensor) {
    RunConfig run;
    run.model.d_model = 16;
    run.model.n_heads = 2;
    run.model.n_layers = 1;
    run.model.d_ff = 64;
    run.model.vocab_size = 32;
    run.model.max_position = 256;
    run.interval_len = 16;
    run.task.kind = TaskKind::NeedleRecall;
    run.task.n = 32;
    run.task.num_markers = 4;
    run.task.num_pairs = 2;
    run.task.value_len = 1;
    run.policy.kind = PolicyKind::Sst;
    run.validate();

    const VocabLayout vocab = VocabLayout::build(run.model.vocab_size, run.task);
    Rng data_rng = Rng(seed).split(1);
    const TaskInstance inst = generate(run.task, vocab, data_rng);
    const std::vector<int64_t> ratios = {4, 4};

    Rng init_rng = Rng(seed).split(0);
    ModelParams<double> params = ModelParams<double>::init(run.model, init_rng);

    auto loss_value = [&]() {
        autodiff::NoGradGuard no_grad;
        auto res = forward_long(params, run, inst, ratios);
        return cross_entropy_mean(res.logits, inst.target).item();
    };

    // Analytic gradients.
    {
        auto res = forward_long(params, run, inst, ratios);
        Tensor<double> loss = cross_entropy_mean(res.logits, inst.target);
        loss.backward();
    }

    GradCheckReport report;
    const double h = 1e-4;
    Rng pick_rng = Rng(seed).split(2);
    for (auto& [name, tensor] : params.named()) {
        const int64_t size = tensor.size();
        std::vector<int64_t> coords(static_cast<size_t>(size));
        for (int64_t i = 0; i < size; ++i) coords[static_cast<size_t>(i)] = i;
        if (size > samples_per_tensor) {
            for (int64_t i = 0; i < samples_per_tensor; ++i) {
                const int64_t j = pick_rng.uniform_int(i, size - 1);
                std::swap(coords[static_cast<size_t>(i)], coords[static_cast<size_t>(j)]);
            }
            coords.resize(static_cast<size_t>(samples_per_tensor));
        }

        double tensor_max_rel = 0.0;
        auto values = tensor.values_mut();
        for (int64_t c : coords) {
            const double original = values[static_cast<size_t>(c)];
            values[static_cast<size_t>(c)] = original + h;
            const double plus = loss_value();
            values[static_cast<size_t>(c)] = original - h;
            const double minus = loss_value();
            values[static_cast<size_t>(c)] = original;

            const double fd = (plus - minus) / (2 * h);
            const double analytic =
                tensor.has_grad() ? tensor.grad()[static_cast<size_t>(c)] : 0.0;
            const double denom = std::max(std::abs(fd), std::abs(analytic));
            const double rel = denom < 1e-8 ? 0.0 : std::abs(fd - analytic) / denom;
            tensor_max_rel = std::max(tensor_max_rel, rel);
            ++report.coords_checked;
        }
        report.per_tensor.emplace_back(name, tensor_max_rel);
        report.max_rel = std::max(report.max_rel, tensor_max_rel);
    }
    return report;
}

}  // namespace sstlm
