#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sstlm/compress.hpp"
#include "sstlm/cost_model.hpp"
#include "sstlm/model.hpp"
#include "sstlm/tasks.hpp"

namespace sstlm {

// One structured config drives training, evaluation and benchmarking. Every
// field has a default, serializes to JSON, and is addressable by dotted-path
// overrides; unknown keys and unknown override paths are hard errors.
struct RunConfig {
    ModelConfig model;
    int64_t interval_len = 512;
    CurriculumSchedule schedule = CurriculumSchedule::defaults();
    TaskConfig task;
    Policy policy;

    int64_t steps = 2000;
    int64_t batch_size = 8;
    double lr = 3e-4;
    int64_t warmup_steps = 0;
    std::string lr_decay = "none";  // none | cosine (to 5% of lr)
    uint64_t seed = 1;

    int64_t eval_every = 500;
    int64_t probe_instances = 256;
    double early_stop_em = 0.0;  // 0 disables early stopping
    int64_t probe_ratio = 0;     // ratio the probe is scored at; 0 = schedule max
    std::string dtype = "f32";   // f32 | f64
    bool ratio_per_interval = false;
    std::vector<int64_t> eval_ratios = {2, 4, 8, 16};
    std::string spill_path;  // when set, evicted-entry records are appended here

    // Optional easy-to-hard schedule over the stream length during training:
    // {until_frac, n} stages ending at task.n. Probes and evaluation always
    // use the full task.n. Empty means every step trains at task.n.
    struct LengthStage {
        double until_frac = 1.0;
        int64_t n = 0;
    };
    std::vector<LengthStage> length_schedule;

    int64_t train_length_at(int64_t step) const {
        for (const auto& stage : length_schedule) {
            if (static_cast<double>(step) <
                stage.until_frac * static_cast<double>(steps))
                return stage.n;
        }
        return task.n;
    }

    void validate() const;
};

std::string run_config_to_json(const RunConfig& cfg);  // pretty, stable field order
RunConfig run_config_from_json(const std::string& text);

// defaults -> optional file -> dotted overrides ("a.b.c=value") -> seed flag.
RunConfig resolve_run_config(const std::optional<std::string>& config_path,
                             const std::vector<std::string>& overrides,
                             std::optional<uint64_t> seed_flag);

}  // namespace sstlm
