#include "sstlm/run_config.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace sstlm {

using nlohmann::json;

namespace {

json schedule_to_json(const CurriculumSchedule& s) {
    json j;
    j["mode"] = s.mode_string();
    j["stages"] = json::array();
    for (const auto& stage : s.stages)
        j["stages"].push_back({{"until_frac", stage.until_frac}, {"pool", stage.pool}});
    return j;
}

CurriculumSchedule schedule_from_json(const json& j) {
    CurriculumSchedule s = CurriculumSchedule::defaults();
    CurriculumSchedule::parse_mode(j.at("mode").get<std::string>(), s);
    if (j.contains("stages")) {
        s.stages.clear();
        for (const auto& stage : j.at("stages")) {
            CurriculumStage st;
            st.until_frac = stage.at("until_frac").get<double>();
            st.pool = stage.at("pool").get<std::vector<int64_t>>();
            s.stages.push_back(std::move(st));
        }
    }
    return s;
}

json config_to_json_value(const RunConfig& cfg) {
    json j;
    j["model"] = {{"vocab_size", cfg.model.vocab_size}, {"d_model", cfg.model.d_model},
                  {"n_heads", cfg.model.n_heads},       {"n_layers", cfg.model.n_layers},
                  {"d_ff", cfg.model.d_ff},             {"max_position", cfg.model.max_position},
                  {"rope_base", cfg.model.rope_base}};
    j["interval_len"] = cfg.interval_len;
    j["schedule"] = schedule_to_json(cfg.schedule);
    j["task"] = {{"kind", task_kind_name(cfg.task.kind)},
                 {"n", cfg.task.n},
                 {"num_markers", cfg.task.num_markers},
                 {"num_pairs", cfg.task.num_pairs},
                 {"num_segments", cfg.task.num_segments},
                 {"value_len", cfg.task.value_len},
                 {"max_marker_repeats", cfg.task.max_marker_repeats},
                 {"seed", cfg.task.seed}};
    j["policy"] = {{"kind", cfg.policy.kind == PolicyKind::Full      ? "full"
                            : cfg.policy.kind == PolicyKind::Sst     ? "sst"
                                                                     : "baseline"},
                   {"baseline", baseline_kind_name(cfg.policy.baseline.kind)},
                   {"ratio", cfg.policy.baseline.ratio}};
    j["steps"] = cfg.steps;
    j["batch_size"] = cfg.batch_size;
    j["lr"] = cfg.lr;
    j["warmup_steps"] = cfg.warmup_steps;
    j["lr_decay"] = cfg.lr_decay;
    j["seed"] = cfg.seed;
    j["eval_every"] = cfg.eval_every;
    j["probe_instances"] = cfg.probe_instances;
    j["early_stop_em"] = cfg.early_stop_em;
    j["probe_ratio"] = cfg.probe_ratio;
    j["dtype"] = cfg.dtype;
    j["ratio_per_interval"] = cfg.ratio_per_interval;
    j["eval_ratios"] = cfg.eval_ratios;
    j["spill_path"] = cfg.spill_path;
    j["length_schedule"] = json::array();
    for (const auto& stage : cfg.length_schedule)
        j["length_schedule"].push_back({{"until_frac", stage.until_frac}, {"n", stage.n}});
    return j;
}

RunConfig config_from_json_value(const json& j) {
    RunConfig cfg;
    const auto& m = j.at("model");
    cfg.model.vocab_size = m.at("vocab_size").get<int64_t>();
    cfg.model.d_model = m.at("d_model").get<int64_t>();
    cfg.model.n_heads = m.at("n_heads").get<int64_t>();
    cfg.model.n_layers = m.at("n_layers").get<int64_t>();
    cfg.model.d_ff = m.at("d_ff").get<int64_t>();
    cfg.model.max_position = m.at("max_position").get<int64_t>();
    cfg.model.rope_base = m.at("rope_base").get<double>();
    cfg.interval_len = j.at("interval_len").get<int64_t>();
    cfg.schedule = schedule_from_json(j.at("schedule"));
    const auto& t = j.at("task");
    cfg.task.kind = parse_task_kind(t.at("kind").get<std::string>());
    cfg.task.n = t.at("n").get<int64_t>();
    cfg.task.num_markers = t.at("num_markers").get<int64_t>();
    cfg.task.num_pairs = t.at("num_pairs").get<int64_t>();
    cfg.task.num_segments = t.at("num_segments").get<int64_t>();
    cfg.task.value_len = t.at("value_len").get<int64_t>();
    cfg.task.max_marker_repeats = t.at("max_marker_repeats").get<int64_t>();
    cfg.task.seed = t.at("seed").get<uint64_t>();
    const auto& p = j.at("policy");
    const std::string kind = p.at("kind").get<std::string>();
    if (kind == "full" || kind == "dense") {
        cfg.policy.kind = PolicyKind::Full;
    } else if (kind == "sst") {
        cfg.policy.kind = PolicyKind::Sst;
    } else if (kind == "baseline") {
        cfg.policy.kind = PolicyKind::Baseline;
    } else {
        throw ConfigError("policy.kind must be full | sst | baseline, got '" + kind + "'");
    }
    cfg.policy.baseline.kind = parse_baseline_kind(p.at("baseline").get<std::string>());
    cfg.policy.baseline.ratio = p.at("ratio").get<int64_t>();
    cfg.steps = j.at("steps").get<int64_t>();
    cfg.batch_size = j.at("batch_size").get<int64_t>();
    cfg.lr = j.at("lr").get<double>();
    cfg.warmup_steps = j.at("warmup_steps").get<int64_t>();
    cfg.lr_decay = j.at("lr_decay").get<std::string>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.eval_every = j.at("eval_every").get<int64_t>();
    cfg.probe_instances = j.at("probe_instances").get<int64_t>();
    cfg.early_stop_em = j.at("early_stop_em").get<double>();
    cfg.probe_ratio = j.at("probe_ratio").get<int64_t>();
    cfg.dtype = j.at("dtype").get<std::string>();
    cfg.ratio_per_interval = j.at("ratio_per_interval").get<bool>();
    cfg.eval_ratios = j.at("eval_ratios").get<std::vector<int64_t>>();
    cfg.spill_path = j.at("spill_path").get<std::string>();
    for (const auto& stage : j.at("length_schedule")) {
        RunConfig::LengthStage ls;
        ls.until_frac = stage.at("until_frac").get<double>();
        ls.n = stage.at("n").get<int64_t>();
        cfg.length_schedule.push_back(ls);
    }
    return cfg;
}

// Every key present in `input` must exist in `schema`; array elements are
// checked against the schema array's first element.
void check_unknown_keys(const json& input, const json& schema, const std::string& path) {
    if (input.is_object()) {
        if (!schema.is_object())
            throw ConfigError("config: '" + path + "' should not be an object");
        for (const auto& [key, value] : input.items()) {
            if (!schema.contains(key))
                throw ConfigError("config: unknown key '" + (path.empty() ? key : path + "." + key) +
                                  "'");
            check_unknown_keys(value, schema.at(key), path.empty() ? key : path + "." + key);
        }
    } else if (input.is_array() && schema.is_array() && !schema.empty()) {
        for (size_t i = 0; i < input.size(); ++i)
            check_unknown_keys(input[i], schema[0], path + "[" + std::to_string(i) + "]");
    }
}

void merge_into(json& base, const json& overlay) {
    if (!overlay.is_object() || !base.is_object()) {
        base = overlay;
        return;
    }
    for (const auto& [key, value] : overlay.items()) {
        if (base.contains(key) && base[key].is_object() && value.is_object())
            merge_into(base[key], value);
        else
            base[key] = value;
    }
}

// Sets a dotted path ("schedule.mode", "schedule.stages.0.until_frac") that
// must already exist; the value is parsed as JSON when possible, else kept as
// a string.
void apply_override(json& doc, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + spec + "' is not of the form path=value");
    const std::string path = spec.substr(0, eq);
    const std::string value_text = spec.substr(eq + 1);

    std::vector<std::string> tokens;
    std::stringstream ss(path);
    std::string token;
    while (std::getline(ss, token, '.')) {
        if (token.empty()) throw ConfigError("override path '" + path + "' has an empty segment");
        tokens.push_back(token);
    }
    if (tokens.empty()) throw ConfigError("override '" + spec + "' has an empty path");

    json* at = &doc;
    for (size_t i = 0; i < tokens.size(); ++i) {
        const std::string& t = tokens[i];
        if (at->is_array()) {
            size_t index = 0;
            try {
                index = static_cast<size_t>(std::stoul(t));
            } catch (const std::exception&) {
                throw ConfigError("override path '" + path + "': '" + t +
                                  "' is not an array index");
            }
            if (index >= at->size())
                throw ConfigError("override path '" + path + "': index " + t + " out of range");
            at = &(*at)[index];
        } else if (at->is_object()) {
            if (!at->contains(t))
                throw ConfigError("override path '" + path + "': unknown key '" + t + "'");
            at = &(*at)[t];
        } else {
            throw ConfigError("override path '" + path + "' descends into a scalar");
        }
    }

    json parsed = json::parse(value_text, nullptr, /*allow_exceptions=*/false);
    *at = parsed.is_discarded() ? json(value_text) : parsed;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    schedule.validate();
    if (interval_len < 1) throw ConfigError("interval_len must be >= 1");
    if (interval_len < schedule.max_ratio())
        throw ConfigError("interval_len must be >= the largest scheduled ratio");
    if (steps < 0 || batch_size < 1) throw ConfigError("steps/batch_size out of range");
    if (lr <= 0) throw ConfigError("lr must be positive");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    if (lr_decay != "none" && lr_decay != "cosine")
        throw ConfigError("lr_decay must be none or cosine");
    if (eval_every < 1 || probe_instances < 1) throw ConfigError("eval cadence out of range");
    if (probe_ratio < 0) throw ConfigError("probe_ratio must be >= 0");
    if (dtype != "f32" && dtype != "f64") throw ConfigError("dtype must be f32 or f64");
    for (int64_t r : eval_ratios)
        if (r < 1) throw ConfigError("eval_ratios must be >= 1");
    if (policy.kind == PolicyKind::Baseline && policy.baseline.ratio < 1)
        throw ConfigError("baseline ratio must be >= 1");
    if (task.n < 1) throw ConfigError("task.n must be >= 1");
    if (task.num_pairs < 1 || task.num_segments < 1 || task.value_len < 1 ||
        task.max_marker_repeats < 1)
        throw ConfigError("task counts must be >= 1");
    double prev_frac = 0.0;
    for (const auto& stage : length_schedule) {
        if (stage.n < 1 || stage.n > task.n)
            throw ConfigError("length_schedule entries must satisfy 1 <= n <= task.n");
        if (stage.until_frac <= prev_frac || stage.until_frac > 1.0)
            throw ConfigError("length_schedule fractions must be increasing in (0, 1]");
        prev_frac = stage.until_frac;
    }
    VocabLayout::build(model.vocab_size, task);  // throws on vocab overflow
}

std::string run_config_to_json(const RunConfig& cfg) {
    return config_to_json_value(cfg).dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
    json doc = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (doc.is_discarded()) throw ConfigError("config is not valid JSON");
    const json schema = config_to_json_value(RunConfig{});
    check_unknown_keys(doc, schema, "");
    json merged = schema;
    merge_into(merged, doc);
    RunConfig cfg = config_from_json_value(merged);
    cfg.validate();
    return cfg;
}

RunConfig resolve_run_config(const std::optional<std::string>& config_path,
                             const std::vector<std::string>& overrides,
                             std::optional<uint64_t> seed_flag) {
    json doc = config_to_json_value(RunConfig{});
    if (config_path) {
        std::ifstream in(*config_path);
        if (!in) throw ConfigError("cannot open config file '" + *config_path + "'");
        std::stringstream buffer;
        buffer << in.rdbuf();
        json file_doc = json::parse(buffer.str(), nullptr, /*allow_exceptions=*/false);
        if (file_doc.is_discarded())
            throw ConfigError("config file '" + *config_path + "' is not valid JSON");
        check_unknown_keys(file_doc, doc, "");
        merge_into(doc, file_doc);
    }
    for (const auto& spec : overrides) apply_override(doc, spec);
    if (seed_flag) doc["seed"] = *seed_flag;

    RunConfig cfg = config_from_json_value(doc);
    cfg.validate();
    return cfg;
}

}  // namespace sstlm
