#include <doctest.h>

#include <cstring>

#include "sstlm/harness.hpp"
#include "sstlm/model.hpp"

using namespace sstlm;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.d_ff = 32;
    cfg.max_position = 4096;
    return cfg;
}

std::vector<int64_t> iota_positions(int64_t n, int64_t start = 0) {
    std::vector<int64_t> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = start + i;
    return out;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config();
    cfg.n_heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.vocab_size = 4;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("attend_causal: single token attends only to itself") {
    auto q = Tensor<float>::from({1, 4}, {1, 2, 3, 4});
    auto k = Tensor<float>::from({1, 4}, {0.5, -1, 2, 0});
    auto v = Tensor<float>::from({1, 4}, {7, 8, 9, 10});
    auto out = attend_causal(q, k, v, 0);
    // Softmax over a single visible entry has weight exactly one.
    for (int i = 0; i < 4; ++i) CHECK(out.values()[i] == doctest::Approx(v.values()[i]));
}

TEST_CASE("lm head: zero hidden with zero bias gives the uniform distribution") {
    Rng rng(3);
    auto params = ModelParams<float>::init(tiny_config(), rng);
    auto logits = lm_logits(params, Tensor<float>::zeros({2, 16}));
    REQUIRE(logits.shape() == Shape{2, 32});
    auto probs = softmax(logits, 1);
    for (int64_t j = 0; j < 32; ++j)
        CHECK(probs.values()[j] == doctest::Approx(1.0 / 32).epsilon(1e-5));
}

TEST_CASE("encode_block: shape contract and position errors") {
    Rng rng(5);
    auto params = ModelParams<float>::init(tiny_config(), rng);
    KvCache<float> cache(2, 16);
    const std::vector<int32_t> tokens = {1, 2, 3};
    auto positions = iota_positions(3);
    auto step = encode_block<float>(params, tokens, positions, cache, true);
    CHECK(step.logits.shape() == Shape{3, 32});
    REQUIRE(step.kv.keys.size() == 2);
    CHECK(step.kv.keys[0].shape() == Shape{3, 16});
    append_block(cache, step, std::vector<KvRole>(3, KvRole::Prompt));

    // Colliding and non-increasing positions.
    CHECK_THROWS_AS(encode_block<float>(params, tokens, positions, cache, false), OrderError);
    ModelConfig small = tiny_config();
    small.max_position = 2;
    auto small_params = ModelParams<float>::init(small, rng);
    KvCache<float> empty(2, 16);
    CHECK_THROWS_AS(encode_block<float>(small_params, tokens, positions, empty, false),
                    ValueError);
}

TEST_CASE("chunked encoding with full retention equals one pass (cornerstone)") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        ModelConfig cfg = tiny_config();
        cfg.n_layers = static_cast<int64_t>(rng.uniform_int(1, 3));
        auto params = ModelParams<float>::init(cfg, rng);
        const int64_t n = rng.uniform_int(8, 160);
        const int64_t w = rng.uniform_int(3, 40);
        std::vector<int32_t> tokens(static_cast<size_t>(n));
        for (auto& t : tokens) t = static_cast<int32_t>(rng.uniform_int(0, 31));

        autodiff::NoGradGuard no_grad;
        KvCache<float> empty(cfg.n_layers, cfg.d_model);
        auto single =
            encode_block<float>(params, tokens, iota_positions(n), empty, true);

        KvCache<float> cache(cfg.n_layers, cfg.d_model);
        std::vector<float> chunked;
        for (const auto& span : partition(n, w)) {
            auto block = encode_block<float>(
                params,
                std::span<const int32_t>(tokens).subspan(static_cast<size_t>(span.begin),
                                                         static_cast<size_t>(span.len())),
                iota_positions(span.len(), span.begin), cache, true);
            append_block(cache, block,
                         std::vector<KvRole>(static_cast<size_t>(span.len()), KvRole::Content));
            chunked.insert(chunked.end(), block.logits.values().begin(),
                           block.logits.values().end());
        }
        REQUIRE(static_cast<int64_t>(chunked.size()) == single.logits.size());
        double max_abs = 1e-30, max_diff = 0.0;
        for (int64_t i = 0; i < single.logits.size(); ++i) {
            max_abs = std::max(max_abs, std::abs(static_cast<double>(single.logits.values()[i])));
            max_diff = std::max(max_diff, std::abs(static_cast<double>(single.logits.values()[i]) -
                                                   chunked[static_cast<size_t>(i)]));
        }
        CHECK(max_diff / max_abs < 1e-4);
    }
}

TEST_CASE("causality: perturbing a later token never changes earlier logits") {
    Rng rng(11);
    auto params = ModelParams<float>::init(tiny_config(), rng);
    const int64_t n = 24;
    std::vector<int32_t> tokens(static_cast<size_t>(n));
    for (auto& t : tokens) t = static_cast<int32_t>(rng.uniform_int(0, 31));

    autodiff::NoGradGuard no_grad;
    KvCache<float> c1(2, 16), c2(2, 16);
    auto base = encode_block<float>(params, tokens, iota_positions(n), c1, true);
    const int64_t j = 13;
    tokens[static_cast<size_t>(j)] = (tokens[static_cast<size_t>(j)] + 5) % 32;
    auto perturbed = encode_block<float>(params, tokens, iota_positions(n), c2, true);

    const int64_t v = 32;
    for (int64_t i = 0; i < j; ++i)
        for (int64_t col = 0; col < v; ++col)
            CHECK(base.logits.values()[i * v + col] ==
                  perturbed.logits.values()[i * v + col]);  // exact
    // And the perturbed step itself must differ somewhere.
    bool differs = false;
    for (int64_t col = 0; col < v; ++col)
        differs = differs || base.logits.values()[j * v + col] !=
                                 perturbed.logits.values()[j * v + col];
    CHECK(differs);
}

TEST_CASE("position stability: retained summary keys are reused verbatim") {
    Rng rng(13);
    auto params = ModelParams<float>::init(tiny_config(), rng);
    autodiff::NoGradGuard no_grad;

    RunConfig run;
    run.model = tiny_config();
    run.interval_len = 8;
    run.policy.kind = PolicyKind::Sst;
    run.task.n = 16;

    KvCache<float> cache(2, 16);
    std::vector<int32_t> stream(16);
    for (auto& t : stream) t = static_cast<int32_t>(rng.uniform_int(8, 31));

    // Encode interval 0 manually, snapshot the retained keys, then encode
    // interval 1 and confirm the snapshot rows are bitwise unchanged.
    const std::vector<int64_t> ratios = {2, 2};
    auto [tok0, layout0] = interleave_sst(8, 2, VocabLayout::sst_id,
                                          std::span<const int32_t>(stream).subspan(0, 8), 0);
    std::vector<int64_t> pos0(tok0.size());
    for (size_t i = 0; i < tok0.size(); ++i) pos0[i] = static_cast<int64_t>(i);
    auto step0 = encode_block<float>(params, tok0, pos0, cache, false);
    std::vector<KvRole> roles0(tok0.size(), KvRole::Content);
    for (int64_t slot : layout0.slots) roles0[static_cast<size_t>(slot)] = KvRole::Sst;
    append_block(cache, step0, roles0, 0);
    cache.retain_ssts(0);

    std::vector<float> snapshot(cache.layer_keys(0).values().begin(),
                                cache.layer_keys(0).values().end());

    auto [tok1, layout1] = interleave_sst(8, 2, VocabLayout::sst_id,
                                          std::span<const int32_t>(stream).subspan(8, 8), 1);
    std::vector<int64_t> pos1(tok1.size());
    for (size_t i = 0; i < tok1.size(); ++i) pos1[i] = static_cast<int64_t>(tok0.size() + i);
    auto step1 = encode_block<float>(params, tok1, pos1, cache, false);
    std::vector<KvRole> roles1(tok1.size(), KvRole::Content);
    for (int64_t slot : layout1.slots) roles1[static_cast<size_t>(slot)] = KvRole::Sst;
    append_block(cache, step1, roles1, 1);
    cache.retain_ssts(1);

    const auto& keys_now = cache.layer_keys(0).values();
    REQUIRE(keys_now.size() >= snapshot.size());
    CHECK(std::memcmp(keys_now.data(), snapshot.data(), snapshot.size() * sizeof(float)) == 0);
}

TEST_CASE("trained copy task: memorized pair is recalled by argmax") {
    // Two-token memorization: the model must map token 3 -> token 9.
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 1;
    Rng rng(17);
    auto params = ModelParams<float>::init(cfg, rng);
    AdamOptimizer<float>::Hyper hyper;
    hyper.lr = 0.01f;
    AdamOptimizer<float> opt(params.all_params(), hyper);

    const std::vector<int32_t> input = {3};
    const std::vector<int32_t> target = {9};
    const std::vector<int64_t> pos = {0};
    for (int step = 0; step < 150; ++step) {
        KvCache<float> cache(1, 16);
        auto out = encode_block<float>(params, input, pos, cache, true);
        auto loss = cross_entropy_mean(out.logits, target);
        loss.backward();
        opt.step();
        opt.zero_grad();
    }
    KvCache<float> cache(1, 16);
    autodiff::NoGradGuard no_grad;
    auto out = encode_block<float>(params, input, pos, cache, true);
    CHECK(argmax_tokens(out.logits)[0] == 9);
}
