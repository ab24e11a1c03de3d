#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sstlm/errors.hpp"
#include "sstlm/kv_cache.hpp"
#include "sstlm/rng.hpp"
#include "sstlm/tensor.hpp"

namespace sstlm {

struct ModelConfig {
    int64_t vocab_size = 64;
    int64_t d_model = 64;
    int64_t n_heads = 4;
    int64_t n_layers = 2;
    int64_t d_ff = 256;
    int64_t max_position = 8192;
    double rope_base = 10000.0;

    int64_t d_head() const { return d_model / n_heads; }

    void validate() const {
        if (vocab_size < 8) throw ConfigError("model: vocab_size must be >= 8");
        if (n_heads < 1 || d_model % n_heads != 0)
            throw ConfigError("model: d_model must be divisible by n_heads");
        if (d_head() % 2 != 0) throw ConfigError("model: head dimension must be even for rotation");
        if (n_layers < 1 || d_ff < 1 || max_position < 1)
            throw ConfigError("model: dimensions must be positive");
    }
};

template <typename T>
struct LayerParams {
    Tensor<T> attn_norm_w;  // [d]
    Tensor<T> wq, wk, wv, wo;  // [d x d]
    Tensor<T> mlp_norm_w;   // [d]
    Tensor<T> w_in;         // [d x d_ff]
    Tensor<T> w_out;        // [d_ff x d]
};

// Pre-norm decoder parameters. One learned embedding row backs every summary
// slot; the LM head is untied with a bias.
template <typename T>
struct ModelParams {
    ModelConfig cfg;
    Tensor<T> tok_embed;  // [V x d]
    std::vector<LayerParams<T>> layers;
    Tensor<T> final_norm_w;  // [d]
    Tensor<T> lm_head_w;     // [d x V]
    Tensor<T> lm_head_b;     // [V]

    static ModelParams init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        ModelParams p;
        p.cfg = cfg;
        auto normal = [&rng](Shape shape, double stddev) {
            std::vector<T> values(static_cast<size_t>(numel(shape)));
            for (auto& v : values) v = static_cast<T>(rng.normal(0.0, stddev));
            return Tensor<T>::from(std::move(shape), std::move(values), /*requires_grad=*/true);
        };
        const double s = 0.02;
        p.tok_embed = normal({cfg.vocab_size, cfg.d_model}, s);
        p.layers.resize(static_cast<size_t>(cfg.n_layers));
        for (auto& layer : p.layers) {
            layer.attn_norm_w = Tensor<T>::full({cfg.d_model}, T(1), true);
            layer.wq = normal({cfg.d_model, cfg.d_model}, s);
            layer.wk = normal({cfg.d_model, cfg.d_model}, s);
            layer.wv = normal({cfg.d_model, cfg.d_model}, s);
            layer.wo = normal({cfg.d_model, cfg.d_model}, s);
            layer.mlp_norm_w = Tensor<T>::full({cfg.d_model}, T(1), true);
            layer.w_in = normal({cfg.d_model, cfg.d_ff}, s);
            layer.w_out = normal({cfg.d_ff, cfg.d_model}, s);
        }
        p.final_norm_w = Tensor<T>::full({cfg.d_model}, T(1), true);
        p.lm_head_w = normal({cfg.d_model, cfg.vocab_size}, s);
        p.lm_head_b = Tensor<T>::zeros({cfg.vocab_size}, true);
        return p;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.emplace_back("tok_embed", tok_embed);
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string prefix = "layer" + std::to_string(l) + ".";
            out.emplace_back(prefix + "attn_norm_w", layers[l].attn_norm_w);
            out.emplace_back(prefix + "wq", layers[l].wq);
            out.emplace_back(prefix + "wk", layers[l].wk);
            out.emplace_back(prefix + "wv", layers[l].wv);
            out.emplace_back(prefix + "wo", layers[l].wo);
            out.emplace_back(prefix + "mlp_norm_w", layers[l].mlp_norm_w);
            out.emplace_back(prefix + "w_in", layers[l].w_in);
            out.emplace_back(prefix + "w_out", layers[l].w_out);
        }
        out.emplace_back("final_norm_w", final_norm_w);
        out.emplace_back("lm_head_w", lm_head_w);
        out.emplace_back("lm_head_b", lm_head_b);
        return out;
    }

    std::vector<Tensor<T>> all_params() const {
        std::vector<Tensor<T>> out;
        for (auto& [name, tensor] : named()) out.push_back(tensor);
        return out;
    }

    // Leaf-copies every parameter (bit-identical values, fresh gradients).
    ModelParams clone(bool requires_grad = true) const {
        ModelParams p;
        p.cfg = cfg;
        p.tok_embed = tok_embed.clone_detached(requires_grad);
        p.layers.resize(layers.size());
        for (size_t l = 0; l < layers.size(); ++l) {
            p.layers[l].attn_norm_w = layers[l].attn_norm_w.clone_detached(requires_grad);
            p.layers[l].wq = layers[l].wq.clone_detached(requires_grad);
            p.layers[l].wk = layers[l].wk.clone_detached(requires_grad);
            p.layers[l].wv = layers[l].wv.clone_detached(requires_grad);
            p.layers[l].wo = layers[l].wo.clone_detached(requires_grad);
            p.layers[l].mlp_norm_w = layers[l].mlp_norm_w.clone_detached(requires_grad);
            p.layers[l].w_in = layers[l].w_in.clone_detached(requires_grad);
            p.layers[l].w_out = layers[l].w_out.clone_detached(requires_grad);
        }
        p.final_norm_w = final_norm_w.clone_detached(requires_grad);
        p.lm_head_w = lm_head_w.clone_detached(requires_grad);
        p.lm_head_b = lm_head_b.clone_detached(requires_grad);
        return p;
    }

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> p;
        p.cfg = cfg;
        p.tok_embed = tok_embed.template cast<U>();
        p.layers.resize(layers.size());
        for (size_t l = 0; l < layers.size(); ++l) {
            p.layers[l].attn_norm_w = layers[l].attn_norm_w.template cast<U>();
            p.layers[l].wq = layers[l].wq.template cast<U>();
            p.layers[l].wk = layers[l].wk.template cast<U>();
            p.layers[l].wv = layers[l].wv.template cast<U>();
            p.layers[l].wo = layers[l].wo.template cast<U>();
            p.layers[l].mlp_norm_w = layers[l].mlp_norm_w.template cast<U>();
            p.layers[l].w_in = layers[l].w_in.template cast<U>();
            p.layers[l].w_out = layers[l].w_out.template cast<U>();
        }
        p.final_norm_w = final_norm_w.template cast<U>();
        p.lm_head_w = lm_head_w.template cast<U>();
        p.lm_head_b = lm_head_b.template cast<U>();
        return p;
    }
};

template <typename T>
struct BlockKv {
    std::vector<Tensor<T>> keys;    // per layer, [m x d_model], post-rotation
    std::vector<Tensor<T>> values;  // per layer, [m x d_model]
};

template <typename T>
struct StepOutput {
    Tensor<T> logits;  // [m x V] when requested, otherwise undefined
    BlockKv<T> kv;
    std::vector<int64_t> positions;
};

template <typename T>
Tensor<T> lm_logits(const ModelParams<T>& params, const Tensor<T>& hidden) {
    Tensor<T> h = rms_norm(hidden, params.final_norm_w);
    return add(matmul(h, params.lm_head_w), params.lm_head_b);
}

// Encodes one block of embeddings against the retained cache. Each query row
// attends causally to every visible cache entry plus the earlier rows of this
// block; rotary encoding is applied to Q and K at the given absolute
// positions, and the returned keys are the rotated ones. The cache itself is
// not modified; the caller appends the returned K/V with the roles it wants.
template <typename T>
StepOutput<T> encode_block_embeds(const ModelParams<T>& params, Tensor<T> embeds,
                                  std::span<const int64_t> positions, const KvCache<T>& cache,
                                  bool want_logits) {
    const ModelConfig& cfg = params.cfg;
    const int64_t m = embeds.dim(0);
    if (m < 1) throw ValueError("encode: empty block");
    if (static_cast<int64_t>(positions.size()) != m)
        throw ShapeError("encode: positions count != block length");
    if (m > cfg.max_position)
        throw ValueError("encode: block longer than max_position");
    int64_t prev = cache.max_position();
    for (int64_t p : positions) {
        if (p <= prev)
            throw OrderError("encode: position " + std::to_string(p) +
                             " collides with or precedes cached position " + std::to_string(prev));
        prev = p;
    }
    if (positions.back() >= cfg.max_position)
        throw ValueError("encode: position " + std::to_string(positions.back()) +
                         " beyond max_position " + std::to_string(cfg.max_position));

    const int64_t cache_len = cache.size();
    const int64_t dh = cfg.d_head();

    StepOutput<T> out;
    out.positions.assign(positions.begin(), positions.end());
    out.kv.keys.reserve(static_cast<size_t>(cfg.n_layers));
    out.kv.values.reserve(static_cast<size_t>(cfg.n_layers));

    Tensor<T> x = std::move(embeds);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto& layer = params.layers[static_cast<size_t>(l)];
        Tensor<T> h = rms_norm(x, layer.attn_norm_w);
        Tensor<T> q = rope(matmul(h, layer.wq), positions, cfg.n_heads, cfg.rope_base);
        Tensor<T> k = rope(matmul(h, layer.wk), positions, cfg.n_heads, cfg.rope_base);
        Tensor<T> v = matmul(h, layer.wv);
        out.kv.keys.push_back(k);
        out.kv.values.push_back(v);

        Tensor<T> k_all = k, v_all = v;
        if (cache_len > 0) {
            k_all = concat<T>({cache.layer_keys(l), k}, 0);
            v_all = concat<T>({cache.layer_values(l), v}, 0);
        }

        // One visibility-context sum per layer; heads share the same support.
        OpCounters::get().attn_pairs += static_cast<uint64_t>(m) * cache_len +
                                        static_cast<uint64_t>(m) * (m + 1) / 2;

        std::vector<Tensor<T>> head_outs;
        head_outs.reserve(static_cast<size_t>(cfg.n_heads));
        for (int64_t head = 0; head < cfg.n_heads; ++head) {
            Tensor<T> qh = slice(q, 1, head * dh, dh);
            Tensor<T> kh = slice(k_all, 1, head * dh, dh);
            Tensor<T> vh = slice(v_all, 1, head * dh, dh);
            head_outs.push_back(attend_causal(qh, kh, vh, cache_len));
        }
        Tensor<T> attn = cfg.n_heads == 1 ? head_outs[0] : concat(head_outs, 1);
        x = add(x, matmul(attn, layer.wo));

        Tensor<T> h2 = rms_norm(x, layer.mlp_norm_w);
        x = add(x, matmul(silu(matmul(h2, layer.w_in)), layer.w_out));
    }

    if (want_logits) out.logits = lm_logits(params, x);
    return out;
}

template <typename T>
StepOutput<T> encode_block(const ModelParams<T>& params, std::span<const int32_t> tokens,
                           std::span<const int64_t> positions, const KvCache<T>& cache,
                           bool want_logits) {
    if (tokens.size() != positions.size())
        throw ShapeError("encode: tokens and positions differ in length");
    return encode_block_embeds(params, embedding(params.tok_embed, tokens), positions, cache,
                               want_logits);
}

// Convenience for appending an encoded block with uniform or per-entry roles.
template <typename T>
void append_block(KvCache<T>& cache, const StepOutput<T>& step, const std::vector<KvRole>& roles,
                  std::optional<int32_t> interval = std::nullopt) {
    if (roles.size() != step.positions.size())
        throw ShapeError("append_block: roles count != block length");
    std::vector<KvEntryMeta> meta(roles.size());
    for (size_t i = 0; i < roles.size(); ++i)
        meta[i] = KvEntryMeta{roles[i], step.positions[i], interval};
    cache.append(step.kv.keys, step.kv.values, meta);
}

}  // namespace sstlm
