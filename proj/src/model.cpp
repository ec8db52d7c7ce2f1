// SPDX-License-Identifier: Apache-2.0
#include "unccache/model.hpp"

#include "unccache/kernels.hpp"
#include "unccache/prng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace unc {

// ---- config and weights -------------------------------------------------------

void ModelConfig::validate() const {
    if (n_layers < 1)
        throw ModelError("n_layers must be >= 1");
    if (n_heads < 1)
        throw ModelError("n_heads must be >= 1");
    if (d_head < 2 || d_head % 2 != 0)
        throw ModelError("d_head must be even and >= 2 (rotary rotates pairs)");
    if (d_ff < 1)
        throw ModelError("d_ff must be >= 1");
    if (max_context < 2)
        throw ModelError("max_context must be >= 2");
    if (!(rope_base > 0.0))
        throw ModelError("rope_base must be positive");
}

nlohmann::ordered_json ModelConfig::to_json() const {
    nlohmann::ordered_json j;
    j["n_layers"] = n_layers;
    j["n_heads"] = n_heads;
    j["d_head"] = d_head;
    j["d_ff"] = d_ff;
    j["max_context"] = max_context;
    j["seed"] = seed;
    j["rope_base"] = rope_base;
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig def;
    ModelConfig c;
    c.n_layers = j.value("n_layers", def.n_layers);
    c.n_heads = j.value("n_heads", def.n_heads);
    c.d_head = j.value("d_head", def.d_head);
    c.d_ff = j.value("d_ff", def.d_ff);
    c.max_context = j.value("max_context", def.max_context);
    c.seed = j.value("seed", def.seed);
    c.rope_base = j.value("rope_base", def.rope_base);
    c.validate();
    return c;
}

Model init_weights(const ModelConfig& config) {
    config.validate();
    const std::size_t d = config.d_model();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Model m;
    m.config = config;
    NormalStream stream(config.seed);

    auto fill = [&](std::vector<float>& t, std::size_t n) {
        t.resize(n);
        stream.fill_normal(t.data(), n, scale);
    };

    fill(m.embedding, kVocabSize * d);
    m.layers.resize(config.n_layers);
    for (auto& layer : m.layers) {
        fill(layer.wq, d * d);
        fill(layer.wk, d * d);
        fill(layer.wv, d * d);
        fill(layer.wo, d * d);
        fill(layer.w1, config.d_ff * d);
        fill(layer.w2, d * config.d_ff);
        layer.attn_norm.assign(d, 1.0f);
        layer.mlp_norm.assign(d, 1.0f);
    }
    m.final_norm.assign(d, 1.0f);
    fill(m.unembed, kVocabSize * d);
    return m;
}

TensorBundle model_to_bundle(const Model& model) {
    const std::size_t d = model.config.d_model();
    TensorBundle b;
    b.meta["model_config"] = model.config.to_json();
    b.add("embedding", {kVocabSize, d}, model.embedding);
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& l = model.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        b.add(p + "wq", {d, d}, l.wq);
        b.add(p + "wk", {d, d}, l.wk);
        b.add(p + "wv", {d, d}, l.wv);
        b.add(p + "wo", {d, d}, l.wo);
        b.add(p + "w1", {model.config.d_ff, d}, l.w1);
        b.add(p + "w2", {d, model.config.d_ff}, l.w2);
        b.add(p + "attn_norm", {d}, l.attn_norm);
        b.add(p + "mlp_norm", {d}, l.mlp_norm);
    }
    b.add("final_norm", {d}, model.final_norm);
    b.add("unembed", {kVocabSize, d}, model.unembed);
    return b;
}

Model model_from_bundle(const TensorBundle& bundle) {
    if (!bundle.meta.contains("model_config"))
        throw ModelError("bundle metadata lacks model_config");
    Model m;
    m.config = ModelConfig::from_json(bundle.meta["model_config"]);
    const std::size_t d = m.config.d_model();

    auto take = [&](const std::string& name, std::size_t expect) {
        const auto& e = bundle.get(name);
        if (e.data.size() != expect)
            throw ModelError("tensor '" + name + "' has unexpected size");
        return e.data;
    };

    m.embedding = take("embedding", kVocabSize * d);
    m.layers.resize(m.config.n_layers);
    for (std::size_t i = 0; i < m.config.n_layers; ++i) {
        auto& l = m.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        l.wq = take(p + "wq", d * d);
        l.wk = take(p + "wk", d * d);
        l.wv = take(p + "wv", d * d);
        l.wo = take(p + "wo", d * d);
        l.w1 = take(p + "w1", m.config.d_ff * d);
        l.w2 = take(p + "w2", d * m.config.d_ff);
        l.attn_norm = take(p + "attn_norm", d);
        l.mlp_norm = take(p + "mlp_norm", d);
    }
    m.final_norm = take("final_norm", d);
    m.unembed = take("unembed", kVocabSize * d);
    return m;
}

void save_model(const Model& model, const std::string& path) {
    save_bundle(model_to_bundle(model), path);
}

Model load_model(const std::string& path) {
    return model_from_bundle(load_bundle(path));
}

std::uint64_t model_fingerprint(const Model& model) {
    return bundle_fingerprint(model_to_bundle(model));
}

std::vector<int> tokenize(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size() + 1);
    out.push_back(kBosToken);
    for (unsigned char c : text)
        out.push_back(static_cast<int>(c));
    return out;
}

std::string detokenize(const std::vector<int>& tokens) {
    std::string out;
    for (int t : tokens)
        if (t >= 0 && t < 256)
            out.push_back(static_cast<char>(t));
    return out;
}

// ---- cache ------------------------------------------------------------------

void HeadCache::append(const float* k, const float* v, std::int64_t pos) {
    if (!positions.empty() && pos <= positions.back())
        throw ModelError("cache positions must be strictly increasing");
    keys.insert(keys.end(), k, k + d_head);
    values.insert(values.end(), v, v + d_head);
    positions.push_back(pos);
}

void HeadCache::evict(std::size_t idx) {
    if (idx >= len())
        throw ModelError("evict index out of range");
    keys.erase(keys.begin() + static_cast<std::ptrdiff_t>(idx * d_head),
               keys.begin() + static_cast<std::ptrdiff_t>((idx + 1) * d_head));
    values.erase(values.begin() + static_cast<std::ptrdiff_t>(idx * d_head),
                 values.begin() + static_cast<std::ptrdiff_t>((idx + 1) * d_head));
    positions.erase(positions.begin() + static_cast<std::ptrdiff_t>(idx));
    for (auto& row : recent)
        if (idx < row.size())
            row.erase(row.begin() + static_cast<std::ptrdiff_t>(idx));
}

void HeadCache::push_attention_row(std::vector<float> row, std::size_t l) {
    recent.push_back(std::move(row));
    while (recent.size() > l)
        recent.pop_front();
}

std::vector<double> HeadCache::accumulator() const {
    std::vector<double> acc(len(), 0.0);
    for (const auto& row : recent)
        for (std::size_t j = 0; j < row.size(); ++j)
            acc[j] += row[j];
    return acc;
}

std::size_t KVCacheState::total_rows() const {
    std::size_t n = 0;
    for (const auto& layer : layers)
        for (const auto& head : layer.heads)
            n += head.len();
    return n;
}

void KVCacheState::note_peak() {
    peak_rows = std::max(peak_rows, total_rows());
}

// ---- shared forward helpers ---------------------------------------------------

void rope_rotate(float* head_vec, std::size_t d_head, std::int64_t pos, double base) {
    const double p = static_cast<double>(pos);
    for (std::size_t i = 0; i < d_head / 2; ++i) {
        const double freq =
            std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
        const double angle = p * freq;
        const float c = static_cast<float>(std::cos(angle));
        const float s = static_cast<float>(std::sin(angle));
        const float a = head_vec[2 * i];
        const float b = head_vec[2 * i + 1];
        head_vec[2 * i] = a * c - b * s;
        head_vec[2 * i + 1] = a * s + b * c;
    }
}

namespace {

void rmsnorm(float* dst, const float* src, const float* gain, std::size_t d) {
    const auto& k = kern::active();
    const float ms = k.sumsq_f32(src, d) / static_cast<float>(d);
    const float inv = 1.0f / std::sqrt(ms + 1e-5f);
    for (std::size_t i = 0; i < d; ++i)
        dst[i] = src[i] * inv * gain[i];
}

void matvec(float* out, const float* w, const float* x, std::size_t rows, std::size_t cols) {
    const auto& k = kern::active();
    for (std::size_t r = 0; r < rows; ++r)
        out[r] = k.dot_f32(w + r * cols, x, cols);
}

void silu_inplace(float* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        x[i] = x[i] / (1.0f + std::exp(-x[i]));
}

// One head's attention for one query over a contiguous key/value block.
// Both the cached paths and the reference path funnel through here, which is
// what makes FullKV bit-identical to the reference.
void attend(const float* q, const float* keys, const float* values, std::size_t len,
            std::size_t d_head, float* out_seg, std::vector<float>& scores) {
    const auto& k = kern::active();
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(d_head));
    scores.resize(len);
    for (std::size_t j = 0; j < len; ++j)
        scores[j] = k.dot_f32(q, keys + j * d_head, d_head);
    k.scale_f32(scores.data(), inv_sqrt, len);
    k.softmax_f32(scores.data(), len);
    std::fill(out_seg, out_seg + d_head, 0.0f);
    for (std::size_t j = 0; j < len; ++j)
        k.axpy_f32(scores[j], values + j * d_head, out_seg, d_head);
}

struct RowBuffers {
    std::vector<float> normed, q, k, v, concat, attn_out, ff, ff_out, scores;
    void size_for(const ModelConfig& c) {
        normed.resize(c.d_model());
        q.resize(c.d_model());
        k.resize(c.d_model());
        v.resize(c.d_model());
        concat.resize(c.d_model());
        attn_out.resize(c.d_model());
        ff.resize(c.d_ff);
        ff_out.resize(c.d_model());
    }
};

// Attention + MLP for one row of one layer against `cache_layer`. Appends
// the row's k/v first, so causal self-attention covers it. Removed heads
// (decode only) skip their projections and copy the substitute's output
// segment afterwards.
void layer_row(const Model& model, std::size_t layer_idx, float* h, std::int64_t pos,
               LayerCache& cache_layer, std::size_t l, EvictionPolicy* policy_for_removal,
               RowBuffers& buf, std::vector<TokenMatrix>* cap_q,
               std::vector<TokenMatrix>* cap_k, std::vector<TokenMatrix>* cap_v) {
    const ModelConfig& cfg = model.config;
    const LayerWeights& w = model.layers[layer_idx];
    const std::size_t d = cfg.d_model();
    const std::size_t dh = cfg.d_head;

    rmsnorm(buf.normed.data(), h, w.attn_norm.data(), d);
    matvec(buf.q.data(), w.wq.data(), buf.normed.data(), d, d);
    matvec(buf.k.data(), w.wk.data(), buf.normed.data(), d, d);
    matvec(buf.v.data(), w.wv.data(), buf.normed.data(), d, d);

    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
        if (policy_for_removal != nullptr && policy_for_removal->head_removed(layer_idx, head))
            continue;
        float* qh = buf.q.data() + head * dh;
        float* kh = buf.k.data() + head * dh;
        const float* vh = buf.v.data() + head * dh;
        rope_rotate(qh, dh, pos, cfg.rope_base);
        rope_rotate(kh, dh, pos, cfg.rope_base);

        HeadCache& hc = cache_layer.heads[head];
        hc.append(kh, vh, pos);
        attend(qh, hc.keys.data(), hc.values.data(), hc.len(), dh,
               buf.concat.data() + head * dh, buf.scores);
        hc.push_attention_row(buf.scores, l);

        if (cap_q != nullptr) {
            auto push_row = [&](TokenMatrix& m, const float* src) {
                m.rows += 1;
                m.cols = dh;
                m.data.insert(m.data.end(), src, src + dh);
            };
            push_row((*cap_q)[head], qh);
            push_row((*cap_k)[head], kh);
            push_row((*cap_v)[head], vh);
        }
    }
    if (policy_for_removal != nullptr) {
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            if (!policy_for_removal->head_removed(layer_idx, head))
                continue;
            const std::size_t sub = policy_for_removal->substitute_head(layer_idx, head);
            std::memcpy(buf.concat.data() + head * dh, buf.concat.data() + sub * dh,
                        dh * sizeof(float));
        }
    }

    const auto& kset = kern::active();
    matvec(buf.attn_out.data(), w.wo.data(), buf.concat.data(), d, d);
    kset.axpy_f32(1.0f, buf.attn_out.data(), h, d);

    rmsnorm(buf.normed.data(), h, w.mlp_norm.data(), d);
    matvec(buf.ff.data(), w.w1.data(), buf.normed.data(), cfg.d_ff, d);
    silu_inplace(buf.ff.data(), cfg.d_ff);
    matvec(buf.ff_out.data(), w.w2.data(), buf.ff.data(), d, cfg.d_ff);
    kset.axpy_f32(1.0f, buf.ff_out.data(), h, d);
}

std::vector<float> final_logits(const Model& model, const float* h) {
    const std::size_t d = model.config.d_model();
    std::vector<float> normed(d);
    rmsnorm(normed.data(), h, model.final_norm.data(), d);
    std::vector<float> logits(kVocabSize);
    matvec(logits.data(), model.unembed.data(), normed.data(), kVocabSize, d);
    return logits;
}

void check_tokens(const Model& model, const std::vector<int>& tokens) {
    if (tokens.empty())
        throw ModelError("empty token sequence");
    if (tokens.size() > model.config.max_context)
        throw ModelError("sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_context " + std::to_string(model.config.max_context));
    for (int t : tokens)
        if (t < 0 || t >= static_cast<int>(kVocabSize))
            throw ModelError("token id " + std::to_string(t) + " out of range");
}

} // namespace

// ---- prefill -------------------------------------------------------------------

PrefillResult prefill(const Model& model, const std::vector<int>& tokens,
                      EvictionPolicy& policy, KVCacheState& cache,
                      const CaptureOptions& capture) {
    check_tokens(model, tokens);
    if (!cache.layers.empty())
        throw ModelError("prefill needs an empty cache");

    const ModelConfig& cfg = model.config;
    const std::size_t d = cfg.d_model();
    const std::size_t n = tokens.size();
    const std::size_t l = policy.recent_window();

    cache.layers.resize(cfg.n_layers);
    for (auto& layer : cache.layers) {
        layer.heads.resize(cfg.n_heads);
        for (auto& head : layer.heads)
            head.d_head = cfg.d_head;
    }

    std::vector<std::vector<float>> h(n, std::vector<float>(d));
    std::vector<std::int64_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::memcpy(h[i].data(), model.embedding.data() + static_cast<std::size_t>(tokens[i]) * d,
                    d * sizeof(float));
        pos[i] = static_cast<std::int64_t>(i);
    }

    PrefillResult out;
    out.trace.layers.resize(cfg.n_layers);
    if (capture.hidden)
        out.hidden.resize(cfg.n_layers);
    if (capture.qkv) {
        out.q.resize(cfg.n_layers);
        out.k.resize(cfg.n_layers);
        out.v.resize(cfg.n_layers);
    }

    RowBuffers buf;
    buf.size_for(cfg);

    for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        if (layer > 0) {
            if (auto keep = policy.hidden_survivors(cache, layer, h.size())) {
                std::vector<std::vector<float>> h2;
                std::vector<std::int64_t> pos2;
                h2.reserve(keep->size());
                pos2.reserve(keep->size());
                for (std::size_t idx : *keep) {
                    if (idx >= h.size())
                        throw ModelError("hidden survivor index out of range");
                    h2.push_back(std::move(h[idx]));
                    pos2.push_back(pos[idx]);
                }
                h = std::move(h2);
                pos = std::move(pos2);
            }
        }

        if (capture.hidden) {
            TokenMatrix& m = out.hidden[layer];
            m.rows = h.size();
            m.cols = d;
            m.data.clear();
            for (const auto& row : h)
                m.data.insert(m.data.end(), row.begin(), row.end());
        }
        if (capture.qkv) {
            out.q[layer].assign(cfg.n_heads, TokenMatrix());
            out.k[layer].assign(cfg.n_heads, TokenMatrix());
            out.v[layer].assign(cfg.n_heads, TokenMatrix());
        }

        for (std::size_t i = 0; i < h.size(); ++i) {
            layer_row(model, layer, h[i].data(), pos[i], cache.layers[layer], l,
                      nullptr, buf,
                      capture.qkv ? &out.q[layer] : nullptr,
                      capture.qkv ? &out.k[layer] : nullptr,
                      capture.qkv ? &out.v[layer] : nullptr);
        }

        auto& layer_trace = out.trace.layers[layer];
        layer_trace.resize(cfg.n_heads);
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            const HeadCache& hc = cache.layers[layer].heads[head];
            layer_trace[head].key_positions = hc.positions;
            layer_trace[head].rows.assign(hc.recent.begin(), hc.recent.end());
        }
    }

    out.logits = final_logits(model, h.back().data());
    cache.next_position = static_cast<std::int64_t>(n);
    cache.note_peak();
    policy.on_prefill_end(cache, out.trace);
    return out;
}

// ---- decode ---------------------------------------------------------------------

std::vector<float> decode_step(const Model& model, KVCacheState& cache,
                               EvictionPolicy& policy, int token) {
    const ModelConfig& cfg = model.config;
    if (cache.layers.size() != cfg.n_layers)
        throw ModelError("decode_step needs a prefilled cache");
    if (token < 0 || token >= static_cast<int>(kVocabSize))
        throw ModelError("token id out of range");

    const std::size_t d = cfg.d_model();
    const std::int64_t pos = cache.next_position;
    cache.next_position += 1;
    const std::size_t l = policy.recent_window();

    std::vector<float> h(d);
    std::memcpy(h.data(), model.embedding.data() + static_cast<std::size_t>(token) * d,
                d * sizeof(float));

    RowBuffers buf;
    buf.size_for(cfg);
    for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        layer_row(model, layer, h.data(), pos, cache.layers[layer], l, &policy, buf,
                  nullptr, nullptr, nullptr);
        cache.note_peak();
        for (std::size_t head = 0; head < cfg.n_heads; ++head)
            if (!policy.head_removed(layer, head))
                policy.after_decode_append(cache, layer, head);
    }
    return final_logits(model, h.data());
}

// ---- reference -------------------------------------------------------------------

std::vector<float> reference_forward(const Model& model, const std::vector<int>& tokens) {
    check_tokens(model, tokens);
    const ModelConfig& cfg = model.config;
    const std::size_t d = cfg.d_model();
    const std::size_t dh = cfg.d_head;
    const std::size_t n = tokens.size();
    const auto& kset = kern::active();

    std::vector<std::vector<float>> h(n, std::vector<float>(d));
    for (std::size_t i = 0; i < n; ++i)
        std::memcpy(h[i].data(), model.embedding.data() + static_cast<std::size_t>(tokens[i]) * d,
                    d * sizeof(float));

    RowBuffers buf;
    buf.size_for(cfg);
    for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        const LayerWeights& w = model.layers[layer];
        // Per-head dense key/value blocks, filled row by row in the same
        // order the cached path appends them.
        std::vector<std::vector<float>> keys(cfg.n_heads), values(cfg.n_heads);
        for (auto& kb : keys)
            kb.reserve(n * dh);
        for (auto& vb : values)
            vb.reserve(n * dh);

        for (std::size_t i = 0; i < n; ++i) {
            float* hr = h[i].data();
            rmsnorm(buf.normed.data(), hr, w.attn_norm.data(), d);
            matvec(buf.q.data(), w.wq.data(), buf.normed.data(), d, d);
            matvec(buf.k.data(), w.wk.data(), buf.normed.data(), d, d);
            matvec(buf.v.data(), w.wv.data(), buf.normed.data(), d, d);
            for (std::size_t head = 0; head < cfg.n_heads; ++head) {
                float* qh = buf.q.data() + head * dh;
                float* kh = buf.k.data() + head * dh;
                const float* vh = buf.v.data() + head * dh;
                rope_rotate(qh, dh, static_cast<std::int64_t>(i), cfg.rope_base);
                rope_rotate(kh, dh, static_cast<std::int64_t>(i), cfg.rope_base);
                keys[head].insert(keys[head].end(), kh, kh + dh);
                values[head].insert(values[head].end(), vh, vh + dh);
                attend(qh, keys[head].data(), values[head].data(), i + 1, dh,
                       buf.concat.data() + head * dh, buf.scores);
            }
            matvec(buf.attn_out.data(), w.wo.data(), buf.concat.data(), d, d);
            kset.axpy_f32(1.0f, buf.attn_out.data(), hr, d);
            rmsnorm(buf.normed.data(), hr, w.mlp_norm.data(), d);
            matvec(buf.ff.data(), w.w1.data(), buf.normed.data(), cfg.d_ff, d);
            silu_inplace(buf.ff.data(), cfg.d_ff);
            matvec(buf.ff_out.data(), w.w2.data(), buf.ff.data(), d, cfg.d_ff);
            kset.axpy_f32(1.0f, buf.ff_out.data(), hr, d);
        }
    }
    return final_logits(model, h.back().data());
}

int argmax_token(const std::vector<float>& logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best])
            best = i;
    return static_cast<int>(best);
}

} // namespace unc
