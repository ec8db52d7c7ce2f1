// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "unccache/bundle.hpp"
#include "unccache/entropy.hpp"

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

namespace unc {

struct ModelError : std::runtime_error {
    explicit ModelError(const std::string& m) : std::runtime_error(m) {}
};

// Byte-level vocabulary: ids 0..255 are raw bytes, then BOS and EOS.
constexpr int kBosToken = 256;
constexpr int kEosToken = 257;
constexpr std::size_t kVocabSize = 258;

// Decoder-only transformer, pre-norm, rotary positions, f32 everywhere,
// greedy decoding only. Small enough to run whole experiments on a desk
// machine while exercising the same cache mechanics as a full-size model.
struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_head = 16; // even (rotary works on pairs)
    std::size_t d_ff = 128;
    std::size_t max_context = 256;
    std::uint64_t seed = 1;
    double rope_base = 10000.0;

    std::size_t d_model() const { return n_heads * d_head; }
    void validate() const;

    nlohmann::ordered_json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

struct LayerWeights {
    std::vector<float> wq, wk, wv, wo; // [d_model][d_model], row-major (out, in)
    std::vector<float> w1;             // [d_ff][d_model]
    std::vector<float> w2;             // [d_model][d_ff]
    std::vector<float> attn_norm, mlp_norm; // [d_model] RMS-norm gains
};

struct Model {
    ModelConfig config;
    std::vector<float> embedding; // [kVocabSize][d_model]
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm; // [d_model]
    std::vector<float> unembed;    // [kVocabSize][d_model]
};

// Deterministic init: one SplitMix64 stream seeded with config.seed feeds
// Box-Muller normals scaled by 1/sqrt(d_model), rounded to f32. Tensor
// order: embedding, then per layer wq, wk, wv, wo, w1, w2, then unembed.
// Every tensor starts on a fresh Box-Muller pair (an odd-sized tensor
// discards its trailing half-pair). Norm gains are the constant 1. A port
// following this recipe bit-matches the f32 weights.
Model init_weights(const ModelConfig& config);

TensorBundle model_to_bundle(const Model& model);
Model model_from_bundle(const TensorBundle& bundle);
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);
std::uint64_t model_fingerprint(const Model& model);

// [BOS] followed by raw bytes.
std::vector<int> tokenize(const std::string& text);
std::string detokenize(const std::vector<int>& tokens); // drops BOS/EOS

// ---- KV cache ---------------------------------------------------------------

// Per-head cache rows plus the sliding window of the most recent attention
// rows (at most `l` of them). Attention row r covers the cache entries that
// existed when it was recorded, i.e. indices [0, rows[r].size()); entries
// appended later implicitly received weight 0 from it.
struct HeadCache {
    std::size_t d_head = 0;
    std::vector<float> keys;   // [len][d_head]
    std::vector<float> values; // [len][d_head]
    std::vector<std::int64_t> positions; // original positions, strictly increasing
    std::deque<std::vector<float>> recent;

    std::size_t len() const { return positions.size(); }
    const float* key(std::size_t i) const { return keys.data() + i * d_head; }
    const float* value(std::size_t i) const { return values.data() + i * d_head; }

    void append(const float* k, const float* v, std::int64_t pos);
    void evict(std::size_t idx);
    void push_attention_row(std::vector<float> row, std::size_t l);
    // Column sums of the recent rows: cumulative attention each cached entry
    // received from the last l queries.
    std::vector<double> accumulator() const;
};

struct LayerCache {
    std::vector<HeadCache> heads;
};

struct KVCacheState {
    std::vector<LayerCache> layers;
    std::int64_t next_position = 0;
    std::size_t peak_rows = 0;

    std::size_t total_rows() const;
    void note_peak();
};

// Last-l attention rows per layer/head as they stood at the end of prefill,
// before any trimming. Each row sums to 1 over its coverage.
struct HeadTrace {
    std::vector<std::int64_t> key_positions;
    std::vector<std::vector<float>> rows;
};

struct AttentionTrace {
    std::vector<std::vector<HeadTrace>> layers; // [layer][head]
};

// ---- policy hooks -------------------------------------------------------------

// Forward mechanics call out through this interface; deciding *what* to
// evict lives entirely in the policy module. The default implementation is
// a no-op (FullKV behavior).
struct EvictionPolicy {
    virtual ~EvictionPolicy() = default;

    // l: depth of the recent-attention window kept per head.
    virtual std::size_t recent_window() const { return 8; }

    // Prefill, before `layer` runs (layer >= 1): indices of hidden rows to
    // keep, ascending, or nullopt to keep all. `cache` still holds the
    // previous layer's recent attention rows.
    virtual std::optional<std::vector<std::size_t>>
    hidden_survivors(const KVCacheState& cache, std::size_t layer, std::size_t n_rows) {
        (void)cache;
        (void)layer;
        (void)n_rows;
        return std::nullopt;
    }

    // Once, after the last prefill layer and trace capture.
    virtual void on_prefill_end(KVCacheState& cache, const AttentionTrace& trace) {
        (void)cache;
        (void)trace;
    }

    // After each decode-step append for (layer, head).
    virtual void after_decode_append(KVCacheState& cache, std::size_t layer, std::size_t head) {
        (void)cache;
        (void)layer;
        (void)head;
    }

    virtual bool head_removed(std::size_t layer, std::size_t head) const {
        (void)layer;
        (void)head;
        return false;
    }
    // Valid only when head_removed(layer, head).
    virtual std::size_t substitute_head(std::size_t layer, std::size_t head) const {
        (void)layer;
        return head;
    }
};

// ---- forward passes -------------------------------------------------------------

struct CaptureOptions {
    bool hidden = false; // residual input per layer
    bool qkv = false;    // per-head projections (q, k post-rotary)
};

struct PrefillResult {
    std::vector<float> logits; // last position, [kVocabSize]
    AttentionTrace trace;
    // Captures, empty unless requested.
    std::vector<TokenMatrix> hidden;                 // [layer], rows x d_model
    std::vector<std::vector<TokenMatrix>> q, k, v;   // [layer][head], rows x d_head
};

// Runs the prompt through the model, filling `cache`. The cache must be
// empty. Tokens: 1 <= count <= max_context.
PrefillResult prefill(const Model& model, const std::vector<int>& tokens,
                      EvictionPolicy& policy, KVCacheState& cache,
                      const CaptureOptions& capture = {});

// One greedy-decodable step; returns the logits for `token` appended at the
// next position.
std::vector<float> decode_step(const Model& model, KVCacheState& cache,
                               EvictionPolicy& policy, int token);

// Policy-free forward pass over the whole sequence: no cache state, no
// traces, attention recomputed densely per row. Shares the arithmetic
// helpers with prefill/decode, so FullKV must reproduce it bit for bit.
std::vector<float> reference_forward(const Model& model, const std::vector<int>& tokens);

int argmax_token(const std::vector<float>& logits);

// Rotary embedding applied in place to one head vector at `pos`:
// pair i rotates by pos * base^(-2i/d_head). Shared by every forward path.
void rope_rotate(float* head_vec, std::size_t d_head, std::int64_t pos, double base);

} // namespace unc
