// SPDX-License-Identifier: Apache-2.0
#include "unccache/copy_model.hpp"

#include "unccache/prng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace unc {

namespace {

constexpr std::size_t kDModel = 128;
constexpr std::size_t kDHead = 64;
constexpr std::size_t kPlanes = kDHead / 2;

std::size_t content_channel(int token) {
    if (token >= kCopyMarkerBase &&
        token < kCopyMarkerBase + static_cast<int>(kCopyMarkerCount))
        return kCopyContentBase + static_cast<std::size_t>(token - kCopyMarkerBase);
    return kCopyOtherChannel;
}

} // namespace

Model copy_model() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_head = kDHead;
    cfg.d_ff = 8;
    cfg.max_context = 512;
    cfg.seed = 0;
    cfg.rope_base = 10000.0;
    cfg.validate();

    Model m;
    m.config = cfg;
    m.embedding.assign(kVocabSize * kDModel, 0.0f);
    m.final_norm.assign(kDModel, 1.0f);
    m.unembed.assign(kVocabSize * kDModel, 0.0f);
    m.layers.resize(cfg.n_layers);
    for (LayerWeights& lw : m.layers) {
        lw.wq.assign(kDModel * kDModel, 0.0f);
        lw.wk.assign(kDModel * kDModel, 0.0f);
        lw.wv.assign(kDModel * kDModel, 0.0f);
        lw.wo.assign(kDModel * kDModel, 0.0f);
        lw.w1.assign(cfg.d_ff * kDModel, 0.0f); // MLP wired to zero
        lw.w2.assign(kDModel * cfg.d_ff, 0.0f);
        lw.attn_norm.assign(kDModel, 1.0f);
        lw.mlp_norm.assign(kDModel, 1.0f);
    }

    // Every token carries exactly one content channel.
    for (int t = 0; t < static_cast<int>(kVocabSize); ++t)
        m.embedding[static_cast<std::size_t>(t) * kDModel + content_channel(t)] = 1.0f;

    // Layer 0, head 0: previous-token head. Raw q is a constant along (1, 0)
    // in every rotary plane (any token has exactly one content channel hot),
    // raw k is that vector pre-rotated by one position, so after rotary the
    // score is proportional to sum_i cos(w_i * (t - j - 1)), sharply peaked
    // at j = t - 1. Head 1 stays zero.
    LayerWeights& l0 = m.layers[0];
    const float prev_gain = 4.0f; // saturates the softmax at every distance
    for (std::size_t p = 0; p < kPlanes; ++p) {
        const double w =
            std::pow(cfg.rope_base, -2.0 * static_cast<double>(p) /
                                        static_cast<double>(kDHead));
        for (std::size_t c = kCopyContentBase; c <= kCopyOtherChannel; ++c) {
            l0.wq[(2 * p) * kDModel + c] = prev_gain;
            l0.wk[(2 * p) * kDModel + c] = static_cast<float>(std::cos(w));
            l0.wk[(2 * p + 1) * kDModel + c] = static_cast<float>(std::sin(w));
        }
    }
    // v exposes the content block; wo routes head 0 into the prev block.
    for (std::size_t c = 0; c <= kCopyOtherChannel; ++c) {
        l0.wv[c * kDModel + (kCopyContentBase + c)] = 1.0f;
        l0.wo[(kCopyPrevBase + c) * kDModel + c] = 1.0f;
    }

    // Layer 1, head 0: induction head. The current token's content channel
    // is encoded into q and the prev block into k with mutually orthogonal
    // codes on the four slowest rotary planes (Hadamard-4 over the x or the
    // y component), so q(t).k(j) is large only when content(t) equals
    // content(j - 1). v exposes content; wo routes it to the out block.
    LayerWeights& l1 = m.layers[1];
    const int had4[4][4] = {{1, 1, 1, 1}, {1, -1, 1, -1}, {1, 1, -1, -1}, {1, -1, -1, 1}};
    const float code_q = 30.0f;
    const float code_k = 1.0f;
    const float route_gain = 40.0f;
    for (std::size_t mark = 0; mark < kCopyMarkerCount; ++mark) {
        const std::size_t a = mark & 3;
        const std::size_t s = mark >> 2; // 0: x component, 1: y component
        for (std::size_t p = 0; p < 4; ++p) {
            const std::size_t row = 2 * (kPlanes - 4 + p) + s;
            const float h = static_cast<float>(had4[a][p]);
            l1.wq[row * kDModel + (kCopyContentBase + mark)] = code_q * h;
            l1.wk[row * kDModel + (kCopyPrevBase + mark)] = code_k * h;
        }
    }
    for (std::size_t c = 0; c <= kCopyOtherChannel; ++c)
        l1.wv[c * kDModel + (kCopyContentBase + c)] = 1.0f;
    for (std::size_t c = 0; c < kCopyMarkerCount; ++c)
        l1.wo[(kCopyOutBase + c) * kDModel + c] = route_gain;

    // Only marker bytes read the out block; all other logits stay at zero.
    for (std::size_t c = 0; c < kCopyMarkerCount; ++c)
        m.unembed[static_cast<std::size_t>(kCopyMarkerBase + c) * kDModel +
                  (kCopyOutBase + c)] = 1.0f;
    return m;
}

NeedlePrompt make_needle_prompt(std::size_t haystack_len, std::size_t plant_pos,
                                const std::array<int, 5>& markers) {
    if (plant_pos + markers.size() > haystack_len)
        throw ModelError("needle does not fit in the haystack");
    if (haystack_len + 2 > 512)
        throw ModelError("prompt exceeds the wired context");
    for (std::size_t i = 0; i < markers.size(); ++i) {
        if (markers[i] < kCopyMarkerBase ||
            markers[i] >= kCopyMarkerBase + static_cast<int>(kCopyMarkerCount))
            throw ModelError("marker byte out of range");
        for (std::size_t j = i + 1; j < markers.size(); ++j)
            if (markers[i] == markers[j])
                throw ModelError("markers must be distinct");
    }

    NeedlePrompt prompt;
    prompt.tokens.reserve(haystack_len + 2);
    prompt.tokens.push_back(kBosToken);
    for (std::size_t i = 0; i < haystack_len; ++i)
        prompt.tokens.push_back('a' + static_cast<int>((i * 7 + 3) % 25));
    for (std::size_t i = 0; i < markers.size(); ++i)
        prompt.tokens[1 + plant_pos + i] = markers[i];
    prompt.tokens.push_back(markers[0]); // trigger
    prompt.answer.assign(markers.begin() + 1, markers.end());
    return prompt;
}

std::vector<NeedlePrompt> needle_placements(std::size_t count,
                                            std::size_t haystack_len,
                                            std::size_t min_plant,
                                            std::size_t max_plant,
                                            std::uint64_t seed) {
    if (count == 0 || max_plant < min_plant)
        throw ModelError("bad placement request");
    SplitMix64 rng(seed);
    std::vector<NeedlePrompt> prompts;
    prompts.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t span = max_plant - min_plant;
        const std::size_t plant =
            count > 1 ? min_plant + (i * span) / (count - 1) : min_plant;
        // Five distinct markers via a seeded partial shuffle of 0..7.
        std::array<int, kCopyMarkerCount> pool{};
        for (std::size_t c = 0; c < kCopyMarkerCount; ++c)
            pool[c] = kCopyMarkerBase + static_cast<int>(c);
        for (std::size_t c = 0; c < 5; ++c) {
            const std::size_t pick =
                c + static_cast<std::size_t>(rng.next() % (kCopyMarkerCount - c));
            std::swap(pool[c], pool[pick]);
        }
        prompts.push_back(make_needle_prompt(
            haystack_len, plant, {pool[0], pool[1], pool[2], pool[3], pool[4]}));
    }
    return prompts;
}

bool needle_hit(const Model& model, const NeedlePrompt& prompt,
                EvictionPolicy& policy) {
    KVCacheState cache;
    std::vector<float> logits = prefill(model, prompt.tokens, policy, cache).logits;
    for (int want : prompt.answer) {
        if (argmax_token(logits) != want)
            return false;
        logits = decode_step(model, cache, policy, want);
    }
    return true;
}

double needle_task(const Model& model, const std::vector<NeedlePrompt>& prompts,
                   const PolicyConfig& config) {
    if (prompts.empty())
        throw ModelError("no prompts");
    std::size_t hits = 0;
    for (const NeedlePrompt& prompt : prompts) {
        PolicyRuntime policy(config);
        hits += needle_hit(model, prompt, policy) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(prompts.size());
}

} // namespace unc
