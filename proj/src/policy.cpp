// SPDX-License-Identifier: Apache-2.0
#include "unccache/policy.hpp"

#include <algorithm>
#include <cmath>

namespace unc {

PolicyKind parse_policy_kind(const std::string& name) {
    if (name == "full")
        return PolicyKind::Full;
    if (name == "cumulative")
        return PolicyKind::Cumulative;
    if (name == "uncomp-group")
        return PolicyKind::UncompGroup;
    if (name == "uncomp-group-stage")
        return PolicyKind::UncompGroupStage;
    if (name == "uncomp-extreme")
        return PolicyKind::UncompExtreme;
    throw PolicyError("unknown policy '" + name + "'");
}

std::string policy_kind_name(PolicyKind kind) {
    switch (kind) {
    case PolicyKind::Full: return "full";
    case PolicyKind::Cumulative: return "cumulative";
    case PolicyKind::UncompGroup: return "uncomp-group";
    case PolicyKind::UncompGroupStage: return "uncomp-group-stage";
    case PolicyKind::UncompExtreme: return "uncomp-extreme";
    }
    throw PolicyError("bad policy kind");
}

std::size_t pick_eviction_index(const HeadCache& head, std::size_t l, std::size_t window) {
    const std::size_t len = head.len();
    if (window < 1)
        throw PolicyError("window must be >= 1");
    if (len <= window)
        throw PolicyError("pick_eviction_index called without surplus");

    const std::size_t protect = std::min(l, window);
    const std::size_t limit = len - protect; // evictable prefix [0, limit)
    const std::vector<double> acc = head.accumulator();
    std::size_t best = 0;
    for (std::size_t j = 1; j < limit; ++j)
        if (acc[j] < acc[best])
            best = j;
    return best;
}

void trim_head_to_window(HeadCache& head, std::size_t l, std::size_t window) {
    while (head.len() > window)
        head.evict(pick_eviction_index(head, l, window));
}

std::vector<std::size_t> hidden_survivors_for(const KVCacheState& cache, std::size_t layer,
                                              std::size_t n_rows, std::size_t target,
                                              std::size_t l) {
    if (layer == 0 || layer > cache.layers.size())
        throw PolicyError("hidden eviction needs a previous layer");

    std::vector<std::size_t> keep(n_rows);
    for (std::size_t i = 0; i < n_rows; ++i)
        keep[i] = i;
    if (n_rows <= target)
        return keep;

    std::vector<double> score(n_rows, 0.0);
    for (const HeadCache& head : cache.layers[layer - 1].heads) {
        if (head.len() != n_rows)
            throw PolicyError("previous layer cache does not match the hidden rows");
        const std::vector<double> acc = head.accumulator();
        for (std::size_t j = 0; j < n_rows; ++j)
            score[j] += acc[j];
    }

    const std::size_t anchor = std::min(l, n_rows);
    const std::size_t body = n_rows - anchor;
    const std::size_t keep_body = target > anchor ? target - anchor : 0;
    if (keep_body >= body)
        return keep;

    // Evict lowest score first, oldest first on ties: survivors are the
    // keep_body body rows that sort highest by (score, position).
    std::vector<std::size_t> order(body);
    for (std::size_t i = 0; i < body; ++i)
        order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (score[a] != score[b])
            return score[a] > score[b];
        return a > b;
    });
    order.resize(keep_body);
    for (std::size_t i = 0; i < anchor; ++i)
        order.push_back(body + i);
    std::sort(order.begin(), order.end());
    return order;
}

std::size_t cosine_substitute(const std::vector<std::vector<double>>& accumulators,
                              std::size_t removed, const std::vector<std::size_t>& retained) {
    if (retained.empty())
        throw PolicyError("no retained head to substitute with");
    const std::vector<double>& a = accumulators.at(removed);

    auto norm = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v)
            s += x * x;
        return std::sqrt(s);
    };
    const double na = norm(a);

    std::size_t best = retained.front();
    double best_cos = -2.0;
    for (std::size_t h : retained) {
        const std::vector<double>& b = accumulators.at(h);
        if (a.size() != b.size())
            throw PolicyError("accumulator length mismatch");
        double dot = 0.0;
        for (std::size_t j = 0; j < a.size(); ++j)
            dot += a[j] * b[j];
        const double nb = norm(b);
        const double c = (na > 0.0 && nb > 0.0) ? dot / (na * nb) : 0.0;
        if (c > best_cos) {
            best_cos = c;
            best = h;
        }
    }
    return best;
}

PolicyRuntime::PolicyRuntime(PolicyConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.l < 1)
        throw PolicyError("l must be >= 1");
    if (cfg_.kind == PolicyKind::Full)
        return;

    if (cfg_.windows.empty())
        throw PolicyError("policy needs per-layer windows");
    const std::size_t n_heads = cfg_.windows.front().size();
    for (const auto& layer : cfg_.windows) {
        if (layer.size() != n_heads || layer.empty())
            throw PolicyError("window table must be rectangular");
        for (std::size_t w : layer)
            if (w < 1)
                throw PolicyError("decode window must be >= 1");
    }

    if (cfg_.kind == PolicyKind::UncompGroupStage &&
        cfg_.hidden_sizes.size() != cfg_.windows.size())
        throw PolicyError("hidden_sizes must cover every layer");
    for (std::size_t s : cfg_.hidden_sizes)
        if (s < 1)
            throw PolicyError("hidden size must be >= 1");

    removed_.assign(cfg_.windows.size(), std::vector<bool>(n_heads, false));
    subs_.assign(cfg_.windows.size(), std::vector<std::size_t>(n_heads, kNoSubstitute));
    if (cfg_.kind == PolicyKind::UncompExtreme) {
        if (cfg_.removed.size() > cfg_.windows.size())
            throw PolicyError("removed head table has too many layers");
        for (std::size_t layer = 0; layer < cfg_.removed.size(); ++layer) {
            for (std::size_t h : cfg_.removed[layer]) {
                if (h >= n_heads)
                    throw PolicyError("removed head index out of range");
                removed_[layer][h] = true;
            }
            std::size_t kept = 0;
            for (std::size_t h = 0; h < n_heads; ++h)
                kept += removed_[layer][h] ? 0 : 1;
            if (kept == 0)
                throw PolicyError("cannot remove every head of a layer");
        }
    }
}

std::optional<std::vector<std::size_t>>
PolicyRuntime::hidden_survivors(const KVCacheState& cache, std::size_t layer,
                                std::size_t n_rows) {
    if (cfg_.kind != PolicyKind::UncompGroupStage)
        return std::nullopt;
    if (layer >= cfg_.hidden_sizes.size())
        throw PolicyError("layer outside hidden_sizes");
    const std::size_t target = cfg_.hidden_sizes[layer];
    if (n_rows <= target)
        return std::nullopt;
    return hidden_survivors_for(cache, layer, n_rows, target, cfg_.l);
}

void PolicyRuntime::on_prefill_end(KVCacheState& cache, const AttentionTrace& trace) {
    if (cfg_.kind == PolicyKind::Full)
        return;
    if (cache.layers.size() != cfg_.windows.size())
        throw PolicyError("window table does not match the model layer count");
    for (const auto& layer : cache.layers)
        if (layer.heads.size() != cfg_.windows.front().size())
            throw PolicyError("window table does not match the model head count");

    if (cfg_.kind == PolicyKind::UncompExtreme) {
        for (std::size_t layer = 0; layer < cache.layers.size(); ++layer) {
            const auto& heads = trace.layers.at(layer);
            std::vector<std::vector<double>> accs(heads.size());
            for (std::size_t h = 0; h < heads.size(); ++h) {
                const HeadTrace& t = heads[h];
                accs[h].assign(t.key_positions.size(), 0.0);
                for (const auto& row : t.rows)
                    for (std::size_t j = 0; j < row.size(); ++j)
                        accs[h][j] += row[j];
            }
            std::vector<std::size_t> retained;
            for (std::size_t h = 0; h < heads.size(); ++h)
                if (!removed_[layer][h])
                    retained.push_back(h);
            for (std::size_t h = 0; h < heads.size(); ++h) {
                if (!removed_[layer][h])
                    continue;
                subs_[layer][h] = cosine_substitute(accs, h, retained);
                HeadCache& hc = cache.layers[layer].heads[h];
                hc.keys.clear();
                hc.values.clear();
                hc.positions.clear();
                hc.recent.clear();
            }
        }
    }

    for (std::size_t layer = 0; layer < cache.layers.size(); ++layer)
        for (std::size_t h = 0; h < cache.layers[layer].heads.size(); ++h)
            if (removed_.empty() || !removed_[layer][h])
                trim_head_to_window(cache.layers[layer].heads[h], cfg_.l,
                                    cfg_.windows[layer][h]);
}

void PolicyRuntime::after_decode_append(KVCacheState& cache, std::size_t layer,
                                        std::size_t head) {
    if (cfg_.kind == PolicyKind::Full)
        return;
    HeadCache& hc = cache.layers.at(layer).heads.at(head);
    trim_head_to_window(hc, cfg_.l, cfg_.windows.at(layer).at(head));
}

bool PolicyRuntime::head_removed(std::size_t layer, std::size_t head) const {
    if (removed_.empty())
        return false;
    return removed_.at(layer).at(head);
}

std::size_t PolicyRuntime::substitute_head(std::size_t layer, std::size_t head) const {
    const std::size_t s = subs_.at(layer).at(head);
    if (s == kNoSubstitute)
        throw PolicyError("substitute queried before prefill end or for a retained head");
    return s;
}

} // namespace unc
