// SPDX-License-Identifier: Apache-2.0
// Cache eviction policies: the decode-time window law, prefill trimming,
// staged hidden-state eviction, and low-rank head removal with cosine
// substitution. Pure decision logic; forward mechanics live in model.cpp.
#pragma once

#include "unccache/model.hpp"

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace unc {

struct PolicyError : std::runtime_error {
    explicit PolicyError(const std::string& m) : std::runtime_error(m) {}
};

enum class PolicyKind {
    Full,            // keep everything
    Cumulative,      // uniform decode windows, cumulative-attention eviction
    UncompGroup,     // per-layer/head planned windows
    UncompGroupStage,// planned windows plus staged prefill hidden eviction
    UncompExtreme,   // planned windows plus low-rank head removal
};

PolicyKind parse_policy_kind(const std::string& name);
std::string policy_kind_name(PolicyKind kind);

struct PolicyConfig {
    PolicyKind kind = PolicyKind::Full;
    std::size_t l = 8; // recent-attention depth, shared by every rule below

    // Decode window per [layer][head]; required for every kind except Full.
    std::vector<std::vector<std::size_t>> windows;

    // Prefill hidden-state budget per layer (UncompGroupStage). The hook
    // only fires for layers >= 1; entry 0 is carried for reporting.
    std::vector<std::size_t> hidden_sizes;

    // Heads dropped per layer (UncompExtreme).
    std::vector<std::vector<std::size_t>> removed;
};

// Index to evict from a head whose cache exceeds its window: the entry with
// the least cumulative recent attention, oldest first on ties. The last
// min(l, window) entries are protected. Requires len > window >= 1.
std::size_t pick_eviction_index(const HeadCache& head, std::size_t l, std::size_t window);

// Applies the eviction law until len <= window, recomputing the accumulator
// after each removal.
void trim_head_to_window(HeadCache& head, std::size_t l, std::size_t window);

// Survivor set (ascending) for staged hidden eviction before `layer` runs:
// the last min(l, n_rows) rows always survive; the rest are ranked by the
// previous layer's recent attention summed over heads, and rows are evicted
// lowest score first, oldest first on ties, until max(target, l) remain.
std::vector<std::size_t> hidden_survivors_for(const KVCacheState& cache, std::size_t layer,
                                              std::size_t n_rows, std::size_t target,
                                              std::size_t l);

// Retained head whose cumulative attention distribution has the highest
// cosine similarity with the removed head's; lowest index on ties. Zero
// vectors score 0 against everything.
std::size_t cosine_substitute(const std::vector<std::vector<double>>& accumulators,
                              std::size_t removed, const std::vector<std::size_t>& retained);

// EvictionPolicy implementation driven by a PolicyConfig. Substitute
// assignments are computed once in on_prefill_end from the pre-trim
// attention trace.
class PolicyRuntime final : public EvictionPolicy {
public:
    explicit PolicyRuntime(PolicyConfig cfg);

    std::size_t recent_window() const override { return cfg_.l; }

    std::optional<std::vector<std::size_t>>
    hidden_survivors(const KVCacheState& cache, std::size_t layer, std::size_t n_rows) override;

    void on_prefill_end(KVCacheState& cache, const AttentionTrace& trace) override;
    void after_decode_append(KVCacheState& cache, std::size_t layer, std::size_t head) override;

    bool head_removed(std::size_t layer, std::size_t head) const override;
    std::size_t substitute_head(std::size_t layer, std::size_t head) const override;

    const PolicyConfig& config() const { return cfg_; }
    // Valid after on_prefill_end; kNoSubstitute where a head is retained.
    static constexpr std::size_t kNoSubstitute = static_cast<std::size_t>(-1);
    const std::vector<std::vector<std::size_t>>& substitutes() const { return subs_; }

private:
    PolicyConfig cfg_;
    std::vector<std::vector<bool>> removed_;       // [layer][head]
    std::vector<std::vector<std::size_t>> subs_;   // [layer][head]
};

} // namespace unc
