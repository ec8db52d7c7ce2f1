// SPDX-License-Identifier: Apache-2.0
// Hand-wired two-layer recall model. Layer 0 attends to the previous token
// and copies its content channel into a dedicated block; layer 1 matches
// that block against the current token's content and routes the successor's
// content to the output block. A marker sequence planted once is reproduced
// greedily when its first marker reappears, unless the cache rows holding
// it have been evicted.
#pragma once

#include "unccache/model.hpp"
#include "unccache/policy.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace unc {

// Channel layout inside d_model = 128.
inline constexpr std::size_t kCopyContentBase = 0; // 8 marker one-hots + other
inline constexpr std::size_t kCopyOtherChannel = 8;
inline constexpr std::size_t kCopyPrevBase = 9;  // previous token's content
inline constexpr std::size_t kCopyOutBase = 18;  // routed successor content
inline constexpr int kCopyMarkerBase = 248;      // marker bytes 248..255
inline constexpr std::size_t kCopyMarkerCount = 8;

Model copy_model();

struct NeedlePrompt {
    std::vector<int> tokens; // BOS + haystack with the needle + trigger
    std::vector<int> answer; // the four marker bytes after the trigger
};

// Haystack of lowercase bytes with a five-marker needle overwriting the
// positions [plant_pos, plant_pos + 5) and the first marker appended as the
// trigger. Markers must be five distinct bytes in [248, 256).
NeedlePrompt make_needle_prompt(std::size_t haystack_len, std::size_t plant_pos,
                                const std::array<int, 5>& markers);

// Deterministic prompts with plant positions spread evenly over
// [min_plant, max_plant] and seeded marker choices.
std::vector<NeedlePrompt> needle_placements(std::size_t count,
                                            std::size_t haystack_len,
                                            std::size_t min_plant,
                                            std::size_t max_plant,
                                            std::uint64_t seed);

// Greedy recall of the full answer; the policy must be fresh.
bool needle_hit(const Model& model, const NeedlePrompt& prompt,
                EvictionPolicy& policy);

// Mean hit rate with a fresh PolicyRuntime per prompt.
double needle_task(const Model& model, const std::vector<NeedlePrompt>& prompts,
                   const PolicyConfig& config);

} // namespace unc
