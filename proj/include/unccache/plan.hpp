// SPDX-License-Identifier: Apache-2.0
// Offline calibration and plan synthesis: per-layer entropy profiles, layer
// partitioning, layer/head context schedules, head voting and grouping, and
// the serialized compression plan that drives the runtime policies.
#pragma once

#include "unccache/entropy.hpp"
#include "unccache/model.hpp"
#include "unccache/policy.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace unc {

struct PlanError : std::runtime_error {
    explicit PlanError(const std::string& m) : std::runtime_error(m) {}
};
struct EmptyCalibration : PlanError {
    explicit EmptyCalibration(const std::string& m) : PlanError(m) {}
};
struct BadRange : PlanError {
    explicit BadRange(const std::string& m) : PlanError(m) {}
};
struct BadM : PlanError {
    explicit BadM(const std::string& m) : PlanError(m) {}
};
struct WindowUnderflow : PlanError {
    explicit WindowUnderflow(const std::string& m) : PlanError(m) {}
};
struct PlanMismatch : PlanError {
    explicit PlanMismatch(const std::string& m) : PlanError(m) {}
};
struct FingerprintMismatch : PlanError {
    explicit FingerprintMismatch(const std::string& m) : PlanError(m) {}
};

enum class ProfileSource { HiddenState, Query, Key, Value };
ProfileSource parse_profile_source(const std::string& s); // "h"/"q"/"k"/"v" or long names
std::string profile_source_name(ProfileSource s);

// Truncated effective rank of a token matrix under a k-selection mode; the
// composition every profiling path funnels through.
double truncated_erank_of(const TokenMatrix& x, const TopK& mode);

struct EntropyProfile {
    std::vector<double> per_layer; // erank_k per layer, in [1, D]
    ProfileSource source = ProfileSource::Query;
};

struct LayerPlan {
    std::vector<std::size_t> boundaries;  // ascending first-layer-of-group indices (>= 1)
    std::vector<std::size_t> group_sizes; // context size per group, strictly decreasing
    std::size_t s_max = 0;
    std::size_t s_min = 0;
    double delta_s = 0.0; // (s_max - s_min) / (G - 1), 0 when G = 1

    std::size_t group_of(std::size_t layer) const;
};

struct HeadPlan {
    std::vector<std::vector<std::size_t>> per_layer_order; // [layer][rank] -> head
    std::vector<std::vector<std::size_t>> group_of_head;   // [layer][head] -> group
    std::vector<std::vector<std::size_t>> group_windows;   // [layer][group] -> window
    std::vector<std::vector<std::int64_t>> votes;          // [layer][head]
};

struct PlanConfig {
    double epsilon = 1.0;
    std::size_t l = 8;
    std::size_t s_min = 1536;
    std::size_t s_max = 4096;
    std::size_t m = 2;
    std::size_t s_i1 = 512;
    std::size_t delta_s_h = 256;
    TopK top_k = TopK::elbow();

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static PlanConfig from_json(const nlohmann::json& j);
};

struct CompressionPlan {
    LayerPlan layer_plan;
    HeadPlan head_plan;
    PlanConfig config;
    std::string model_fingerprint;

    std::size_t n_layers() const { return head_plan.group_of_head.size(); }
    std::size_t n_heads() const {
        return n_layers() == 0 ? 0 : head_plan.group_of_head.front().size();
    }
    std::size_t window_of(std::size_t layer, std::size_t head) const;
    double mean_window() const; // over layers x heads

    nlohmann::ordered_json to_json() const;
    static CompressionPlan from_json(const nlohmann::json& j);
};

// One calibration pass (query projections) shared by profiling and voting.
struct CalibrationStats {
    std::size_t samples = 0;
    std::vector<std::vector<double>> mean_head_erank; // [layer][head]
    std::vector<std::vector<std::int64_t>> votes;     // [layer][head]
    std::vector<double> layer_profile;                // mean over heads and samples
};
CalibrationStats calibrate_heads(const Model& model,
                                 const std::vector<std::vector<int>>& sequences,
                                 const TopK& k_mode, std::size_t threads = 1);

// Mean truncated erank per layer across calibration sequences. Per-head
// sources (query/key/value) average head eranks within a layer.
EntropyProfile profile_layers(const Model& model,
                              const std::vector<std::vector<int>>& sequences,
                              ProfileSource source, const TopK& k_mode,
                              std::size_t threads = 1);

// Boundary before layer i+1 iff the profile drops by strictly more than
// epsilon from layer i. Returns ascending group-start indices.
std::vector<std::size_t> partition_layers(const std::vector<double>& profile, double epsilon);

// Decreasing context sizes with exact endpoints; interior entries step down
// by floor((s_max - s_min) / (G - 1)) tokens from s_max. G = 1 -> {s_max}.
std::vector<std::size_t> layer_schedule(std::size_t groups, std::size_t s_max,
                                        std::size_t s_min);

// Per-sample, per-layer head ranking by per-head query erank; the top half
// (floor) receive one vote. Votes summed over samples.
std::vector<std::vector<std::int64_t>> vote_heads(const Model& model,
                                                  const std::vector<std::vector<int>>& sequences,
                                                  const TopK& k_mode, std::size_t threads = 1);

struct HeadGrouping {
    std::vector<std::size_t> order;    // [rank] -> head, highest first
    std::vector<std::size_t> group_of; // [head] -> group
};
// Sort by (votes desc, mean erank desc, index asc); contiguous chunks become
// groups, earlier groups take the remainder heads.
HeadGrouping group_heads(const std::vector<std::int64_t>& votes,
                         const std::vector<double>& mean_erank, std::size_t m);

// window_h = s_i1 - (h - 1) * delta_s_h for h = 1..m.
std::vector<std::size_t> head_schedule(std::size_t s_i1, std::size_t m,
                                       std::size_t delta_s_h);

// Full calibration workflow. forced_groups overrides the measured partition
// when nonzero.
CompressionPlan build_plan(const Model& model,
                           const std::vector<std::vector<int>>& calibration,
                           const PlanConfig& config,
                           ProfileSource profile_source = ProfileSource::Query,
                           std::size_t forced_groups = 0, std::size_t threads = 1);

void save_plan(const CompressionPlan& plan, const std::string& path);
CompressionPlan load_plan(const std::string& path);
// Checks the stored fingerprint against the model that will run the plan.
CompressionPlan load_plan(const std::string& path, const std::string& expect_fingerprint);

// Per-head decode windows for one layer; PlanMismatch when the plan does not
// cover the model's shape.
std::vector<std::size_t> plan_windows(const CompressionPlan& plan, std::size_t layer,
                                      std::size_t n_heads);

// The k lowest-ranked heads per layer (tail of per_layer_order). BadK when
// k >= head count.
std::vector<std::vector<std::size_t>> remove_heads(const CompressionPlan& plan, std::size_t k);

// Materializes the runtime policy configuration for a plan: per-head decode
// windows, per-layer hidden budgets (group-stage), removed heads (extreme,
// k heads per layer), or the plan-mean uniform window (cumulative baseline).
PolicyConfig policy_from_plan(const CompressionPlan& plan, PolicyKind kind,
                              std::size_t extreme_k = 0);

// Calibration corpus: plain text, one document per line, byte-tokenized.
std::vector<std::vector<int>> load_corpus(const std::string& path);

} // namespace unc
