// SPDX-License-Identifier: Apache-2.0
// Evaluation metrics: compression-rate arithmetic, retention, greedy-agreement
// probes, heavy-hitter/recent trend analysis, and the serialized run report.
#pragma once

#include "unccache/model.hpp"
#include "unccache/plan.hpp"
#include "unccache/policy.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace unc {

struct MetricsError : std::runtime_error {
    explicit MetricsError(const std::string& m) : std::runtime_error(m) {}
};

// Heavy-hitter budget H plus recent budget R exceeds the sequence length.
struct BadRatio : MetricsError {
    explicit BadRatio(const std::string& m) : MetricsError(m) {}
};

// Retained share of the full context, in percent. The window overload
// averages over every (layer, head) window first.
double compression_rate(double mean_window, std::size_t full_context);
double compression_rate(const std::vector<std::vector<std::size_t>>& windows,
                        std::size_t full_context);

// Fixed two-decimal percent with ties rounded away from zero, e.g. 9.375
// formats as "9.38" on every platform.
std::string format_percent(double pct);

// Mean over heads of cached rows divided by total_rows, one value per layer.
std::vector<double> per_layer_retention(const KVCacheState& cache,
                                        std::size_t total_rows);

// Number of leading greedy decode steps that match a full-cache run of the
// same prompt. The policy must be fresh (not bound to a previous cache).
std::size_t agreement_prefix(const Model& model, const std::vector<int>& tokens,
                             EvictionPolicy& policy, std::size_t steps);

// Mean matched fraction over probes; a fresh PolicyRuntime is built per probe.
double agreement_probe(const Model& model,
                       const std::vector<std::vector<int>>& probes,
                       const PolicyConfig& config, std::size_t steps);

// One heavy-hitter/recent retention ratio: keep the last r rows plus the h
// rows with the largest recent attention mass.
struct TrendRatio {
    std::size_t h = 0;
    std::size_t r = 0;
};

struct TrendEntry {
    std::string label; // "<h>/<r>"
    std::size_t h = 0;
    std::size_t r = 0;
    double pearson = 0.0;
    std::vector<double> trend; // per-layer truncated effective rank
};

struct TrendResult {
    std::vector<double> full_trend; // all rows retained
    std::vector<TrendEntry> by_ratio;
};

// Runs a full-cache prefill once, then for each ratio rebuilds the per-layer
// key matrix from the selected rows and reports how well its depth trend
// correlates with the full trend. Selecting every row reproduces the full
// trend and correlates at exactly 1.0.
TrendResult hr_trend_analysis(const Model& model, const std::vector<int>& tokens,
                              const std::vector<TrendRatio>& ratios,
                              const TopK& mode);

struct TimingStats {
    double prefill_ms = 0.0;         // mean per probe
    double decode_ms_per_token = 0.0; // mean per generated token
};

struct MetricsReport {
    std::string policy;
    std::string model_fingerprint;
    std::uint64_t seed = 0;
    double compression_rate_pct = 100.0;
    double agreement = 1.0;
    std::vector<double> per_layer_retention;
    std::vector<double> full_trend;
    std::vector<TrendEntry> ratios;
    std::size_t peak_rows = 0;
    std::size_t peak_kv_bytes = 0;
    bool has_timing = false;
    TimingStats timing;

    nlohmann::ordered_json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
};

void save_report(const MetricsReport& report, const std::string& path);
MetricsReport load_report(const std::string& path);

struct RunSpec {
    PolicyKind kind = PolicyKind::Full;
    std::size_t extreme_k = 0;
    std::vector<std::vector<int>> probes; // at least one
    std::vector<TrendRatio> ratios;
    std::size_t decode_steps = 16;
    TopK top_k = TopK::elbow();
    bool timing = false;
    std::uint64_t seed = 0; // recorded in the report only
};

// Full experiment: agreement over all probes, retention/peak from the probe
// runs, trend analysis on the first probe. plan may be null only for Full.
MetricsReport run_experiment(const Model& model, const CompressionPlan* plan,
                             const RunSpec& spec);

// Two-column CSV ("layer,erank") with full double precision.
void write_erank_csv(const std::string& path, const std::vector<double>& per_layer);

} // namespace unc
