// SPDX-License-Identifier: Apache-2.0
#include "unccache/metrics.hpp"

#include "unccache/bundle.hpp"
#include "unccache/entropy.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <utility>

namespace unc {

namespace {

// Full-cache policy whose recent-attention window is widened so the prefill
// trace holds enough rows for every requested recent budget.
struct TracePolicy final : EvictionPolicy {
    std::size_t l;
    explicit TracePolicy(std::size_t l_) : l(l_) {}
    std::size_t recent_window() const override { return l; }
};

struct GreedyRun {
    std::vector<int> generated;
    KVCacheState cache;
};

// Prefill plus `steps` greedy tokens; every generated token is appended so
// the final cache covers prompt + steps rows.
GreedyRun run_greedy(const Model& model, const std::vector<int>& prompt,
                     EvictionPolicy& policy, std::size_t steps) {
    GreedyRun run;
    std::vector<float> logits =
        prefill(model, prompt, policy, run.cache).logits;
    for (std::size_t s = 0; s < steps; ++s) {
        const int tok = argmax_token(logits);
        run.generated.push_back(tok);
        logits = decode_step(model, run.cache, policy, tok);
    }
    return run;
}

std::size_t match_prefix(const std::vector<int>& a, const std::vector<int>& b) {
    std::size_t n = 0;
    while (n < a.size() && n < b.size() && a[n] == b[n])
        ++n;
    return n;
}

// Keys of the selected rows, one row per position, heads concatenated.
TokenMatrix concat_keys(const PrefillResult& res, const ModelConfig& cfg,
                        std::size_t layer, const std::vector<std::size_t>& rows) {
    TokenMatrix m;
    m.rows = rows.size();
    m.cols = cfg.d_model();
    m.data.resize(m.rows * m.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t h = 0; h < cfg.n_heads; ++h)
            std::memcpy(m.row(i) + h * cfg.d_head,
                        res.k[layer][h].row(rows[i]),
                        cfg.d_head * sizeof(float));
    return m;
}

} // namespace

double compression_rate(double mean_window, std::size_t full_context) {
    if (full_context == 0)
        throw MetricsError("full context must be >= 1");
    if (!(mean_window >= 0.0))
        throw MetricsError("mean window must be non-negative");
    return mean_window / static_cast<double>(full_context) * 100.0;
}

double compression_rate(const std::vector<std::vector<std::size_t>>& windows,
                        std::size_t full_context) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& layer : windows) {
        for (std::size_t w : layer)
            sum += static_cast<double>(w);
        count += layer.size();
    }
    if (count == 0)
        throw MetricsError("no windows to average");
    return compression_rate(sum / static_cast<double>(count), full_context);
}

std::string format_percent(double pct) {
    // Round to cents explicitly; printf tie behavior is not portable.
    const double cents = static_cast<double>(std::llround(pct * 100.0));
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", cents / 100.0);
    return buf;
}

std::vector<double> per_layer_retention(const KVCacheState& cache,
                                        std::size_t total_rows) {
    if (total_rows == 0)
        throw MetricsError("total rows must be >= 1");
    std::vector<double> out;
    out.reserve(cache.layers.size());
    for (const LayerCache& layer : cache.layers) {
        if (layer.heads.empty())
            throw MetricsError("layer without heads");
        double mean = 0.0;
        for (const HeadCache& head : layer.heads)
            mean += static_cast<double>(std::min(head.len(), total_rows)) /
                    static_cast<double>(total_rows);
        out.push_back(mean / static_cast<double>(layer.heads.size()));
    }
    return out;
}

std::size_t agreement_prefix(const Model& model, const std::vector<int>& tokens,
                             EvictionPolicy& policy, std::size_t steps) {
    EvictionPolicy full;
    const GreedyRun base = run_greedy(model, tokens, full, steps);
    const GreedyRun cand = run_greedy(model, tokens, policy, steps);
    return match_prefix(base.generated, cand.generated);
}

double agreement_probe(const Model& model,
                       const std::vector<std::vector<int>>& probes,
                       const PolicyConfig& config, std::size_t steps) {
    if (probes.empty())
        throw MetricsError("no probes");
    if (steps == 0)
        throw MetricsError("steps must be >= 1");
    std::size_t matched = 0;
    for (const auto& probe : probes) {
        PolicyRuntime policy(config);
        matched += agreement_prefix(model, probe, policy, steps);
    }
    return static_cast<double>(matched) /
           static_cast<double>(probes.size() * steps);
}

TrendResult hr_trend_analysis(const Model& model, const std::vector<int>& tokens,
                              const std::vector<TrendRatio>& ratios,
                              const TopK& mode) {
    const std::size_t n = tokens.size();
    std::size_t max_r = 1;
    for (const TrendRatio& ratio : ratios) {
        if (ratio.h + ratio.r > n)
            throw BadRatio("h + r exceeds the sequence length");
        max_r = std::max(max_r, ratio.r);
    }

    TracePolicy policy(max_r);
    KVCacheState cache;
    CaptureOptions capture;
    capture.qkv = true;
    const PrefillResult res = prefill(model, tokens, policy, cache, capture);
    const std::size_t layers = model.config.n_layers;
    const std::size_t heads = model.config.n_heads;

    TrendResult result;
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    result.full_trend.reserve(layers);
    for (std::size_t i = 0; i < layers; ++i)
        result.full_trend.push_back(
            truncated_erank_of(concat_keys(res, model.config, i, all), mode));

    for (const TrendRatio& ratio : ratios) {
        TrendEntry entry;
        entry.h = ratio.h;
        entry.r = ratio.r;
        entry.label = std::to_string(ratio.h) + "/" + std::to_string(ratio.r);
        entry.trend.reserve(layers);
        for (std::size_t i = 0; i < layers; ++i) {
            // Attention mass per position over the last r trace rows, summed
            // across heads. Full cache: slot index equals position.
            std::vector<double> mass(n, 0.0);
            for (std::size_t h = 0; h < heads; ++h) {
                const auto& rows = res.trace.layers[i][h].rows;
                const std::size_t take = std::min(ratio.r, rows.size());
                for (std::size_t t = rows.size() - take; t < rows.size(); ++t)
                    for (std::size_t j = 0; j < rows[t].size(); ++j)
                        mass[j] += static_cast<double>(rows[t][j]);
            }
            std::vector<std::size_t> body(n - ratio.r);
            std::iota(body.begin(), body.end(), 0);
            std::sort(body.begin(), body.end(),
                      [&](std::size_t a, std::size_t b) {
                          return mass[a] != mass[b] ? mass[a] > mass[b] : a > b;
                      });
            body.resize(ratio.h);
            for (std::size_t p = n - ratio.r; p < n; ++p)
                body.push_back(p);
            std::sort(body.begin(), body.end());
            entry.trend.push_back(
                truncated_erank_of(concat_keys(res, model.config, i, body), mode));
        }
        entry.pearson = pearson(result.full_trend, entry.trend);
        result.by_ratio.push_back(std::move(entry));
    }
    return result;
}

nlohmann::ordered_json MetricsReport::to_json() const {
    nlohmann::ordered_json j;
    j["schema"] = "unccache-report/1";
    j["policy"] = policy;
    j["model_fingerprint"] = model_fingerprint;
    j["seed"] = seed;
    j["compression_rate_pct"] = compression_rate_pct;
    j["compression_rate_display"] = format_percent(compression_rate_pct);
    j["agreement"] = agreement;
    j["per_layer_retention"] = per_layer_retention;
    j["full_trend"] = full_trend;
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const TrendEntry& e : ratios) {
        nlohmann::ordered_json r;
        r["label"] = e.label;
        r["h"] = e.h;
        r["r"] = e.r;
        r["pearson"] = e.pearson;
        r["trend"] = e.trend;
        arr.push_back(std::move(r));
    }
    j["ratios"] = std::move(arr);
    j["peak_rows"] = peak_rows;
    j["peak_kv_bytes"] = peak_kv_bytes;
    if (has_timing) {
        j["timing"]["prefill_ms"] = timing.prefill_ms;
        j["timing"]["decode_ms_per_token"] = timing.decode_ms_per_token;
    }
    return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    try {
        if (j.at("schema").get<std::string>() != "unccache-report/1")
            throw MetricsError("unsupported report schema");
        MetricsReport r;
        r.policy = j.at("policy").get<std::string>();
        r.model_fingerprint = j.at("model_fingerprint").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.compression_rate_pct = j.at("compression_rate_pct").get<double>();
        r.agreement = j.at("agreement").get<double>();
        r.per_layer_retention =
            j.at("per_layer_retention").get<std::vector<double>>();
        r.full_trend = j.at("full_trend").get<std::vector<double>>();
        for (const auto& e : j.at("ratios")) {
            TrendEntry entry;
            entry.label = e.at("label").get<std::string>();
            entry.h = e.at("h").get<std::size_t>();
            entry.r = e.at("r").get<std::size_t>();
            entry.pearson = e.at("pearson").get<double>();
            entry.trend = e.at("trend").get<std::vector<double>>();
            r.ratios.push_back(std::move(entry));
        }
        r.peak_rows = j.at("peak_rows").get<std::size_t>();
        r.peak_kv_bytes = j.at("peak_kv_bytes").get<std::size_t>();
        if (j.contains("timing")) {
            r.has_timing = true;
            r.timing.prefill_ms = j.at("timing").at("prefill_ms").get<double>();
            r.timing.decode_ms_per_token =
                j.at("timing").at("decode_ms_per_token").get<double>();
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw MetricsError(std::string("malformed report: ") + e.what());
    }
}

void save_report(const MetricsReport& report, const std::string& path) {
    write_file_atomic(path, report.to_json().dump(2) + "\n");
}

MetricsReport load_report(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw MetricsError(std::string("cannot parse report: ") + e.what());
    }
    return MetricsReport::from_json(j);
}

MetricsReport run_experiment(const Model& model, const CompressionPlan* plan,
                             const RunSpec& spec) {
    if (spec.probes.empty())
        throw MetricsError("no probes");
    if (spec.decode_steps == 0)
        throw MetricsError("decode steps must be >= 1");
    const std::string fp = fingerprint_string(model_fingerprint(model));
    if (plan && plan->model_fingerprint != fp)
        throw FingerprintMismatch("plan was calibrated for a different model");
    if (!plan && spec.kind != PolicyKind::Full)
        throw MetricsError("non-full policies need a plan");

    PolicyConfig config;
    if (plan) {
        config = policy_from_plan(*plan, spec.kind, spec.extreme_k);
    } else {
        config.kind = PolicyKind::Full;
    }

    MetricsReport report;
    report.policy = policy_kind_name(spec.kind);
    report.model_fingerprint = fp;
    report.seed = spec.seed;
    report.compression_rate_pct =
        config.windows.empty()
            ? 100.0
            : compression_rate(config.windows, plan->layer_plan.s_max);

    std::size_t matched = 0;
    for (std::size_t p = 0; p < spec.probes.size(); ++p) {
        EvictionPolicy full;
        const GreedyRun base =
            run_greedy(model, spec.probes[p], full, spec.decode_steps);
        PolicyRuntime policy(config);
        const GreedyRun cand =
            run_greedy(model, spec.probes[p], policy, spec.decode_steps);
        matched += match_prefix(base.generated, cand.generated);
        report.peak_rows = std::max(report.peak_rows, cand.cache.peak_rows);
        if (p == 0)
            report.per_layer_retention = per_layer_retention(
                cand.cache, spec.probes[0].size() + spec.decode_steps);
    }
    report.agreement = static_cast<double>(matched) /
                       static_cast<double>(spec.probes.size() * spec.decode_steps);
    report.peak_kv_bytes =
        report.peak_rows * model.config.d_head * 2 * sizeof(float);

    TrendResult trend =
        hr_trend_analysis(model, spec.probes[0], spec.ratios, spec.top_k);
    report.full_trend = std::move(trend.full_trend);
    report.ratios = std::move(trend.by_ratio);

    if (spec.timing) {
        // The metric runs above double as warm-up.
        using clock = std::chrono::steady_clock;
        double prefill_ms = 0.0;
        double decode_ms = 0.0;
        for (const auto& probe : spec.probes) {
            PolicyRuntime policy(config);
            KVCacheState cache;
            const auto t0 = clock::now();
            std::vector<float> logits = prefill(model, probe, policy, cache).logits;
            const auto t1 = clock::now();
            for (std::size_t s = 0; s < spec.decode_steps; ++s)
                logits = decode_step(model, cache, policy, argmax_token(logits));
            const auto t2 = clock::now();
            prefill_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
            decode_ms += std::chrono::duration<double, std::milli>(t2 - t1).count();
        }
        report.has_timing = true;
        report.timing.prefill_ms = prefill_ms / static_cast<double>(spec.probes.size());
        report.timing.decode_ms_per_token =
            decode_ms / static_cast<double>(spec.probes.size() * spec.decode_steps);
    }
    return report;
}

void write_erank_csv(const std::string& path, const std::vector<double>& per_layer) {
    std::string csv = "layer,erank\n";
    char buf[80];
    for (std::size_t i = 0; i < per_layer.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, per_layer[i]);
        csv += buf;
    }
    write_file_atomic(path, csv);
}

} // namespace unc
