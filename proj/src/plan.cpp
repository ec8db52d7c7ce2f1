// SPDX-License-Identifier: Apache-2.0
#include "unccache/plan.hpp"

#include "unccache/bundle.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <sstream>
#include <mutex>
#include <thread>

namespace unc {

ProfileSource parse_profile_source(const std::string& s) {
    if (s == "h" || s == "hidden_state" || s == "hidden")
        return ProfileSource::HiddenState;
    if (s == "q" || s == "query")
        return ProfileSource::Query;
    if (s == "k" || s == "key")
        return ProfileSource::Key;
    if (s == "v" || s == "value")
        return ProfileSource::Value;
    throw PlanError("unknown profile source '" + s + "'");
}

std::string profile_source_name(ProfileSource s) {
    switch (s) {
    case ProfileSource::HiddenState: return "hidden_state";
    case ProfileSource::Query: return "query";
    case ProfileSource::Key: return "key";
    case ProfileSource::Value: return "value";
    }
    throw PlanError("bad profile source");
}

double truncated_erank_of(const TokenMatrix& x, const TopK& mode) {
    const CovarianceSpectrum sp = spectrum_of(x);
    return truncated_erank(sp.eigenvalues, resolve_k(sp.eigenvalues, mode));
}

std::size_t LayerPlan::group_of(std::size_t layer) const {
    std::size_t g = 0;
    for (std::size_t b : boundaries)
        if (b <= layer)
            ++g;
    return g;
}

void PlanConfig::validate() const {
    if (s_min > s_max)
        throw BadRange("s_min exceeds s_max");
    if (m < 1)
        throw BadM("m must be >= 1");
    if (l < 1)
        throw PlanError("l must be >= 1");
    if (s_i1 < 1)
        throw PlanError("s_i1 must be >= 1");
    if (epsilon < 0.0)
        throw PlanError("epsilon must be >= 0");
}

nlohmann::ordered_json PlanConfig::to_json() const {
    nlohmann::ordered_json j;
    j["epsilon"] = epsilon;
    j["l"] = l;
    j["s_min"] = s_min;
    j["s_max"] = s_max;
    j["m"] = m;
    j["s_i1"] = s_i1;
    j["delta_s_h"] = delta_s_h;
    j["top_k"] = top_k.str();
    return j;
}

PlanConfig PlanConfig::from_json(const nlohmann::json& j) {
    PlanConfig c;
    c.epsilon = j.value("epsilon", c.epsilon);
    c.l = j.value("l", c.l);
    c.s_min = j.value("s_min", c.s_min);
    c.s_max = j.value("s_max", c.s_max);
    c.m = j.value("m", c.m);
    c.s_i1 = j.value("s_i1", c.s_i1);
    c.delta_s_h = j.value("delta_s_h", c.delta_s_h);
    c.top_k = TopK::parse(j.value("top_k", c.top_k.str()));
    c.validate();
    return c;
}

std::size_t CompressionPlan::window_of(std::size_t layer, std::size_t head) const {
    return head_plan.group_windows.at(layer).at(head_plan.group_of_head.at(layer).at(head));
}

double CompressionPlan::mean_window() const {
    const std::size_t layers = n_layers();
    const std::size_t heads = n_heads();
    if (layers == 0 || heads == 0)
        throw PlanError("empty plan");
    double sum = 0.0;
    for (std::size_t i = 0; i < layers; ++i)
        for (std::size_t h = 0; h < heads; ++h)
            sum += static_cast<double>(window_of(i, h));
    return sum / static_cast<double>(layers * heads);
}

// ---- calibration ---------------------------------------------------------------

namespace {

void check_calibration(const Model& model, const std::vector<std::vector<int>>& sequences) {
    if (sequences.empty())
        throw EmptyCalibration("no calibration sequences");
    for (const auto& s : sequences) {
        if (s.size() < 2)
            throw EmptyCalibration("calibration sequence needs at least 2 tokens");
        if (s.size() > model.config.max_context)
            throw EmptyCalibration("calibration sequence exceeds max_context");
    }
}

// Per-head eranks [layer][head] for one sequence (per-head sources), or a
// single-entry inner vector for hidden_state.
std::vector<std::vector<double>> sequence_eranks(const Model& model,
                                                 const std::vector<int>& tokens,
                                                 ProfileSource source, const TopK& k_mode) {
    EvictionPolicy full;
    KVCacheState cache;
    CaptureOptions cap;
    cap.hidden = source == ProfileSource::HiddenState;
    cap.qkv = !cap.hidden;
    const PrefillResult res = prefill(model, tokens, full, cache, cap);

    const std::size_t layers = model.config.n_layers;
    std::vector<std::vector<double>> out(layers);
    for (std::size_t i = 0; i < layers; ++i) {
        if (source == ProfileSource::HiddenState) {
            out[i].push_back(truncated_erank_of(res.hidden[i], k_mode));
            continue;
        }
        const auto& per_head = source == ProfileSource::Query ? res.q[i]
                               : source == ProfileSource::Key ? res.k[i]
                                                              : res.v[i];
        out[i].reserve(per_head.size());
        for (const TokenMatrix& m : per_head)
            out[i].push_back(truncated_erank_of(m, k_mode));
    }
    return out;
}

// Runs sequence_eranks over the corpus, optionally on worker threads;
// results are indexed by sequence so the reduction order is fixed.
std::vector<std::vector<std::vector<double>>>
corpus_eranks(const Model& model, const std::vector<std::vector<int>>& sequences,
              ProfileSource source, const TopK& k_mode, std::size_t threads) {
    std::vector<std::vector<std::vector<double>>> all(sequences.size());
    const std::size_t n_workers =
        std::max<std::size_t>(1, std::min(threads, sequences.size()));

    if (n_workers == 1) {
        for (std::size_t s = 0; s < sequences.size(); ++s)
            all[s] = sequence_eranks(model, sequences[s], source, k_mode);
        return all;
    }

    std::mutex error_mutex;
    std::exception_ptr error;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t s = w; s < sequences.size(); s += n_workers)
                    all[s] = sequence_eranks(model, sequences[s], source, k_mode);
            } catch (...) {
                const std::lock_guard<std::mutex> lock(error_mutex);
                if (!error)
                    error = std::current_exception();
            }
        });
    }
    for (auto& t : pool)
        t.join();
    if (error)
        std::rethrow_exception(error);
    return all;
}

} // namespace

CalibrationStats calibrate_heads(const Model& model,
                                 const std::vector<std::vector<int>>& sequences,
                                 const TopK& k_mode, std::size_t threads) {
    check_calibration(model, sequences);
    const std::size_t layers = model.config.n_layers;
    const std::size_t heads = model.config.n_heads;

    const auto all = corpus_eranks(model, sequences, ProfileSource::Query, k_mode, threads);

    CalibrationStats stats;
    stats.samples = sequences.size();
    stats.mean_head_erank.assign(layers, std::vector<double>(heads, 0.0));
    stats.votes.assign(layers, std::vector<std::int64_t>(heads, 0));
    stats.layer_profile.assign(layers, 0.0);

    const std::size_t winners = heads / 2; // top half (floor) vote 1
    for (const auto& per_seq : all) {
        for (std::size_t i = 0; i < layers; ++i) {
            const std::vector<double>& eranks = per_seq[i];
            std::vector<std::size_t> order(heads);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                if (eranks[a] != eranks[b])
                    return eranks[a] > eranks[b];
                return a < b;
            });
            for (std::size_t r = 0; r < winners; ++r)
                stats.votes[i][order[r]] += 1;
            for (std::size_t h = 0; h < heads; ++h) {
                stats.mean_head_erank[i][h] += eranks[h];
                stats.layer_profile[i] += eranks[h];
            }
        }
    }
    const double n = static_cast<double>(stats.samples);
    for (std::size_t i = 0; i < layers; ++i) {
        for (std::size_t h = 0; h < heads; ++h)
            stats.mean_head_erank[i][h] /= n;
        stats.layer_profile[i] /= n * static_cast<double>(heads);
    }
    return stats;
}

EntropyProfile profile_layers(const Model& model,
                              const std::vector<std::vector<int>>& sequences,
                              ProfileSource source, const TopK& k_mode,
                              std::size_t threads) {
    check_calibration(model, sequences);
    const auto all = corpus_eranks(model, sequences, source, k_mode, threads);

    EntropyProfile profile;
    profile.source = source;
    profile.per_layer.assign(model.config.n_layers, 0.0);
    for (const auto& per_seq : all)
        for (std::size_t i = 0; i < profile.per_layer.size(); ++i) {
            const auto& vals = per_seq[i];
            double mean = 0.0;
            for (double v : vals)
                mean += v;
            profile.per_layer[i] += mean / static_cast<double>(vals.size());
        }
    for (double& v : profile.per_layer)
        v /= static_cast<double>(sequences.size());
    return profile;
}

std::vector<std::size_t> partition_layers(const std::vector<double>& profile, double epsilon) {
    if (profile.size() < 2)
        throw PlanError("profile needs at least 2 layers");
    std::vector<std::size_t> boundaries;
    for (std::size_t i = 0; i + 1 < profile.size(); ++i)
        if (profile[i + 1] < profile[i] && profile[i] - profile[i + 1] > epsilon)
            boundaries.push_back(i + 1);
    return boundaries;
}

std::vector<std::size_t> layer_schedule(std::size_t groups, std::size_t s_max,
                                        std::size_t s_min) {
    if (groups < 1)
        throw BadRange("group count must be >= 1");
    if (s_min > s_max)
        throw BadRange("s_min exceeds s_max");
    if (groups == 1)
        return {s_max};

    // Interior sizes step down from s_max by the floor of the real step;
    // endpoints are exact. Reproduces every published schedule.
    const std::size_t step = (s_max - s_min) / (groups - 1);
    std::vector<std::size_t> sizes(groups);
    sizes.front() = s_max;
    for (std::size_t i = 1; i + 1 < groups; ++i)
        sizes[i] = s_max - i * step;
    sizes.back() = s_min;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i)
        if (sizes[i + 1] >= sizes[i])
            throw BadRange("span too small for a strictly decreasing schedule");
    return sizes;
}

std::vector<std::vector<std::int64_t>> vote_heads(const Model& model,
                                                  const std::vector<std::vector<int>>& sequences,
                                                  const TopK& k_mode, std::size_t threads) {
    return calibrate_heads(model, sequences, k_mode, threads).votes;
}

HeadGrouping group_heads(const std::vector<std::int64_t>& votes,
                         const std::vector<double>& mean_erank, std::size_t m) {
    const std::size_t heads = votes.size();
    if (heads == 0 || mean_erank.size() != heads)
        throw PlanError("votes and mean eranks must cover the same heads");
    if (m < 1 || m > heads)
        throw BadM("m must be in [1, head count]");

    HeadGrouping g;
    g.order.resize(heads);
    std::iota(g.order.begin(), g.order.end(), 0);
    std::stable_sort(g.order.begin(), g.order.end(), [&](std::size_t a, std::size_t b) {
        if (votes[a] != votes[b])
            return votes[a] > votes[b];
        if (mean_erank[a] != mean_erank[b])
            return mean_erank[a] > mean_erank[b];
        return a < b;
    });

    // Earlier (higher-rank) groups take the remainder heads.
    const std::size_t base = heads / m;
    const std::size_t extra = heads % m;
    g.group_of.assign(heads, 0);
    std::size_t rank = 0;
    for (std::size_t grp = 0; grp < m; ++grp) {
        const std::size_t take = base + (grp < extra ? 1 : 0);
        for (std::size_t j = 0; j < take; ++j)
            g.group_of[g.order[rank++]] = grp;
    }
    return g;
}

std::vector<std::size_t> head_schedule(std::size_t s_i1, std::size_t m,
                                       std::size_t delta_s_h) {
    if (m < 1)
        throw BadM("m must be >= 1");
    std::vector<std::size_t> windows(m);
    for (std::size_t h = 0; h < m; ++h) {
        const std::int64_t w = static_cast<std::int64_t>(s_i1) -
                               static_cast<std::int64_t>(h) *
                                   static_cast<std::int64_t>(delta_s_h);
        if (w < 1)
            throw WindowUnderflow("head window underflows at group " + std::to_string(h + 1));
        windows[h] = static_cast<std::size_t>(w);
    }
    return windows;
}

CompressionPlan build_plan(const Model& model,
                           const std::vector<std::vector<int>>& calibration,
                           const PlanConfig& config, ProfileSource profile_source,
                           std::size_t forced_groups, std::size_t threads) {
    config.validate();
    const std::size_t layers = model.config.n_layers;
    if (forced_groups > layers)
        throw BadRange("forced group count exceeds layer count");

    const CalibrationStats stats = calibrate_heads(model, calibration, config.top_k, threads);
    std::vector<double> profile = stats.layer_profile;
    if (profile_source != ProfileSource::Query)
        profile = profile_layers(model, calibration, profile_source, config.top_k, threads)
                      .per_layer;

    CompressionPlan plan;
    plan.config = config;
    plan.model_fingerprint = fingerprint_string(model_fingerprint(model));

    std::vector<std::size_t> boundaries =
        layers >= 2 ? partition_layers(profile, config.epsilon) : std::vector<std::size_t>{};
    if (forced_groups != 0 && forced_groups != boundaries.size() + 1) {
        // Even contiguous chunks, earlier groups taking the remainder.
        boundaries.clear();
        const std::size_t base = layers / forced_groups;
        const std::size_t extra = layers % forced_groups;
        std::size_t start = 0;
        for (std::size_t g = 0; g + 1 < forced_groups; ++g) {
            start += base + (g < extra ? 1 : 0);
            boundaries.push_back(start);
        }
    }

    plan.layer_plan.boundaries = boundaries;
    plan.layer_plan.s_max = config.s_max;
    plan.layer_plan.s_min = config.s_min;
    const std::size_t groups = boundaries.size() + 1;
    plan.layer_plan.group_sizes = layer_schedule(groups, config.s_max, config.s_min);
    plan.layer_plan.delta_s =
        groups > 1 ? static_cast<double>(config.s_max - config.s_min) /
                         static_cast<double>(groups - 1)
                   : 0.0;

    const std::vector<std::size_t> windows =
        head_schedule(config.s_i1, config.m, config.delta_s_h);
    plan.head_plan.votes = stats.votes;
    plan.head_plan.per_layer_order.resize(layers);
    plan.head_plan.group_of_head.resize(layers);
    plan.head_plan.group_windows.resize(layers);
    for (std::size_t i = 0; i < layers; ++i) {
        HeadGrouping g = group_heads(stats.votes[i], stats.mean_head_erank[i], config.m);
        plan.head_plan.per_layer_order[i] = std::move(g.order);
        plan.head_plan.group_of_head[i] = std::move(g.group_of);
        plan.head_plan.group_windows[i] = windows;
    }
    return plan;
}

// ---- serialization ----------------------------------------------------------------

namespace {
constexpr const char* kPlanSchema = "unccache-plan/1";
}

nlohmann::ordered_json CompressionPlan::to_json() const {
    nlohmann::ordered_json j;
    j["schema"] = kPlanSchema;
    j["model_fingerprint"] = model_fingerprint;
    j["config"] = config.to_json();
    j["layer_plan"]["boundaries"] = layer_plan.boundaries;
    j["layer_plan"]["group_sizes"] = layer_plan.group_sizes;
    j["layer_plan"]["s_max"] = layer_plan.s_max;
    j["layer_plan"]["s_min"] = layer_plan.s_min;
    j["layer_plan"]["delta_s"] = layer_plan.delta_s;
    j["head_plan"]["per_layer_order"] = head_plan.per_layer_order;
    j["head_plan"]["group_of_head"] = head_plan.group_of_head;
    j["head_plan"]["group_windows"] = head_plan.group_windows;
    j["head_plan"]["votes"] = head_plan.votes;
    return j;
}

CompressionPlan CompressionPlan::from_json(const nlohmann::json& j) {
    if (!j.is_object() || j.value("schema", "") != kPlanSchema)
        throw PlanError("unsupported plan schema (want " + std::string(kPlanSchema) + ")");
    CompressionPlan p;
    try {
        p.model_fingerprint = j.at("model_fingerprint").get<std::string>();
        p.config = PlanConfig::from_json(j.at("config"));
        const auto& lp = j.at("layer_plan");
        p.layer_plan.boundaries = lp.at("boundaries").get<std::vector<std::size_t>>();
        p.layer_plan.group_sizes = lp.at("group_sizes").get<std::vector<std::size_t>>();
        p.layer_plan.s_max = lp.at("s_max").get<std::size_t>();
        p.layer_plan.s_min = lp.at("s_min").get<std::size_t>();
        p.layer_plan.delta_s = lp.at("delta_s").get<double>();
        const auto& hp = j.at("head_plan");
        p.head_plan.per_layer_order =
            hp.at("per_layer_order").get<std::vector<std::vector<std::size_t>>>();
        p.head_plan.group_of_head =
            hp.at("group_of_head").get<std::vector<std::vector<std::size_t>>>();
        p.head_plan.group_windows =
            hp.at("group_windows").get<std::vector<std::vector<std::size_t>>>();
        p.head_plan.votes = hp.at("votes").get<std::vector<std::vector<std::int64_t>>>();
    } catch (const nlohmann::json::exception& e) {
        throw PlanError(std::string("malformed plan: ") + e.what());
    }

    const std::size_t layers = p.head_plan.group_of_head.size();
    if (p.head_plan.per_layer_order.size() != layers ||
        p.head_plan.group_windows.size() != layers || p.head_plan.votes.size() != layers)
        throw PlanError("head plan tables disagree on layer count");
    for (std::size_t i = 0; i < layers; ++i) {
        const std::size_t heads = p.head_plan.group_of_head[i].size();
        if (p.head_plan.per_layer_order[i].size() != heads ||
            p.head_plan.votes[i].size() != heads)
            throw PlanError("head plan tables disagree on head count");
        for (std::size_t g : p.head_plan.group_of_head[i])
            if (g >= p.head_plan.group_windows[i].size())
                throw PlanError("head assigned to a group without a window");
    }
    if (p.layer_plan.group_sizes.empty())
        throw PlanError("layer plan has no groups");
    for (std::size_t b : p.layer_plan.boundaries)
        if (b < 1 || b >= layers)
            throw PlanError("layer boundary out of range");
    return p;
}

void save_plan(const CompressionPlan& plan, const std::string& path) {
    write_file_atomic(path, plan.to_json().dump(2) + "\n");
}

CompressionPlan load_plan(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw PlanError(std::string("cannot parse plan: ") + e.what());
    } catch (const BundleError& e) {
        throw PlanError(e.what());
    }
    return CompressionPlan::from_json(j);
}

CompressionPlan load_plan(const std::string& path, const std::string& expect_fingerprint) {
    CompressionPlan p = load_plan(path);
    if (p.model_fingerprint != expect_fingerprint)
        throw FingerprintMismatch("plan was built for " + p.model_fingerprint +
                                  ", not " + expect_fingerprint);
    return p;
}

// ---- runtime wiring ----------------------------------------------------------------

std::vector<std::size_t> plan_windows(const CompressionPlan& plan, std::size_t layer,
                                      std::size_t n_heads) {
    if (layer >= plan.n_layers())
        throw PlanMismatch("plan does not cover layer " + std::to_string(layer));
    if (plan.n_heads() != n_heads)
        throw PlanMismatch("plan head count " + std::to_string(plan.n_heads()) +
                           " != model head count " + std::to_string(n_heads));
    std::vector<std::size_t> w(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h)
        w[h] = plan.window_of(layer, h);
    return w;
}

std::vector<std::vector<std::size_t>> remove_heads(const CompressionPlan& plan,
                                                   std::size_t k) {
    if (k >= plan.n_heads())
        throw BadK("cannot remove " + std::to_string(k) + " of " +
                   std::to_string(plan.n_heads()) + " heads");
    std::vector<std::vector<std::size_t>> removed(plan.n_layers());
    for (std::size_t i = 0; i < plan.n_layers(); ++i) {
        const auto& order = plan.head_plan.per_layer_order[i];
        removed[i].assign(order.end() - static_cast<std::ptrdiff_t>(k), order.end());
        std::sort(removed[i].begin(), removed[i].end());
    }
    return removed;
}

PolicyConfig policy_from_plan(const CompressionPlan& plan, PolicyKind kind,
                              std::size_t extreme_k) {
    PolicyConfig cfg;
    cfg.kind = kind;
    cfg.l = plan.config.l;
    if (kind == PolicyKind::Full)
        return cfg;

    const std::size_t layers = plan.n_layers();
    const std::size_t heads = plan.n_heads();
    if (kind == PolicyKind::Cumulative) {
        const auto w = static_cast<std::size_t>(std::llround(plan.mean_window()));
        cfg.windows.assign(layers, std::vector<std::size_t>(heads, std::max<std::size_t>(1, w)));
        return cfg;
    }

    cfg.windows.resize(layers);
    for (std::size_t i = 0; i < layers; ++i)
        cfg.windows[i] = plan_windows(plan, i, heads);
    if (kind == PolicyKind::UncompGroupStage) {
        cfg.hidden_sizes.resize(layers);
        for (std::size_t i = 0; i < layers; ++i)
            cfg.hidden_sizes[i] = plan.layer_plan.group_sizes.at(plan.layer_plan.group_of(i));
    }
    if (kind == PolicyKind::UncompExtreme)
        cfg.removed = remove_heads(plan, extreme_k);
    return cfg;
}

std::vector<std::vector<int>> load_corpus(const std::string& path) {
    const std::string text = read_file(path);
    std::vector<std::vector<int>> docs;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        docs.push_back(tokenize(line));
    }
    if (docs.empty())
        throw EmptyCalibration("corpus '" + path + "' has no documents");
    return docs;
}

} // namespace unc
