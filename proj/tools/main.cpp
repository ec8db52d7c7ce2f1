// SPDX-License-Identifier: Apache-2.0
// Command-line workbench: generate seeded models, calibrate compression
// plans, run policy experiments, compare reports, and dump entropy profiles.
// Human-readable tables go to stdout (plain text, so NO_COLOR always holds);
// machine artifacts are written only to the requested --out paths.
// Exit codes: 0 success, 2 usage, 3 calibration failure, 4 runtime failure.
#include <CLI11.hpp>

#include "unccache/bundle.hpp"
#include "unccache/copy_model.hpp"
#include "unccache/entropy.hpp"
#include "unccache/kernels.hpp"
#include "unccache/metrics.hpp"
#include "unccache/model.hpp"
#include "unccache/plan.hpp"
#include "unccache/policy.hpp"

#include <json.hpp>

#include <cstdio>
#include <string>
#include <vector>

using namespace unc;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitCalibration = 3;
constexpr int kExitRuntime = 4;

int fail(int code, const std::string& msg) {
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    return code;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i)
        out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

struct GenArgs {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int cmd_gen_model(const GenArgs& args) {
    try {
        ModelConfig cfg;
        if (!args.config.empty())
            cfg = ModelConfig::from_json(nlohmann::json::parse(read_file(args.config)));
        if (args.seed_set)
            cfg.seed = args.seed;
        const Model model = init_weights(cfg);
        save_model(model, args.out);
        const std::size_t d = cfg.d_model();
        const std::size_t params = kVocabSize * d * 2 + d +
                                   cfg.n_layers * (4 * d * d + 2 * cfg.d_ff * d + 2 * d);
        std::printf("model written to %s\n", args.out.c_str());
        std::printf("  %-14s %zu layers, %zu heads, d_head %zu, d_ff %zu\n", "shape",
                    cfg.n_layers, cfg.n_heads, cfg.d_head, cfg.d_ff);
        std::printf("  %-14s %zu\n", "max context", cfg.max_context);
        std::printf("  %-14s %llu\n", "seed", static_cast<unsigned long long>(cfg.seed));
        std::printf("  %-14s %zu\n", "parameters", params);
        std::printf("  %-14s %s\n", "fingerprint",
                    fingerprint_string(model_fingerprint(model)).c_str());
        return 0;
    } catch (const std::exception& e) {
        return fail(kExitRuntime, e.what());
    }
}

struct CalibrateArgs {
    std::string model;
    std::string corpus;
    std::string out;
    double epsilon = 1.0;
    std::size_t l = 8;
    std::size_t smin = 1536;
    std::size_t smax = 4096;
    std::size_t m = 2;
    std::size_t si1 = 512;
    std::size_t dsh = 256;
    std::size_t groups = 0;
    std::string topk = "elbow";
    std::string source = "query";
    std::size_t threads = 1;
};

int cmd_calibrate(const CalibrateArgs& args) {
    Model model;
    std::vector<std::vector<int>> corpus;
    try {
        model = load_model(args.model);
    } catch (const std::exception& e) {
        return fail(kExitRuntime, e.what());
    }
    try {
        PlanConfig config;
        config.epsilon = args.epsilon;
        config.l = args.l;
        config.s_min = args.smin;
        config.s_max = args.smax;
        config.m = args.m;
        config.s_i1 = args.si1;
        config.delta_s_h = args.dsh;
        config.top_k = TopK::parse(args.topk);
        config.validate();
        const ProfileSource source = parse_profile_source(args.source);

        corpus = load_corpus(args.corpus);
        const CompressionPlan plan =
            build_plan(model, corpus, config, source, args.groups, args.threads);
        save_plan(plan, args.out);

        std::printf("plan written to %s\n", args.out.c_str());
        std::printf("  %-14s %zu documents, source %s, top-k %s\n", "calibration",
                    corpus.size(), profile_source_name(source).c_str(),
                    config.top_k.str().c_str());
        std::printf("  %-14s %s\n", "fingerprint", plan.model_fingerprint.c_str());
        std::printf("  %-14s %.2f tokens\n", "mean window", plan.mean_window());
        std::printf("  %-14s %s%%\n", "rate",
                    format_percent(compression_rate(plan.mean_window(),
                                                    plan.layer_plan.s_max))
                        .c_str());
        std::printf("\nlayer  group  size   windows       head order\n");
        for (std::size_t i = 0; i < plan.n_layers(); ++i) {
            const std::size_t g = plan.layer_plan.group_of(i);
            std::printf("%-6zu %-6zu %-6zu %-13s %s\n", i, g,
                        plan.layer_plan.group_sizes[g],
                        join_sizes(plan.head_plan.group_windows[i]).c_str(),
                        join_sizes(plan.head_plan.per_layer_order[i]).c_str());
        }
        return 0;
    } catch (const BundleError& e) {
        return fail(kExitRuntime, e.what());
    } catch (const std::exception& e) {
        return fail(kExitCalibration, e.what());
    }
}

struct RunArgs {
    std::string config;
    bool timing = false;
};

int cmd_run(const RunArgs& args) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(args.config));
    } catch (const std::exception& e) {
        return fail(kExitRuntime, e.what());
    }

    std::string model_path, plan_path, policy_name, probes_path, out_path;
    RunSpec spec;
    try {
        static const std::vector<std::string> known = {
            "model", "plan",      "policy", "seed",         "probes", "out",
            "extreme_k", "ratios", "timing", "decode_steps", "top_k"};
        for (const auto& [key, value] : j.items()) {
            (void)value;
            bool ok = false;
            for (const auto& k : known)
                ok = ok || k == key;
            if (!ok)
                throw std::runtime_error("unknown run config key: " + key);
        }
        model_path = j.at("model").get<std::string>();
        policy_name = j.at("policy").get<std::string>();
        probes_path = j.at("probes").get<std::string>();
        out_path = j.at("out").get<std::string>();
        plan_path = j.value("plan", std::string{});
        spec.kind = parse_policy_kind(policy_name);
        spec.seed = j.value("seed", std::uint64_t{0});
        spec.extreme_k = j.value("extreme_k", std::size_t{0});
        spec.decode_steps = j.value("decode_steps", std::size_t{16});
        spec.timing = j.value("timing", false) || args.timing;
        if (j.contains("top_k"))
            spec.top_k = TopK::parse(j.at("top_k").get<std::string>());
        if (j.contains("ratios"))
            for (const auto& pair : j.at("ratios"))
                spec.ratios.push_back({pair.at(0).get<std::size_t>(),
                                       pair.at(1).get<std::size_t>()});
    } catch (const std::exception& e) {
        return fail(kExitUsage, e.what());
    }

    try {
        const Model model = load_model(model_path);
        CompressionPlan plan;
        const bool has_plan = !plan_path.empty();
        if (has_plan)
            plan = load_plan(plan_path,
                             fingerprint_string(model_fingerprint(model)));
        spec.probes = load_corpus(probes_path);

        const MetricsReport report =
            run_experiment(model, has_plan ? &plan : nullptr, spec);
        save_report(report, out_path);

        std::printf("report written to %s\n", out_path.c_str());
        std::printf("  %-14s %s\n", "policy", report.policy.c_str());
        std::printf("  %-14s %s%%\n", "rate",
                    format_percent(report.compression_rate_pct).c_str());
        std::printf("  %-14s %.4f over %zu probes x %zu steps\n", "agreement",
                    report.agreement, spec.probes.size(), spec.decode_steps);
        std::printf("  %-14s %zu rows (%zu bytes)\n", "peak cache",
                    report.peak_rows, report.peak_kv_bytes);
        if (report.has_timing)
            std::printf("  %-14s prefill %.3f ms, decode %.4f ms/token\n", "timing",
                        report.timing.prefill_ms, report.timing.decode_ms_per_token);
        if (!report.ratios.empty()) {
            std::printf("\nratio      pearson\n");
            for (const TrendEntry& e : report.ratios)
                std::printf("%-10s %.6f\n", e.label.c_str(), e.pearson);
        }
        return 0;
    } catch (const std::exception& e) {
        return fail(kExitRuntime, e.what());
    }
}

int cmd_compare(const std::vector<std::string>& paths) {
    try {
        std::printf("%-28s %-20s %9s %9s %9s %10s\n", "report", "policy", "rate",
                    "agree", "pearson", "peak rows");
        for (const std::string& path : paths) {
            const MetricsReport r = load_report(path);
            double mean_pearson = 0.0;
            for (const TrendEntry& e : r.ratios)
                mean_pearson += e.pearson;
            if (!r.ratios.empty())
                mean_pearson /= static_cast<double>(r.ratios.size());
            std::printf("%-28s %-20s %8s%% %9.4f %9.4f %10zu\n", path.c_str(),
                        r.policy.c_str(),
                        format_percent(r.compression_rate_pct).c_str(), r.agreement,
                        r.ratios.empty() ? 0.0 : mean_pearson, r.peak_rows);
        }
        return 0;
    } catch (const std::exception& e) {
        return fail(kExitRuntime, e.what());
    }
}

struct EntropyArgs {
    std::string model;
    std::string text;
    std::string out;
    std::string eigs_out;
    std::string source = "query";
    std::string topk = "elbow";
};

int cmd_entropy(const EntropyArgs& args) {
    try {
        const Model model = load_model(args.model);
        const ProfileSource source = parse_profile_source(args.source);
        const TopK mode = TopK::parse(args.topk);
        const std::vector<int> tokens = tokenize(args.text);

        const EntropyProfile profile =
            profile_layers(model, {tokens}, source, mode);
        write_erank_csv(args.out, profile.per_layer);

        // Per-head eigenvalue dump (head 0 when profiling the hidden state).
        EvictionPolicy full;
        KVCacheState cache;
        CaptureOptions capture;
        capture.hidden = source == ProfileSource::HiddenState;
        capture.qkv = !capture.hidden;
        const PrefillResult res = prefill(model, tokens, full, cache, capture);
        std::string csv = "layer,head,index,eigenvalue\n";
        char line[96];
        for (std::size_t i = 0; i < model.config.n_layers; ++i) {
            std::vector<const TokenMatrix*> mats;
            if (source == ProfileSource::HiddenState) {
                mats.push_back(&res.hidden[i]);
            } else {
                const auto& per_head = source == ProfileSource::Query ? res.q
                                       : source == ProfileSource::Key ? res.k
                                                                      : res.v;
                for (const TokenMatrix& m : per_head[i])
                    mats.push_back(&m);
            }
            for (std::size_t h = 0; h < mats.size(); ++h) {
                const CovarianceSpectrum spectrum = spectrum_of(*mats[h]);
                for (std::size_t idx = 0; idx < spectrum.eigenvalues.size(); ++idx) {
                    std::snprintf(line, sizeof(line), "%zu,%zu,%zu,%.17g\n", i, h,
                                  idx, spectrum.eigenvalues[idx]);
                    csv += line;
                }
            }
        }
        const std::string eigs_path =
            args.eigs_out.empty() ? args.out + ".eigs.csv" : args.eigs_out;
        write_file_atomic(eigs_path, csv);

        std::printf("profile written to %s (eigenvalues: %s)\n", args.out.c_str(),
                    eigs_path.c_str());
        std::printf("  source %s, top-k %s, %zu tokens\n\n",
                    profile_source_name(source).c_str(), mode.str().c_str(),
                    tokens.size());
        std::printf("layer  erank\n");
        for (std::size_t i = 0; i < profile.per_layer.size(); ++i)
            std::printf("%-6zu %.6f\n", i, profile.per_layer[i]);
        return 0;
    } catch (const std::exception& e) {
        return fail(kExitRuntime, e.what());
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"entropy-guided kv-cache compression workbench"};
    app.require_subcommand(1);

    std::string kernels = "auto";
    app.add_option("--kernels", kernels, "compute lane: auto, scalar, avx2")
        ->check(CLI::IsMember({"auto", "scalar", "avx2"}));

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-model", "generate a seeded model bundle");
    gen_cmd->add_option("--config", gen.config, "model config json path");
    auto* gen_seed = gen_cmd->add_option("--seed", gen.seed, "override the config seed");
    gen_cmd->add_option("--out", gen.out, "output bundle path")->required();

    CalibrateArgs cal;
    auto* cal_cmd = app.add_subcommand(
        "calibrate", "measure entropy profiles and write a compression plan");
    cal_cmd->alias("plan");
    cal_cmd->add_option("--model", cal.model, "model bundle path")->required();
    cal_cmd->add_option("--corpus", cal.corpus, "calibration text, one document per line")
        ->required();
    cal_cmd->add_option("--out", cal.out, "plan json path")->required();
    cal_cmd->add_option("--epsilon", cal.epsilon, "layer partition threshold");
    cal_cmd->add_option("--l", cal.l, "recent attention window");
    cal_cmd->add_option("--smin", cal.smin, "smallest layer budget");
    cal_cmd->add_option("--smax", cal.smax, "largest layer budget");
    cal_cmd->add_option("--m", cal.m, "head groups per layer");
    cal_cmd->add_option("--si1", cal.si1, "window of the top head group");
    cal_cmd->add_option("--dsh", cal.dsh, "window step between head groups");
    cal_cmd->add_option("--groups", cal.groups, "force the layer group count");
    cal_cmd->add_option("--topk", cal.topk, "truncation: elbow, all, fixed:<k>");
    cal_cmd->add_option("--source", cal.source, "profile source: hidden, query, key, value");
    cal_cmd->add_option("--threads", cal.threads, "calibration worker threads");

    RunArgs run;
    auto* run_cmd = app.add_subcommand("run", "run a policy experiment from a json config");
    run_cmd->add_option("--config", run.config, "run config json path")->required();
    run_cmd->add_flag("--timing", run.timing, "measure wall-clock timings");

    std::vector<std::string> compare_paths;
    auto* cmp_cmd = app.add_subcommand("compare", "tabulate saved reports side by side");
    cmp_cmd->add_option("--reports", compare_paths, "report json paths")
        ->required()
        ->expected(1, -1);

    EntropyArgs ent;
    auto* ent_cmd =
        app.add_subcommand("entropy", "dump per-layer effective ranks and spectra");
    ent_cmd->add_option("--model", ent.model, "model bundle path")->required();
    ent_cmd->add_option("--text", ent.text, "input text")->required();
    ent_cmd->add_option("--out", ent.out, "erank csv path")->required();
    ent_cmd->add_option("--eigs-out", ent.eigs_out, "eigenvalue csv path");
    ent_cmd->add_option("--source", ent.source, "profile source: hidden, query, key, value");
    ent_cmd->add_option("--topk", ent.topk, "truncation: elbow, all, fixed:<k>");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    if (!kern::select(kern::parse_lane(kernels)))
        return fail(kExitRuntime, "kernel lane '" + kernels + "' is not available");

    gen.seed_set = gen_seed->count() > 0;
    if (gen_cmd->parsed())
        return cmd_gen_model(gen);
    if (cal_cmd->parsed())
        return cmd_calibrate(cal);
    if (run_cmd->parsed())
        return cmd_run(run);
    if (cmp_cmd->parsed())
        return cmd_compare(compare_paths);
    if (ent_cmd->parsed())
        return cmd_entropy(ent);
    return kExitUsage;
}
