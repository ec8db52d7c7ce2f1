// SPDX-License-Identifier: Apache-2.0
// Published schedule arithmetic frozen exactly, partition/grouping laws,
// calibration against entropy-core recomputation, and plan serialization.
#include <doctest.h>

#include "unccache/plan.hpp"

#include "unccache/bundle.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <vector>

using namespace unc;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 4;
    c.n_heads = 4;
    c.d_head = 8;
    c.d_ff = 24;
    c.max_context = 64;
    c.seed = 11;
    return c;
}

std::vector<std::vector<int>> tiny_corpus() {
    return {tokenize("the quick brown fox jumps"),
            tokenize("entropy falls with depth sometimes"),
            tokenize("calibration text, third line")};
}

PlanConfig tiny_plan_config() {
    PlanConfig c;
    c.s_max = 64;
    c.s_min = 16;
    c.s_i1 = 8;
    c.delta_s_h = 4;
    c.m = 2;
    c.l = 3;
    return c;
}

} // namespace

TEST_CASE("published layer schedules reproduce exactly") {
    CHECK(layer_schedule(5, 4096, 1536) ==
          std::vector<std::size_t>{4096, 3456, 2816, 2176, 1536});
    CHECK(layer_schedule(8, 4096, 1536) ==
          std::vector<std::size_t>{4096, 3731, 3366, 3001, 2636, 2271, 1906, 1536});
    CHECK(layer_schedule(5, 8096, 1536) ==
          std::vector<std::size_t>{8096, 6456, 4816, 3176, 1536});
    CHECK(layer_schedule(5, 4096, 512) ==
          std::vector<std::size_t>{4096, 3200, 2304, 1408, 512});
    CHECK(layer_schedule(1, 4096, 1536) == std::vector<std::size_t>{4096});
    CHECK(layer_schedule(2, 4096, 1536) == std::vector<std::size_t>{4096, 1536});
}

TEST_CASE("layer schedule properties and errors") {
    std::mt19937 rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t g = 2 + rng() % 7;
        const std::size_t s_min = 8 + rng() % 100;
        const std::size_t s_max = s_min + g * (1 + rng() % 400);
        const auto s = layer_schedule(g, s_max, s_min);
        REQUIRE(s.size() == g);
        CHECK(s.front() == s_max);
        CHECK(s.back() == s_min);
        for (std::size_t i = 0; i + 1 < g; ++i)
            CHECK(s[i] > s[i + 1]);
    }
    CHECK_THROWS_AS(layer_schedule(0, 10, 5), BadRange);
    CHECK_THROWS_AS(layer_schedule(3, 5, 10), BadRange);
    CHECK_THROWS_AS(layer_schedule(3, 10, 9), BadRange);  // cannot strictly decrease
    CHECK_THROWS_AS(layer_schedule(2, 10, 10), BadRange); // zero span
}

TEST_CASE("partition boundaries need a strict drop beyond epsilon") {
    CHECK(partition_layers({10.0, 10.5, 8.0, 8.2}, 1.0) == std::vector<std::size_t>{2});
    CHECK(partition_layers({1.0, 2.0, 3.0, 4.0}, 1.0).empty());
    CHECK(partition_layers({10.0, 9.0}, 1.0).empty()); // drop == epsilon is not enough
    CHECK(partition_layers({10.0, 8.9}, 1.0) == std::vector<std::size_t>{1});
    CHECK(partition_layers({5.0, 3.0, 6.0, 1.0}, 1.5) == std::vector<std::size_t>{1, 3});
    CHECK_THROWS_AS(partition_layers({1.0}, 1.0), PlanError);

    // Shift invariance: boundaries depend only on differences.
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> val(1.0, 20.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> p(2 + rng() % 10);
        for (auto& x : p)
            x = val(rng);
        std::vector<double> q = p;
        const double shift = val(rng);
        for (auto& x : q)
            x += shift;
        CHECK(partition_layers(p, 1.0) == partition_layers(q, 1.0));
    }
}

TEST_CASE("published head schedules reproduce exactly") {
    CHECK(head_schedule(512, 2, 256) == std::vector<std::size_t>{512, 256});
    CHECK(head_schedule(512, 5, 64) ==
          std::vector<std::size_t>{512, 448, 384, 320, 256});
    CHECK(head_schedule(512, 1, 999) == std::vector<std::size_t>{512});
    CHECK(head_schedule(512, 2, 500) == std::vector<std::size_t>{512, 12});
    CHECK_THROWS_AS(head_schedule(512, 3, 256), WindowUnderflow);
    CHECK_THROWS_AS(head_schedule(512, 0, 1), BadM);
}

TEST_CASE("head grouping sorts by votes, mean erank, then index") {
    HeadGrouping g = group_heads({5, 1, 3, 2}, {4.0, 4.0, 4.0, 4.0}, 2);
    CHECK(g.order == std::vector<std::size_t>{0, 2, 3, 1});
    CHECK(g.group_of == std::vector<std::size_t>{0, 1, 0, 1});

    // Equal votes fall back to mean erank, then index.
    g = group_heads({2, 2, 2, 2}, {1.0, 3.0, 2.0, 3.0}, 2);
    CHECK(g.order == std::vector<std::size_t>{1, 3, 2, 0});
    CHECK(g.group_of == std::vector<std::size_t>{1, 0, 1, 0});

    g = group_heads({1, 1, 1}, {2.0, 2.0, 2.0}, 3);
    CHECK(g.order == std::vector<std::size_t>{0, 1, 2});

    // Remainder heads land in the earlier (higher-rank) groups.
    g = group_heads({5, 4, 3, 2, 1}, {1, 1, 1, 1, 1}, 2);
    CHECK(g.group_of == std::vector<std::size_t>{0, 0, 0, 1, 1});

    g = group_heads({9, 9}, {3.0, 3.0}, 1);
    CHECK(g.group_of == std::vector<std::size_t>{0, 0});

    CHECK_THROWS_AS(group_heads({1, 2}, {1.0, 2.0}, 3), BadM);
    CHECK_THROWS_AS(group_heads({1, 2}, {1.0}, 1), PlanError);
}

TEST_CASE("profiles have the right shape and are mean-invariant") {
    Model m = init_weights(tiny_config());
    const auto corpus = tiny_corpus();

    for (ProfileSource src : {ProfileSource::HiddenState, ProfileSource::Query,
                              ProfileSource::Key, ProfileSource::Value}) {
        const EntropyProfile p = profile_layers(m, corpus, src, TopK::elbow());
        REQUIRE(p.per_layer.size() == m.config.n_layers);
        const double dim = src == ProfileSource::HiddenState
                               ? static_cast<double>(m.config.d_model())
                               : static_cast<double>(m.config.d_head);
        for (double v : p.per_layer) {
            CHECK(v >= 1.0);
            CHECK(v <= dim);
        }
    }

    // Duplicating every sequence leaves the mean unchanged.
    auto twice = corpus;
    twice.insert(twice.end(), corpus.begin(), corpus.end());
    const auto p1 = profile_layers(m, corpus, ProfileSource::Query, TopK::elbow());
    const auto p2 = profile_layers(m, twice, ProfileSource::Query, TopK::elbow());
    for (std::size_t i = 0; i < p1.per_layer.size(); ++i)
        CHECK(p1.per_layer[i] == doctest::Approx(p2.per_layer[i]).epsilon(1e-12));

    CHECK_THROWS_AS(profile_layers(m, {}, ProfileSource::Query, TopK::elbow()),
                    EmptyCalibration);
    CHECK_THROWS_AS(profile_layers(m, {{kBosToken}}, ProfileSource::Query, TopK::elbow()),
                    EmptyCalibration);
}

TEST_CASE("single-sequence profile equals an entropy-core recomputation") {
    Model m = init_weights(tiny_config());
    const std::vector<std::vector<int>> one = {tokenize("recompute me, please")};
    const auto profile = profile_layers(m, one, ProfileSource::Query, TopK::elbow());

    EvictionPolicy full;
    KVCacheState cache;
    CaptureOptions cap;
    cap.qkv = true;
    const auto res = prefill(m, one[0], full, cache, cap);
    for (std::size_t i = 0; i < m.config.n_layers; ++i) {
        double mean = 0.0;
        for (const TokenMatrix& q : res.q[i]) {
            const CovarianceSpectrum sp = spectrum_of(q);
            const std::size_t k = resolve_k(sp.eigenvalues, TopK::elbow());
            mean += truncated_erank(sp.eigenvalues, k);
        }
        mean /= static_cast<double>(m.config.n_heads);
        CHECK(profile.per_layer[i] == doctest::Approx(mean).epsilon(1e-10));
    }
}

TEST_CASE("votes give the top half one point per sample") {
    Model m = init_weights(tiny_config());
    const std::vector<std::vector<int>> one = {tokenize("vote on this sample")};

    const auto votes1 = vote_heads(m, one, TopK::elbow());
    REQUIRE(votes1.size() == m.config.n_layers);
    for (const auto& layer : votes1) {
        REQUIRE(layer.size() == m.config.n_heads);
        CHECK(std::accumulate(layer.begin(), layer.end(), std::int64_t{0}) == 2);
        for (auto v : layer)
            CHECK((v == 0 || v == 1));
    }

    // Repeating the sample s times scales the votes by s.
    std::vector<std::vector<int>> five(5, one[0]);
    const auto votes5 = vote_heads(m, five, TopK::elbow());
    for (std::size_t i = 0; i < votes1.size(); ++i)
        for (std::size_t h = 0; h < votes1[i].size(); ++h)
            CHECK(votes5[i][h] == 5 * votes1[i][h]);

    // Independent recomputation: rank per-head eranks, top floor(h/2) vote.
    const auto corpus = tiny_corpus();
    const auto votes = vote_heads(m, corpus, TopK::elbow());
    std::vector<std::vector<std::int64_t>> expect(
        m.config.n_layers, std::vector<std::int64_t>(m.config.n_heads, 0));
    for (const auto& seq : corpus) {
        EvictionPolicy full;
        KVCacheState cache;
        CaptureOptions cap;
        cap.qkv = true;
        const auto res = prefill(m, seq, full, cache, cap);
        for (std::size_t i = 0; i < m.config.n_layers; ++i) {
            std::vector<double> er;
            for (const TokenMatrix& q : res.q[i])
                er.push_back(truncated_erank_of(q, TopK::elbow()));
            std::vector<std::size_t> order(er.size());
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return er[a] != er[b] ? er[a] > er[b] : a < b;
            });
            for (std::size_t r = 0; r < er.size() / 2; ++r)
                expect[i][order[r]] += 1;
        }
    }
    CHECK(votes == expect);
}

TEST_CASE("calibration is deterministic across thread counts") {
    Model m = init_weights(tiny_config());
    const auto corpus = tiny_corpus();
    const auto a = calibrate_heads(m, corpus, TopK::elbow(), 1);
    const auto b = calibrate_heads(m, corpus, TopK::elbow(), 3);
    CHECK(a.votes == b.votes);
    CHECK(a.layer_profile == b.layer_profile);
    CHECK(a.mean_head_erank == b.mean_head_erank);
}

TEST_CASE("build_plan produces a consistent, serializable plan") {
    Model m = init_weights(tiny_config());
    const auto corpus = tiny_corpus();
    const CompressionPlan plan = build_plan(m, corpus, tiny_plan_config());

    CHECK(plan.n_layers() == m.config.n_layers);
    CHECK(plan.n_heads() == m.config.n_heads);
    CHECK(plan.model_fingerprint == fingerprint_string(model_fingerprint(m)));
    CHECK(plan.layer_plan.group_sizes.size() == plan.layer_plan.boundaries.size() + 1);
    for (std::size_t i = 0; i < plan.n_layers(); ++i) {
        CHECK(plan.head_plan.group_windows[i] == std::vector<std::size_t>{8, 4});
        for (std::size_t h = 0; h < plan.n_heads(); ++h) {
            const std::size_t w = plan.window_of(i, h);
            CHECK((w == 8 || w == 4));
        }
        // Exactly half the heads sit in each of the two groups.
        std::size_t g0 = 0;
        for (std::size_t g : plan.head_plan.group_of_head[i])
            g0 += g == 0 ? 1 : 0;
        CHECK(g0 == 2);
    }
    CHECK(plan.mean_window() == doctest::Approx(6.0));

    // Round-trip: bytes are stable and the reload is structurally equal.
    const auto path = fs::temp_directory_path() / "unccache_test_plan.json";
    save_plan(plan, path.string());
    const std::string bytes1 = read_file(path.string());
    save_plan(plan, path.string());
    CHECK(read_file(path.string()) == bytes1);

    const CompressionPlan back = load_plan(path.string());
    CHECK(back.to_json() == plan.to_json());
    CHECK_NOTHROW(load_plan(path.string(), plan.model_fingerprint));
    CHECK_THROWS_AS(load_plan(path.string(), "fnv1a64:0000000000000000"),
                    FingerprintMismatch);
    fs::remove(path);
}

TEST_CASE("default paper configuration yields the 384-token mean window") {
    Model m = init_weights(tiny_config());
    const CompressionPlan plan = build_plan(m, tiny_corpus(), PlanConfig{});
    CHECK(plan.mean_window() == doctest::Approx(384.0));
    for (std::size_t i = 0; i < plan.n_layers(); ++i)
        CHECK(plan.head_plan.group_windows[i] == std::vector<std::size_t>{512, 256});
}

TEST_CASE("forced group count overrides the measured partition") {
    Model m = init_weights(tiny_config());
    const CompressionPlan plan =
        build_plan(m, tiny_corpus(), tiny_plan_config(), ProfileSource::Query, 2);
    CHECK(plan.layer_plan.group_sizes == std::vector<std::size_t>{64, 16});
    CHECK(plan.layer_plan.boundaries == std::vector<std::size_t>{2});
    CHECK(plan.layer_plan.group_of(0) == 0);
    CHECK(plan.layer_plan.group_of(1) == 0);
    CHECK(plan.layer_plan.group_of(2) == 1);
    CHECK(plan.layer_plan.group_of(3) == 1);

    CHECK_THROWS_AS(
        build_plan(m, tiny_corpus(), tiny_plan_config(), ProfileSource::Query, 9),
        BadRange);
}

TEST_CASE("plan windows and head removal validate against the model shape") {
    Model m = init_weights(tiny_config());
    const CompressionPlan plan = build_plan(m, tiny_corpus(), tiny_plan_config());

    const auto w = plan_windows(plan, 0, 4);
    REQUIRE(w.size() == 4);
    for (std::size_t h = 0; h < 4; ++h)
        CHECK(w[h] == plan.window_of(0, h));
    CHECK_THROWS_AS(plan_windows(plan, 99, 4), PlanMismatch);
    CHECK_THROWS_AS(plan_windows(plan, 0, 5), PlanMismatch);

    const auto removed0 = remove_heads(plan, 0);
    for (const auto& layer : removed0)
        CHECK(layer.empty());
    const auto removed2 = remove_heads(plan, 2);
    for (std::size_t i = 0; i < plan.n_layers(); ++i) {
        REQUIRE(removed2[i].size() == 2);
        const auto& order = plan.head_plan.per_layer_order[i];
        for (std::size_t h : removed2[i])
            CHECK((h == order[2] || h == order[3]));
    }
    CHECK_THROWS_AS(remove_heads(plan, 4), BadK);
}

TEST_CASE("policy_from_plan materializes each runtime kind") {
    Model m = init_weights(tiny_config());
    const CompressionPlan plan = build_plan(m, tiny_corpus(), tiny_plan_config());

    CHECK(policy_from_plan(plan, PolicyKind::Full).windows.empty());

    const auto cum = policy_from_plan(plan, PolicyKind::Cumulative);
    for (const auto& layer : cum.windows)
        for (std::size_t w : layer)
            CHECK(w == 6); // llround(mean 6.0)

    const auto grp = policy_from_plan(plan, PolicyKind::UncompGroup);
    CHECK(grp.l == plan.config.l);
    for (std::size_t i = 0; i < plan.n_layers(); ++i)
        for (std::size_t h = 0; h < plan.n_heads(); ++h)
            CHECK(grp.windows[i][h] == plan.window_of(i, h));

    const auto stage = policy_from_plan(plan, PolicyKind::UncompGroupStage);
    REQUIRE(stage.hidden_sizes.size() == plan.n_layers());
    for (std::size_t i = 0; i < plan.n_layers(); ++i)
        CHECK(stage.hidden_sizes[i] ==
              plan.layer_plan.group_sizes[plan.layer_plan.group_of(i)]);

    const auto ext = policy_from_plan(plan, PolicyKind::UncompExtreme, 1);
    REQUIRE(ext.removed.size() == plan.n_layers());
    for (const auto& layer : ext.removed)
        CHECK(layer.size() == 1);
}

TEST_CASE("plan files with foreign schemas are rejected") {
    Model m = init_weights(tiny_config());
    const CompressionPlan plan = build_plan(m, tiny_corpus(), tiny_plan_config());
    auto j = plan.to_json();
    j["schema"] = "unccache-plan/2";

    const auto path = fs::temp_directory_path() / "unccache_test_badplan.json";
    write_file_atomic(path.string(), j.dump(2));
    CHECK_THROWS_AS(load_plan(path.string()), PlanError);
    write_file_atomic(path.string(), "not json at all");
    CHECK_THROWS_AS(load_plan(path.string()), PlanError);
    fs::remove(path);
    CHECK_THROWS_AS(load_plan(path.string()), PlanError); // missing file
}

TEST_CASE("corpus loader tokenizes one document per line") {
    const auto path = fs::temp_directory_path() / "unccache_test_corpus.txt";
    {
        std::ofstream out(path);
        out << "first doc\n\nsecond doc\r\nthird\n";
    }
    const auto docs = load_corpus(path.string());
    REQUIRE(docs.size() == 3);
    CHECK(docs[0] == tokenize("first doc"));
    CHECK(docs[1] == tokenize("second doc"));
    CHECK(docs[2] == tokenize("third"));
    {
        std::ofstream out(path);
        out << "\n\n";
    }
    CHECK_THROWS_AS(load_corpus(path.string()), EmptyCalibration);
    fs::remove(path);
}
