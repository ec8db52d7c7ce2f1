// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "unccache/kernels.hpp"
#include "unccache/prng.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

using namespace unc;

namespace {

std::vector<float> random_f32(SplitMix64& rng, std::size_t n, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> v(n);
    for (auto& x : v)
        x = lo + (hi - lo) * static_cast<float>(rng.u01());
    return v;
}

std::vector<double> random_f64(SplitMix64& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v)
        x = rng.u01() * 2.0 - 1.0;
    return v;
}

// Sizes straddling the 8-wide f32 and 4-wide f64 vector boundaries.
const std::size_t kSizes[] = {1, 2, 3, 7, 8, 9, 15, 16, 17, 31, 64, 65, 127, 130, 1000};

} // namespace

TEST_CASE("lane selection") {
    CHECK(kern::lane_supported(kern::Lane::Scalar));
    CHECK(kern::lane_supported(kern::Lane::Auto));
    CHECK(kern::select(kern::Lane::Scalar));
    CHECK(std::string(kern::active().name) == "scalar");
    CHECK(kern::select(kern::Lane::Auto));
    CHECK(kern::parse_lane("avx2") == kern::Lane::Avx2);
    CHECK_THROWS_AS(kern::parse_lane("sse9"), std::invalid_argument);
}

TEST_CASE("scalar vs simd equivalence") {
    const kern::KernelSet* simd = kern::lane_set(kern::Lane::Avx2);
    if (simd == nullptr) {
        MESSAGE("AVX2 lane unavailable on this host; equivalence suite skipped");
        return;
    }
    const kern::KernelSet& ref = kern::scalar();
    SplitMix64 rng(0xC0FFEE);

    for (std::size_t n : kSizes) {
        CAPTURE(n);
        auto a = random_f32(rng, n);
        auto b = random_f32(rng, n);

        CHECK(simd->dot_f32(a.data(), b.data(), n) ==
              doctest::Approx(ref.dot_f32(a.data(), b.data(), n)).epsilon(1e-5));
        CHECK(simd->sum_f32(a.data(), n) ==
              doctest::Approx(ref.sum_f32(a.data(), n)).epsilon(1e-5));
        CHECK(simd->sumsq_f32(a.data(), n) ==
              doctest::Approx(ref.sumsq_f32(a.data(), n)).epsilon(1e-5));
        CHECK(simd->max_f32(a.data(), n) == ref.max_f32(a.data(), n));
        CHECK(simd->argmin_f32(a.data(), n) == ref.argmin_f32(a.data(), n));

        auto y1 = b, y2 = b;
        ref.axpy_f32(0.37f, a.data(), y1.data(), n);
        simd->axpy_f32(0.37f, a.data(), y2.data(), n);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(y2[i] == doctest::Approx(y1[i]).epsilon(1e-6));

        auto s1 = a, s2 = a;
        ref.scale_f32(s1.data(), 1.618f, n);
        simd->scale_f32(s2.data(), 1.618f, n);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(s2[i] == s1[i]); // single rounded multiply in both lanes

        auto m1 = a, m2 = a;
        ref.softmax_f32(m1.data(), n);
        simd->softmax_f32(m2.data(), n);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(m2[i] == doctest::Approx(m1[i]).epsilon(1e-6));

        auto da = random_f64(rng, n);
        auto db = random_f64(rng, n);
        CHECK(simd->dot_f64(da.data(), db.data(), n) ==
              doctest::Approx(ref.dot_f64(da.data(), db.data(), n)).epsilon(1e-14));

        auto rx1 = da, rx2 = da, ry1 = db, ry2 = db;
        ref.rot_f64(rx1.data(), ry1.data(), 0.8, 0.6, n);
        simd->rot_f64(rx2.data(), ry2.data(), 0.8, 0.6, n);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(rx2[i] == doctest::Approx(rx1[i]).epsilon(1e-14));
            CHECK(ry2[i] == doctest::Approx(ry1[i]).epsilon(1e-14));
        }
    }

    for (std::size_t d : {1u, 3u, 4u, 5u, 17u, 32u}) {
        auto v = random_f64(rng, d);
        std::vector<double> c1(d * d, 0.0), c2(d * d, 0.0);
        ref.sym_rank1_f64(c1.data(), v.data(), d);
        simd->sym_rank1_f64(c2.data(), v.data(), d);
        for (std::size_t i = 0; i < d * d; ++i)
            CHECK(c2[i] == doctest::Approx(c1[i]).epsilon(1e-14));
    }
}

TEST_CASE("softmax rows sum to one") {
    SplitMix64 rng(7);
    for (std::size_t n : kSizes) {
        auto x = random_f32(rng, n, -30.0f, 30.0f);
        kern::active().softmax_f32(x.data(), n);
        float sum = 0.0f;
        for (float v : x) {
            CHECK(v >= 0.0f);
            sum += v;
        }
        CHECK(sum == doctest::Approx(1.0f).epsilon(1e-6));
    }
}

TEST_CASE("argmin breaks ties toward the lowest index") {
    // Duplicated minima, including across vector-width boundaries.
    std::vector<float> x(24, 1.0f);
    x[5] = -2.0f;
    x[13] = -2.0f;
    x[21] = -2.0f;
    CHECK(kern::scalar().argmin_f32(x.data(), x.size()) == 5);
    if (const auto* simd = kern::lane_set(kern::Lane::Avx2))
        CHECK(simd->argmin_f32(x.data(), x.size()) == 5);

    std::vector<float> all_same(17, 3.5f);
    CHECK(kern::active().argmin_f32(all_same.data(), all_same.size()) == 0);
}

TEST_CASE("axpy and dot agree with a plain loop") {
    SplitMix64 rng(11);
    auto a = random_f32(rng, 37);
    auto b = random_f32(rng, 37);
    double expect = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        expect += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    CHECK(kern::active().dot_f32(a.data(), b.data(), a.size()) ==
          doctest::Approx(expect).epsilon(1e-5));
}
