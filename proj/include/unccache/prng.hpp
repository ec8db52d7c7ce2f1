// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstddef>

namespace unc {

// splitmix64. Fully specified so a port in any language reproduces the same
// stream:
//   state += 0x9E3779B97F4A7C15
//   z = state
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   return z ^ (z >> 31)
struct SplitMix64 {
    std::uint64_t state;

    explicit SplitMix64(std::uint64_t seed) : state(seed) {}

    std::uint64_t next() {
        state += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1): top 53 bits scaled by 2^-53.
    double u01() {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }
};

// Box-Muller on top of SplitMix64. Each pair of draws (a, b) yields two
// standard normals, consumed in order:
//   u1 = u01(a), u2 = u01(b)
//   r = sqrt(-2 * ln(1 - u1))        (1 - u1 is in (0, 1], so ln is finite)
//   z0 = r * cos(2*pi*u2), z1 = r * sin(2*pi*u2)
// All arithmetic in f64; callers round to f32 at the point of use. A stream
// never carries a leftover z1 across tensor boundaries: fill_normal starts
// each tensor on a fresh pair.
struct NormalStream {
    SplitMix64 rng;
    explicit NormalStream(std::uint64_t seed) : rng(seed) {}

    // Writes n normals scaled by `scale`, rounded to f32.
    void fill_normal(float* out, std::size_t n, double scale) {
        constexpr double two_pi = 6.283185307179586476925286766559;
        std::size_t i = 0;
        while (i < n) {
            const double u1 = rng.u01();
            const double u2 = rng.u01();
            const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
            const double z0 = r * std::cos(two_pi * u2);
            out[i++] = static_cast<float>(z0 * scale);
            if (i < n) {
                const double z1 = r * std::sin(two_pi * u2);
                out[i++] = static_cast<float>(z1 * scale);
            }
        }
    }
};

// FNV-1a, 64-bit: offset basis 0xCBF29CE484222325, prime 0x100000001B3.
// Used for weight fingerprints and byte-level determinism checks.
struct Fnv1a64 {
    std::uint64_t hash = 0xCBF29CE484222325ULL;

    void update(const void* data, std::size_t n) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            hash ^= p[i];
            hash *= 0x100000001B3ULL;
        }
    }
};

} // namespace unc
