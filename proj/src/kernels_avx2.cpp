// SPDX-License-Identifier: Apache-2.0
#include "unccache/kernels.hpp"

#include <cmath>
#include <immintrin.h>

// AVX2 + FMA lane. This file is the only translation unit built with
// -mavx2 -mfma; nothing here runs unless the dispatcher verified the CPU.
// Reductions use fixed lane order, so results are deterministic per build,
// but may differ from the scalar lane by summation order and FMA rounding.

namespace unc::kern {
namespace {

float hsum(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehl_ps(lo, lo);
    lo = _mm_add_ps(lo, sh);
    sh = _mm_shuffle_ps(lo, lo, 0x1);
    lo = _mm_add_ss(lo, sh);
    return _mm_cvtss_f32(lo);
}

float hmax(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_max_ps(lo, hi);
    __m128 sh = _mm_movehl_ps(lo, lo);
    lo = _mm_max_ps(lo, sh);
    sh = _mm_shuffle_ps(lo, lo, 0x1);
    lo = _mm_max_ss(lo, sh);
    return _mm_cvtss_f32(lo);
}

float hmin(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_min_ps(lo, hi);
    __m128 sh = _mm_movehl_ps(lo, lo);
    lo = _mm_min_ps(lo, sh);
    sh = _mm_shuffle_ps(lo, lo, 0x1);
    lo = _mm_min_ss(lo, sh);
    return _mm_cvtss_f32(lo);
}

double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    lo = _mm_add_sd(lo, sh);
    return _mm_cvtsd_f64(lo);
}

float dot_f32(const float* a, const float* b, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
    float r = hsum(acc);
    for (; i < n; ++i)
        r += a[i] * b[i];
    return r;
}

void axpy_f32(float a, const float* x, float* y, std::size_t n) {
    const __m256 va = _mm256_set1_ps(a);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    for (; i < n; ++i)
        y[i] += a * x[i];
}

void scale_f32(float* x, float s, std::size_t n) {
    const __m256 vs = _mm256_set1_ps(s);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(x + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), vs));
    for (; i < n; ++i)
        x[i] *= s;
}

float max_f32(const float* x, std::size_t n) {
    if (n < 8) {
        float m = x[0];
        for (std::size_t i = 1; i < n; ++i)
            if (x[i] > m)
                m = x[i];
        return m;
    }
    __m256 acc = _mm256_loadu_ps(x);
    std::size_t i = 8;
    for (; i + 8 <= n; i += 8)
        acc = _mm256_max_ps(acc, _mm256_loadu_ps(x + i));
    float m = hmax(acc);
    for (; i < n; ++i)
        if (x[i] > m)
            m = x[i];
    return m;
}

float sum_f32(const float* x, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
    float r = hsum(acc);
    for (; i < n; ++i)
        r += x[i];
    return r;
}

float sumsq_f32(const float* x, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 v = _mm256_loadu_ps(x + i);
        acc = _mm256_fmadd_ps(v, v, acc);
    }
    float r = hsum(acc);
    for (; i < n; ++i)
        r += x[i] * x[i];
    return r;
}

// Two passes: exact minimum value, then first index equal to it. Matches the
// scalar lane's first-occurrence rule bit for bit (min of floats is exact).
std::size_t argmin_f32(const float* x, std::size_t n) {
    float m = x[0];
    if (n >= 8) {
        __m256 acc = _mm256_loadu_ps(x);
        std::size_t i = 8;
        for (; i + 8 <= n; i += 8)
            acc = _mm256_min_ps(acc, _mm256_loadu_ps(x + i));
        m = hmin(acc);
        for (; i < n; ++i)
            if (x[i] < m)
                m = x[i];
    } else {
        for (std::size_t i = 1; i < n; ++i)
            if (x[i] < m)
                m = x[i];
    }
    for (std::size_t i = 0;; ++i)
        if (x[i] == m)
            return i;
}

void softmax_f32(float* x, std::size_t n) {
    const float m = max_f32(x, n);
    for (std::size_t i = 0; i < n; ++i)
        x[i] = std::exp(x[i] - m);
    const float sum = sum_f32(x, n);
    const __m256 vs = _mm256_set1_ps(sum);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(x + i, _mm256_div_ps(_mm256_loadu_ps(x + i), vs));
    for (; i < n; ++i)
        x[i] /= sum;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
    double r = hsum(acc);
    for (; i < n; ++i)
        r += a[i] * b[i];
    return r;
}

void sym_rank1_f64(double* c, const double* v, std::size_t d) {
    for (std::size_t i = 0; i < d; ++i) {
        double* row = c + i * d;
        const __m256d vi = _mm256_set1_pd(v[i]);
        std::size_t j = i;
        for (; j + 4 <= d; j += 4)
            _mm256_storeu_pd(row + j, _mm256_fmadd_pd(vi, _mm256_loadu_pd(v + j), _mm256_loadu_pd(row + j)));
        const double vis = v[i];
        for (; j < d; ++j)
            row[j] += vis * v[j];
    }
}

void rot_f64(double* x, double* y, double c, double s, std::size_t n) {
    const __m256d vc = _mm256_set1_pd(c);
    const __m256d vs = _mm256_set1_pd(s);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d xi = _mm256_loadu_pd(x + i);
        const __m256d yi = _mm256_loadu_pd(y + i);
        _mm256_storeu_pd(x + i, _mm256_fmsub_pd(vc, xi, _mm256_mul_pd(vs, yi)));
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(vs, xi, _mm256_mul_pd(vc, yi)));
    }
    for (; i < n; ++i) {
        const double xi = x[i];
        const double yi = y[i];
        x[i] = c * xi - s * yi;
        y[i] = s * xi + c * yi;
    }
}

} // namespace

const KernelSet& avx2_impl() {
    static const KernelSet set = {
        "avx2",
        dot_f32, axpy_f32, scale_f32, max_f32, sum_f32, sumsq_f32,
        argmin_f32, softmax_f32,
        dot_f64, sym_rank1_f64, rot_f64,
    };
    return set;
}

} // namespace unc::kern
