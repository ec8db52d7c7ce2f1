// SPDX-License-Identifier: Apache-2.0
#include "unccache/kernels.hpp"

#include <cmath>

// Reference lane. Every kernel is a plain sequential loop; the AVX2 lane is
// tested against these.

namespace unc::kern {
namespace {

float dot_f32(const float* a, const float* b, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i)
        acc += a[i] * b[i];
    return acc;
}

void axpy_f32(float a, const float* x, float* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        y[i] += a * x[i];
}

void scale_f32(float* x, float s, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        x[i] *= s;
}

float max_f32(const float* x, std::size_t n) {
    float m = x[0];
    for (std::size_t i = 1; i < n; ++i)
        if (x[i] > m)
            m = x[i];
    return m;
}

float sum_f32(const float* x, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i)
        acc += x[i];
    return acc;
}

float sumsq_f32(const float* x, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i)
        acc += x[i] * x[i];
    return acc;
}

std::size_t argmin_f32(const float* x, std::size_t n) {
    std::size_t idx = 0;
    float best = x[0];
    for (std::size_t i = 1; i < n; ++i) {
        if (x[i] < best) {
            best = x[i];
            idx = i;
        }
    }
    return idx;
}

void softmax_f32(float* x, std::size_t n) {
    const float m = max_f32(x, n);
    float sum = 0.0f;
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - m);
        sum += x[i];
    }
    for (std::size_t i = 0; i < n; ++i)
        x[i] /= sum;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        acc += a[i] * b[i];
    return acc;
}

void sym_rank1_f64(double* c, const double* v, std::size_t d) {
    for (std::size_t i = 0; i < d; ++i) {
        double* row = c + i * d;
        const double vi = v[i];
        for (std::size_t j = i; j < d; ++j)
            row[j] += vi * v[j];
    }
}

void rot_f64(double* x, double* y, double c, double s, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const double xi = x[i];
        const double yi = y[i];
        x[i] = c * xi - s * yi;
        y[i] = s * xi + c * yi;
    }
}

} // namespace

const KernelSet& scalar() {
    static const KernelSet set = {
        "scalar",
        dot_f32, axpy_f32, scale_f32, max_f32,  sum_f32, sumsq_f32,
        argmin_f32, softmax_f32,
        dot_f64, sym_rank1_f64, rot_f64,
    };
    return set;
}

} // namespace unc::kern
