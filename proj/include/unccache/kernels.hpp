// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>

namespace unc::kern {

// One entry per primitive the hot paths are written against. The f32 group
// carries the transformer forward pass, the f64 group the spectral path
// (covariance accumulation and Jacobi sweeps). Implementations must be
// deterministic for fixed inputs within a lane; lanes may differ from each
// other only by floating-point summation order and FMA contraction, which the
// equivalence suite bounds.
struct KernelSet {
    const char* name;

    float (*dot_f32)(const float* a, const float* b, std::size_t n);
    void (*axpy_f32)(float a, const float* x, float* y, std::size_t n); // y += a*x
    void (*scale_f32)(float* x, float s, std::size_t n);
    float (*max_f32)(const float* x, std::size_t n);   // n >= 1
    float (*sum_f32)(const float* x, std::size_t n);
    float (*sumsq_f32)(const float* x, std::size_t n);
    // First index holding the minimum value. Callers rely on the tie rule
    // (lowest index wins) for oldest-first eviction.
    std::size_t (*argmin_f32)(const float* x, std::size_t n); // n >= 1
    // In-place, max-subtracted, normalized by division. n >= 1.
    void (*softmax_f32)(float* x, std::size_t n);

    double (*dot_f64)(const double* a, const double* b, std::size_t n);
    // Upper triangle of C += v v^T for row-major D x D storage.
    void (*sym_rank1_f64)(double* c, const double* v, std::size_t d);
    // Plane rotation: (x_i, y_i) <- (c*x_i - s*y_i, s*x_i + c*y_i).
    void (*rot_f64)(double* x, double* y, double c, double s, std::size_t n);
};

enum class Lane { Auto, Scalar, Avx2 };

const KernelSet& scalar();

// Lane actually executing; Auto resolves to the widest lane this CPU
// supports. select() pins it process-wide and returns false when the lane is
// unavailable (missing ISA or not compiled in).
const KernelSet& active();
bool select(Lane lane);
bool lane_supported(Lane lane);
const KernelSet* lane_set(Lane lane); // nullptr when unsupported

// "auto" | "scalar" | "avx2"; throws std::invalid_argument otherwise.
Lane parse_lane(const std::string& name);

} // namespace unc::kern
