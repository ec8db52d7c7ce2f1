// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace unc {

// Spectral measures of token-sequence matrices: normalized covariance, its
// eigenvalue spectrum, Renyi / von Neumann entropy, effective rank, and the
// truncated variants that drive the compression planner. Inputs are f32
// activations; all spectral arithmetic runs in f64.

struct DegenerateInput : std::runtime_error {
    explicit DegenerateInput(const std::string& m) : std::runtime_error(m) {}
};
struct NotSymmetric : std::runtime_error {
    explicit NotSymmetric(const std::string& m) : std::runtime_error(m) {}
};
struct NotPsd : std::runtime_error {
    explicit NotPsd(const std::string& m) : std::runtime_error(m) {}
};
struct InvalidAlpha : std::runtime_error {
    explicit InvalidAlpha(const std::string& m) : std::runtime_error(m) {}
};
struct FlatSpectrum : std::runtime_error {
    explicit FlatSpectrum(const std::string& m) : std::runtime_error(m) {}
};
struct BadK : std::runtime_error {
    explicit BadK(const std::string& m) : std::runtime_error(m) {}
};
struct ZeroVariance : std::runtime_error {
    explicit ZeroVariance(const std::string& m) : std::runtime_error(m) {}
};

// Row-major N x D matrix of token vectors (rows are tokens).
struct TokenMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    TokenMatrix() = default;
    TokenMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    float* row(std::size_t i) { return data.data() + i * cols; }
    const float* row(std::size_t i) const { return data.data() + i * cols; }
};

// Row-major dense symmetric D x D matrix, f64.
struct SymMatrix {
    std::size_t dim = 0;
    std::vector<double> data;

    SymMatrix() = default;
    explicit SymMatrix(std::size_t d) : dim(d), data(d * d, 0.0) {}

    double& at(std::size_t i, std::size_t j) { return data[i * dim + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * dim + j]; }
};

// Eigenvalues descending; row i of `vectors` is the unit eigenvector paired
// with eigenvalues[i], so m == sum_i eigenvalues[i] * v_i v_i^T.
struct EigenDecomposition {
    std::size_t dim = 0;
    std::vector<double> eigenvalues;
    std::vector<double> vectors; // row-major dim x dim

    const double* vec(std::size_t i) const { return vectors.data() + i * dim; }
};

struct CovarianceSpectrum {
    std::size_t dim = 0;
    std::vector<double> eigenvalues; // descending, clamped to >= 0

    double trace() const;
    // Count of eigenvalues above the rank cutoff (1e-9).
    std::size_t numerical_rank() const;
};

// Mean-centered, row-normalized covariance: each centered row is scaled to
// unit length before the outer-product average, so the trace is 1 by
// construction. Throws DegenerateInput when fewer than 2 rows are given or
// when any centered row has zero norm (every row equal to the mean is the
// textbook trigger).
SymMatrix covariance(const TokenMatrix& x);

// Cyclic Jacobi. Contract: ||m - sum_i l_i v_i v_i^T||_F <= 1e-7 * ||m||_F
// for D up to 256. Throws NotSymmetric when max |m_ij - m_ji| > 1e-10.
EigenDecomposition eigh(const SymMatrix& m);

// eigh + PSD clamp: eigenvalues in [-1e-9, 0) snap to 0, anything lower
// throws NotPsd.
CovarianceSpectrum spectrum(const SymMatrix& m);
CovarianceSpectrum spectrum_of(const TokenMatrix& x);

// (1 / (1 - alpha)) * ln(sum_i s_i^alpha) on the spectrum normalized to sum
// 1. Throws InvalidAlpha for alpha <= 0 or alpha == 1.
double renyi_entropy(const std::vector<double>& s, double alpha);

// -sum_i s_i ln s_i with 0 ln 0 := 0. Eigenvalues are used as given (a
// trace-1 spectrum keeps the value in [0, ln D]).
double von_neumann_entropy(const std::vector<double>& s);

double effective_rank(const std::vector<double>& s);

// -Tr(m log m) with log m assembled from m's own eigendecomposition
// (eigenvalues below 1e-12 * max contribute nothing). Exists for the
// eigenvalue-form vs trace-form equivalence check.
double trace_form_entropy(const SymMatrix& m);

// Count of eigenvalues strictly before the spectrum's elbow. The elbow is
// the interior point with the largest perpendicular distance to the chord
// from (1, s_1) to (D, s_D) after min-max normalizing both axes; ties go to
// the smallest index. Requires s descending with D >= 3; throws FlatSpectrum
// when s_1 - s_D < 1e-12. Result is in [1, D-2].
std::size_t elbow_index(const std::vector<double>& s);

// Entropy restricted to the top-k eigenvalues, no renormalization. Throws
// BadK unless 1 <= k <= D.
double truncated_entropy(const std::vector<double>& s, std::size_t k);
double truncated_erank(const std::vector<double>& s, std::size_t k);

// How the planner picks k for truncated measures.
struct TopK {
    enum class Mode { Elbow, All, Fixed };
    Mode mode = Mode::Elbow;
    std::size_t k = 0; // Fixed only

    static TopK elbow() { return {Mode::Elbow, 0}; }
    static TopK all() { return {Mode::All, 0}; }
    static TopK fixed(std::size_t k) { return {Mode::Fixed, k}; }

    std::string str() const;            // "elbow" | "all" | "fixed:<k>"
    static TopK parse(const std::string& s);
};

// Elbow mode falls back to the full spectrum on FlatSpectrum or D < 3;
// Fixed clamps to D.
std::size_t resolve_k(const std::vector<double>& s, const TopK& mode);

// Pearson correlation. Lengths must match and be >= 2; throws ZeroVariance
// when either input is (numerically) constant. Identical inputs return
// exactly 1.0. Result is clamped to [-1, 1].
double pearson(const std::vector<double>& a, const std::vector<double>& b);

} // namespace unc
