// SPDX-License-Identifier: Apache-2.0
#include "unccache/entropy.hpp"

#include "unccache/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace unc {

namespace {
constexpr double kRankCutoff = 1e-9;
constexpr double kSymmetryTol = 1e-10;
constexpr double kPsdTol = -1e-9;
constexpr double kFlatTol = 1e-12;
} // namespace

double CovarianceSpectrum::trace() const {
    return std::accumulate(eigenvalues.begin(), eigenvalues.end(), 0.0);
}

std::size_t CovarianceSpectrum::numerical_rank() const {
    return static_cast<std::size_t>(
        std::count_if(eigenvalues.begin(), eigenvalues.end(),
                      [](double v) { return v > kRankCutoff; }));
}

SymMatrix covariance(const TokenMatrix& x) {
    if (x.rows < 2)
        throw DegenerateInput("covariance needs at least 2 rows, got " + std::to_string(x.rows));
    if (x.cols < 1)
        throw DegenerateInput("covariance needs at least 1 column");

    const std::size_t n = x.rows;
    const std::size_t d = x.cols;
    const auto& k = kern::active();

    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const float* r = x.row(i);
        for (std::size_t j = 0; j < d; ++j)
            mean[j] += r[j];
    }
    for (std::size_t j = 0; j < d; ++j)
        mean[j] /= static_cast<double>(n);

    SymMatrix cov(d);
    std::vector<double> v(d);
    for (std::size_t i = 0; i < n; ++i) {
        const float* r = x.row(i);
        for (std::size_t j = 0; j < d; ++j)
            v[j] = static_cast<double>(r[j]) - mean[j];
        const double norm_sq = k.dot_f64(v.data(), v.data(), d);
        if (!(norm_sq > 0.0))
            throw DegenerateInput("centered row " + std::to_string(i) +
                                  " has zero norm (row equals the mean)");
        const double inv = 1.0 / std::sqrt(norm_sq);
        for (std::size_t j = 0; j < d; ++j)
            v[j] *= inv;
        k.sym_rank1_f64(cov.data.data(), v.data(), d);
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i; j < d; ++j) {
            const double val = cov.at(i, j) * inv_n;
            cov.at(i, j) = val;
            cov.at(j, i) = val;
        }
    }
    return cov;
}

namespace {

void check_symmetric(const SymMatrix& m) {
    for (std::size_t i = 0; i < m.dim; ++i)
        for (std::size_t j = i + 1; j < m.dim; ++j)
            if (std::abs(m.at(i, j) - m.at(j, i)) > kSymmetryTol)
                throw NotSymmetric("matrix asymmetric at (" + std::to_string(i) + "," +
                                   std::to_string(j) + ")");
}

double off_diagonal_sq(const SymMatrix& a) {
    double off = 0.0;
    for (std::size_t i = 0; i < a.dim; ++i)
        for (std::size_t j = i + 1; j < a.dim; ++j)
            off += a.at(i, j) * a.at(i, j);
    return off;
}

} // namespace

EigenDecomposition eigh(const SymMatrix& m) {
    check_symmetric(m);
    const std::size_t d = m.dim;
    const auto& k = kern::active();

    SymMatrix a = m;
    // Rows of w are the accumulated rotations; on exit row i is the
    // eigenvector paired with a's i-th diagonal entry.
    std::vector<double> w(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        w[i * d + i] = 1.0;

    double frob_sq = 0.0;
    for (double v : a.data)
        frob_sq += v * v;
    const double stop = std::max(frob_sq * 1e-30, 1e-300);

    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        if (off_diagonal_sq(a) <= stop)
            break;
        for (std::size_t p = 0; p < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300)
                    continue;
                const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                double* row_p = a.data.data() + p * d;
                double* row_q = a.data.data() + q * d;
                k.rot_f64(row_p, row_q, c, s, d);
                for (std::size_t i = 0; i < d; ++i) {
                    const double aip = a.at(i, p);
                    const double aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * aiq;
                    a.at(i, q) = s * aip + c * aiq;
                }
                k.rot_f64(w.data() + p * d, w.data() + q * d, c, s, d);
            }
        }
    }

    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return a.at(i, i) > a.at(j, j); });

    EigenDecomposition out;
    out.dim = d;
    out.eigenvalues.resize(d);
    out.vectors.resize(d * d);
    for (std::size_t i = 0; i < d; ++i) {
        out.eigenvalues[i] = a.at(order[i], order[i]);
        std::copy_n(w.data() + order[i] * d, d, out.vectors.data() + i * d);
    }
    return out;
}

CovarianceSpectrum spectrum(const SymMatrix& m) {
    EigenDecomposition eig = eigh(m);
    CovarianceSpectrum out;
    out.dim = m.dim;
    out.eigenvalues.resize(m.dim);
    for (std::size_t i = 0; i < m.dim; ++i) {
        double v = eig.eigenvalues[i];
        if (v < 0.0) {
            if (v < kPsdTol)
                throw NotPsd("eigenvalue " + std::to_string(v) + " below PSD tolerance");
            v = 0.0;
        }
        out.eigenvalues[i] = v;
    }
    return out;
}

CovarianceSpectrum spectrum_of(const TokenMatrix& x) {
    return spectrum(covariance(x));
}

double renyi_entropy(const std::vector<double>& s, double alpha) {
    if (alpha <= 0.0 || alpha == 1.0)
        throw InvalidAlpha("alpha must be positive and != 1, got " + std::to_string(alpha));
    const double total = std::accumulate(s.begin(), s.end(), 0.0);
    if (!(total > 0.0))
        throw DegenerateInput("renyi_entropy needs a positive trace");
    double acc = 0.0;
    for (double v : s)
        if (v > 0.0)
            acc += std::pow(v / total, alpha);
    return std::log(acc) / (1.0 - alpha);
}

double von_neumann_entropy(const std::vector<double>& s) {
    double h = 0.0;
    for (double v : s)
        if (v > 0.0)
            h -= v * std::log(v);
    return h;
}

double effective_rank(const std::vector<double>& s) {
    return std::exp(von_neumann_entropy(s));
}

double trace_form_entropy(const SymMatrix& m) {
    const EigenDecomposition eig = eigh(m);
    const std::size_t d = m.dim;
    double max_eig = 0.0;
    for (double v : eig.eigenvalues)
        max_eig = std::max(max_eig, v);
    const double cutoff = max_eig * 1e-12;

    // log m = sum_i ln(l_i) v_i v_i^T over the numerically nonzero part.
    std::vector<double> log_m(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
        const double l = eig.eigenvalues[i];
        if (l <= cutoff)
            continue;
        const double ln_l = std::log(l);
        const double* v = eig.vec(i);
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < d; ++c)
                log_m[r * d + c] += ln_l * v[r] * v[c];
    }

    // Tr(m * log m) touches only matching row/col pairs.
    const auto& k = kern::active();
    double tr = 0.0;
    for (std::size_t i = 0; i < d; ++i)
        tr += k.dot_f64(m.data.data() + i * d, log_m.data() + i * d, d);
    return -tr;
}

namespace {

void check_descending(const std::vector<double>& s, const char* who) {
    for (std::size_t i = 1; i < s.size(); ++i)
        if (s[i] > s[i - 1])
            throw std::invalid_argument(std::string(who) + " expects a descending spectrum");
}

} // namespace

std::size_t elbow_index(const std::vector<double>& s) {
    const std::size_t d = s.size();
    if (d < 3)
        throw BadK("elbow_index needs at least 3 eigenvalues, got " + std::to_string(d));
    check_descending(s, "elbow_index");
    const double span = s.front() - s.back();
    if (span < kFlatTol)
        throw FlatSpectrum("spectrum span " + std::to_string(span) + " below 1e-12");

    // Chord endpoints normalize to (0,1) and (1,0); the distance of point i
    // to the chord is |x_i + y_i - 1| / sqrt(2). Interior points only: the
    // endpoints sit on the chord by construction.
    std::size_t best = 1;
    double best_dist = -1.0;
    for (std::size_t i = 1; i + 1 < d; ++i) {
        const double xi = static_cast<double>(i) / static_cast<double>(d - 1);
        const double yi = (s[i] - s.back()) / span;
        const double dist = std::abs(xi + yi - 1.0);
        if (dist > best_dist) {
            best_dist = dist;
            best = i;
        }
    }
    // k counts the eigenvalues strictly before the elbow point.
    return best;
}

double truncated_entropy(const std::vector<double>& s, std::size_t k) {
    if (k < 1 || k > s.size())
        throw BadK("k=" + std::to_string(k) + " outside [1, " + std::to_string(s.size()) + "]");
    check_descending(s, "truncated_entropy");
    double h = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        if (s[i] > 0.0)
            h -= s[i] * std::log(s[i]);
    return h;
}

double truncated_erank(const std::vector<double>& s, std::size_t k) {
    return std::exp(truncated_entropy(s, k));
}

std::string TopK::str() const {
    switch (mode) {
    case Mode::Elbow:
        return "elbow";
    case Mode::All:
        return "all";
    case Mode::Fixed:
        return "fixed:" + std::to_string(k);
    }
    return "elbow";
}

TopK TopK::parse(const std::string& s) {
    if (s == "elbow")
        return elbow();
    if (s == "all")
        return all();
    if (s.rfind("fixed:", 0) == 0) {
        const std::size_t k = std::stoull(s.substr(6));
        if (k < 1)
            throw BadK("fixed top-k must be >= 1");
        return fixed(k);
    }
    throw std::invalid_argument("unknown top-k mode: " + s);
}

std::size_t resolve_k(const std::vector<double>& s, const TopK& mode) {
    const std::size_t d = s.size();
    switch (mode.mode) {
    case TopK::Mode::All:
        return d;
    case TopK::Mode::Fixed:
        return std::min(std::max<std::size_t>(mode.k, 1), d);
    case TopK::Mode::Elbow:
        if (d < 3)
            return d;
        try {
            return elbow_index(s);
        } catch (const FlatSpectrum&) {
            return d; // flat spectra carry no elbow; use the full entropy
        }
    }
    return d;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("pearson inputs differ in length");
    const std::size_t n = a.size();
    if (n < 2)
        throw std::invalid_argument("pearson needs at least 2 points");

    double mean_a = 0.0, mean_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_a += a[i];
        mean_b += b[i];
    }
    mean_a /= static_cast<double>(n);
    mean_b /= static_cast<double>(n);

    double ss_a = 0.0, ss_b = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - mean_a;
        const double db = b[i] - mean_b;
        ss_a += da * da;
        ss_b += db * db;
        cov += da * db;
    }
    const double tol_a = static_cast<double>(n) * std::pow(1e-12 * std::max(1.0, std::abs(mean_a)), 2);
    const double tol_b = static_cast<double>(n) * std::pow(1e-12 * std::max(1.0, std::abs(mean_b)), 2);
    if (ss_a <= tol_a || ss_b <= tol_b)
        throw ZeroVariance("pearson input has (numerically) zero variance");

    // Identical inputs are exactly perfectly correlated; the closed form can
    // land one ulp off 1.0, which matters to callers asserting equality.
    if (std::equal(a.begin(), a.end(), b.begin()))
        return 1.0;

    const double r = cov / std::sqrt(ss_a * ss_b);
    return std::clamp(r, -1.0, 1.0);
}

} // namespace unc
