// Copyright 2026 MATE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense linear-algebra kernels outside the autodiff tape. The SVD backs the
// per-epoch projection heads; it must be bitwise deterministic, handle
// rank-deficient inputs (a degenerate corpus yields a rank-1 dependency
// matrix), and reconstruct to 1e-10 at D <= 512.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mate/error.hpp"
#include "mate/tensor.hpp"

namespace mate::linalg {

struct SvdFactors {
    Tensor u;  // D x D orthogonal
    Tensor s;  // length D, nonnegative, descending
    Tensor v;  // D x D orthogonal
};

namespace detail {

inline double column_dot(const std::vector<double>& g, std::size_t d,
                         std::size_t p, std::size_t q) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += g[i * d + p] * g[i * d + q];
    return s;
}

inline void rotate_columns(std::vector<double>& m, std::size_t d, std::size_t p,
                           std::size_t q, double c, double s) {
    for (std::size_t i = 0; i < d; ++i) {
        const double mp = m[i * d + p], mq = m[i * d + q];
        m[i * d + p] = c * mp - s * mq;
        m[i * d + q] = s * mp + c * mq;
    }
}

}  // namespace detail

/// SVD of a general square matrix by one-sided Jacobi: columns of A are
/// orthogonalized by right rotations accumulated into V, then U and the
/// singular values are read off the column norms. Sign convention: the
/// largest-magnitude entry of every U column is made nonnegative (the V
/// column flips in tandem); equal singular values keep original column
/// order. The result is a pure function of the input bits.
inline SvdFactors svd(const Tensor& a) {
    if (a.ndim() != 2 || a.rows() != a.cols()) {
        throw ParameterError("svd: expects a square matrix, got " +
                             mate::detail::shape_str(a.shape()));
    }
    if (!all_finite(a)) throw ParameterError("svd: non-finite input");
    const std::size_t d = a.rows();

    std::vector<double> g = a.value();  // working copy, columns rotated in place
    std::vector<double> v(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;

    // columns whose norm falls below eps-scale of the largest column carry
    // no information; rotating against them never terminates
    double scale_sq = 0.0;
    for (std::size_t j = 0; j < d; ++j)
        scale_sq = std::max(scale_sq, detail::column_dot(g, d, j, j));
    const double floor_factor = static_cast<double>(d) * 1e-15;
    const double col_floor_sq = scale_sq * floor_factor * floor_factor;

    const double tol = 1e-15;
    const int max_sweeps = 60;
    int sweep = 0;
    for (; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double app = detail::column_dot(g, d, p, p);
                const double aqq = detail::column_dot(g, d, q, q);
                const double apq = detail::column_dot(g, d, p, q);
                if (app <= col_floor_sq || aqq <= col_floor_sq) continue;
                if (apq * apq <= tol * tol * app * aqq) continue;
                rotated = true;
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                detail::rotate_columns(g, d, p, q, c, s);
                detail::rotate_columns(v, d, p, q, c, s);
            }
        }
        if (!rotated) break;
    }
    if (sweep == max_sweeps) {
        throw NumericError("svd: no convergence after " +
                           std::to_string(max_sweeps) + " sweeps");
    }

    std::vector<double> sigma(d);
    for (std::size_t j = 0; j < d; ++j)
        sigma[j] = std::sqrt(detail::column_dot(g, d, j, j));

    // descending order, ties keep original column order
    std::vector<std::size_t> perm(d);
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    double sigma_max = 0.0;
    for (double sv : sigma) sigma_max = std::max(sigma_max, sv);
    const double rank_tol = sigma_max * static_cast<double>(d) * 1e-15;

    std::vector<double> u(d * d, 0.0);
    std::vector<double> s_sorted(d);
    std::vector<double> v_sorted(d * d);
    std::size_t rank = 0;
    for (std::size_t jj = 0; jj < d; ++jj) {
        const std::size_t src = perm[jj];
        s_sorted[jj] = sigma[src];
        for (std::size_t i = 0; i < d; ++i) v_sorted[i * d + jj] = v[i * d + src];
        if (sigma[src] > rank_tol && sigma[src] > 0.0) {
            for (std::size_t i = 0; i < d; ++i)
                u[i * d + jj] = g[i * d + src] / sigma[src];
            rank = jj + 1;
        }
    }

    // complete U to an orthonormal basis for the null columns
    std::size_t candidate = 0;
    for (std::size_t jj = rank; jj < d; ++jj) {
        while (true) {
            if (candidate >= d) {
                throw NumericError("svd: failed to complete orthonormal basis");
            }
            std::vector<double> w(d, 0.0);
            w[candidate++] = 1.0;
            for (std::size_t k = 0; k < jj; ++k) {
                double proj = 0.0;
                for (std::size_t i = 0; i < d; ++i) proj += w[i] * u[i * d + k];
                for (std::size_t i = 0; i < d; ++i) w[i] -= proj * u[i * d + k];
            }
            double norm = 0.0;
            for (double wi : w) norm += wi * wi;
            norm = std::sqrt(norm);
            if (norm > 0.5) {  // candidate not already spanned
                for (std::size_t i = 0; i < d; ++i) u[i * d + jj] = w[i] / norm;
                break;
            }
        }
    }

    // sign convention: largest-|entry| of each U column made nonnegative
    for (std::size_t j = 0; j < d; ++j) {
        std::size_t arg = 0;
        double best = std::abs(u[j]);
        for (std::size_t i = 1; i < d; ++i) {
            const double m = std::abs(u[i * d + j]);
            if (m > best) {
                best = m;
                arg = i;
            }
        }
        if (u[arg * d + j] < 0.0) {
            for (std::size_t i = 0; i < d; ++i) {
                u[i * d + j] = -u[i * d + j];
                v_sorted[i * d + j] = -v_sorted[i * d + j];
            }
        }
    }

    return SvdFactors{Tensor::matrix(d, d, std::move(u)),
                      Tensor::from_vector(std::move(s_sorted)),
                      Tensor::matrix(d, d, std::move(v_sorted))};
}

/// Row-wise softmax of a matrix (unit temperature), max-subtracted.
inline Tensor row_softmax(const Tensor& a) {
    if (a.ndim() != 2) {
        throw ParameterError("row_softmax: expects a matrix, got " +
                             mate::detail::shape_str(a.shape()));
    }
    if (!all_finite(a)) throw NumericError("row_softmax: non-finite input");
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        double mx = a.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, a.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = std::exp(a.at(i, j) - mx);
            z += out[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
    }
    return Tensor::matrix(r, c, std::move(out));
}

/// Arithmetic mean of equal-length vectors with Kahan compensation.
inline Tensor corpus_mean(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ParameterError("corpus_mean: empty input");
    const std::size_t d = xs[0].size();
    for (const auto& x : xs) {
        if (x.ndim() != 1 || x.size() != d) {
            throw ParameterError("corpus_mean: inconsistent dimensions");
        }
    }
    std::vector<double> sum(d, 0.0), comp(d, 0.0);
    for (const auto& x : xs) {
        for (std::size_t i = 0; i < d; ++i) {
            const double y = x.at(i) - comp[i];
            const double t = sum[i] + y;
            comp[i] = (t - sum[i]) - y;
            sum[i] = t;
        }
    }
    const double inv = 1.0 / static_cast<double>(xs.size());
    for (double& v : sum) v *= inv;
    return Tensor::from_vector(std::move(sum));
}

// ---- small value-level helpers shared by the head construction ----

inline double frobenius_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.value()) s += v * v;
    return std::sqrt(s);
}

/// || M^T M - I ||_F for a square matrix.
inline double orthogonality_defect(const Tensor& m) {
    const std::size_t d = m.rows();
    double defect = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += m.at(k, i) * m.at(k, j);
            const double target = (i == j) ? 1.0 : 0.0;
            defect += (s - target) * (s - target);
        }
    }
    return std::sqrt(defect);
}

/// || U diag(S) V^T - A ||_F / max(1, ||A||_F).
inline double reconstruction_error(const SvdFactors& f, const Tensor& a) {
    const std::size_t d = a.rows();
    double err = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k)
                s += f.u.at(i, k) * f.s.at(k) * f.v.at(j, k);
            const double diff = s - a.at(i, j);
            err += diff * diff;
        }
    }
    return std::sqrt(err) / std::max(1.0, frobenius_norm(a));
}

}  // namespace mate::linalg
