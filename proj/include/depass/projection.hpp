#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "depass/errors.hpp"
#include "depass/tensor.hpp"

namespace depass {

/// Rank-r orthogonal projector onto the row-span of a direction set.
struct ProjectionMatrix {
    Matrix<double> p;  // D x D, symmetric idempotent
    std::size_t rank = 0;
};

namespace detail {

struct Reflector {
    std::size_t offset;     // acts on rows offset..D-1
    std::vector<double> v;  // length D - offset
    double beta;            // H = I - beta v v^T
};

inline void apply_reflector(const Reflector& h, double* x) {
    double s = 0.0;
    for (std::size_t t = 0; t < h.v.size(); ++t) s += h.v[t] * x[h.offset + t];
    s *= h.beta;
    for (std::size_t t = 0; t < h.v.size(); ++t) x[h.offset + t] -= s * h.v[t];
}

}  // namespace detail

/// QR with column pivoting on the transposed direction matrix. The pivot
/// magnitudes decide the numerical rank (threshold 1e-8 relative to the
/// first pivot); the projector is Q_r Q_r^T over the accepted columns.
inline ProjectionMatrix projection_from_directions(const Matrix<double>& w) {
    const std::size_t c = w.rows();
    const std::size_t D = w.cols();
    if (c == 0 || D == 0) throw InputError("empty direction set");

    // A = W^T, D x c, factored in place
    Matrix<double> a(D, c);
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t d = 0; d < D; ++d) a(d, i) = w(i, d);
    }

    const std::size_t kmax = std::min(D, c);
    std::vector<detail::Reflector> reflectors;
    std::vector<double> pivots;
    for (std::size_t k = 0; k < kmax; ++k) {
        std::size_t best = k;
        double best_norm = -1.0;
        for (std::size_t j = k; j < c; ++j) {
            double s = 0.0;
            for (std::size_t d = k; d < D; ++d) s += a(d, j) * a(d, j);
            if (s > best_norm) {
                best_norm = s;
                best = j;
            }
        }
        if (best != k) {
            for (std::size_t d = 0; d < D; ++d) std::swap(a(d, k), a(d, best));
        }
        if (best_norm <= 0.0) break;

        detail::Reflector h;
        h.offset = k;
        h.v.assign(D - k, 0.0);
        for (std::size_t d = k; d < D; ++d) h.v[d - k] = a(d, k);
        double norm = std::sqrt(best_norm);
        double alpha = h.v[0] >= 0.0 ? -norm : norm;
        h.v[0] -= alpha;
        double vv = 0.0;
        for (double t : h.v) vv += t * t;
        if (vv == 0.0) {
            pivots.push_back(std::abs(alpha));
            continue;  // column already aligned with e_k
        }
        h.beta = 2.0 / vv;
        for (std::size_t j = k; j < c; ++j) {
            std::vector<double> col(D);
            for (std::size_t d = 0; d < D; ++d) col[d] = a(d, j);
            detail::apply_reflector(h, col.data());
            for (std::size_t d = 0; d < D; ++d) a(d, j) = col[d];
        }
        pivots.push_back(std::abs(a(k, k)));
        reflectors.push_back(std::move(h));
    }

    if (pivots.empty() || pivots[0] == 0.0) {
        throw NumericError("direction set spans a degenerate subspace (all rows are zero)");
    }
    std::size_t rank = 0;
    for (double p : pivots) {
        if (p > 1e-8 * pivots[0]) ++rank;
    }
    if (rank == 0) throw NumericError("direction set spans a degenerate subspace");

    // Q_r column j = H_0 ... H_{K-1} e_j
    Matrix<double> q(D, rank);
    std::vector<double> col(D);
    for (std::size_t j = 0; j < rank; ++j) {
        std::fill(col.begin(), col.end(), 0.0);
        col[j] = 1.0;
        for (std::size_t k = reflectors.size(); k-- > 0;) {
            detail::apply_reflector(reflectors[k], col.data());
        }
        for (std::size_t d = 0; d < D; ++d) q(d, j) = col[d];
    }

    ProjectionMatrix proj;
    proj.rank = rank;
    proj.p = Matrix<double>(D, D);
    for (std::size_t r = 0; r < D; ++r) {
        for (std::size_t s = 0; s < D; ++s) {
            double acc = 0.0;
            for (std::size_t j = 0; j < rank; ++j) acc += q(r, j) * q(s, j);
            proj.p(r, s) = acc;
        }
    }
    return proj;
}

inline std::pair<std::vector<double>, std::vector<double>> split_subspace(const std::vector<double>& x,
                                                                          const ProjectionMatrix& proj) {
    const std::size_t D = x.size();
    if (proj.p.rows() != D) throw InputError("projector width does not match the vector");
    std::vector<double> par(D, 0.0), perp(D, 0.0);
    for (std::size_t r = 0; r < D; ++r) {
        par[r] = dot(proj.p.row(r), x.data(), D);
        perp[r] = x[r] - par[r];
    }
    return {par, perp};
}

template <typename T>
Matrix<T> projector_as(const ProjectionMatrix& proj) {
    Matrix<T> out(proj.p.rows(), proj.p.cols());
    for (std::size_t i = 0; i < proj.p.size(); ++i) out.data()[i] = static_cast<T>(proj.p.data()[i]);
    return out;
}

}  // namespace depass
