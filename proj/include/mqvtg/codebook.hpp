#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "mqvtg/autodiff.hpp"
#include "mqvtg/rng.hpp"
#include "mqvtg/tensor.hpp"

namespace mqvtg {

// Moment codebook: K codewords plus a jointly trained linear projection.
// The projected codebook C' = entries * W + b replaces the raw entries for
// both nearest-codeword selection and the quantization losses.

struct Codebook {
    Var entries;           // K x d
    Var projector_weight;  // d x d
    Var projector_bias;    // 1 x d
    bool projector_frozen = false;  // "basic" variant: keep W = I, b = 0

    std::size_t K() const { return entries->value.rows(); }
    std::size_t dim() const { return entries->value.cols(); }
};

// Projector starts at identity/zero so training begins from the classic
// unprojected codebook and learns to depart from it.
inline Codebook make_codebook(Tensor entries, bool projector_frozen = false) {
    if (entries.rows() == 0) throw std::invalid_argument("make_codebook: K must be >= 1");
    if (!entries.all_finite()) throw std::invalid_argument("make_codebook: non-finite entries");
    const std::size_t d = entries.cols();
    Codebook cb;
    cb.entries = make_leaf(std::move(entries), true, "codebook.entries");
    cb.projector_weight =
        make_leaf(Tensor::identity(d), !projector_frozen, "codebook.projector_weight");
    cb.projector_bias = make_leaf(Tensor::zeros(1, d), !projector_frozen, "codebook.projector_bias");
    cb.projector_frozen = projector_frozen;
    return cb;
}

inline Var project(const Codebook& cb) {
    return add(matmul(cb.entries, cb.projector_weight), cb.projector_bias);
}

struct Assignment {
    std::vector<std::size_t> indices;  // length T, values in [0, K)
    Var quantized;                     // T x d, rows gathered from C'
};

// Nearest projected codeword per row of z, squared L2, ties to the lowest
// index. The argmin itself is non-differentiable; only the row-gather that
// materializes `quantized` is on the tape (reaching entries + projector).
inline Assignment lookup(const Tensor& z, const Var& projected) {
    const Tensor& C = projected->value;
    if (z.cols() != C.cols())
        throw std::invalid_argument("lookup: dimension mismatch, z " + z.shape_str() +
                                    " vs codebook " + C.shape_str());
    if (C.rows() == 0) throw std::invalid_argument("lookup: empty codebook");
    Assignment a;
    a.indices.resize(z.rows());
    for (std::size_t t = 0; t < z.rows(); ++t) {
        std::size_t best = 0;
        double best_d = squared_distance(z, t, C, 0);
        for (std::size_t k = 1; k < C.rows(); ++k) {
            const double dk = squared_distance(z, t, C, k);
            if (dk < best_d) {  // strict: equal distances keep the lower index
                best_d = dk;
                best = k;
            }
        }
        a.indices[t] = best;
    }
    a.quantized = row_gather(projected, a.indices);
    return a;
}

inline Assignment lookup(const Var& z, const Var& projected) {
    return lookup(z->value, projected);
}

// Both losses share the forward expression mean((quantized - z)^2); they
// differ only in which side the stop-gradient lands on. Mean over all T*d
// elements keeps the lambdas scale-free across sequence length and width.

// Updates the codebook side: gradient reaches entries/projector, not z.
inline Var codebook_loss(const Var& z_t, const Assignment& assignment) {
    auto diff = subtract(assignment.quantized, stop_gradient(z_t));
    return mean(multiply(diff, diff));
}

// Updates the encoder side: gradient reaches z, not entries/projector.
inline Var commitment_loss(const Var& z_t, const Assignment& assignment) {
    auto diff = subtract(stop_gradient(assignment.quantized), z_t);
    return mean(multiply(diff, diff));
}

// ---------------------------------------------------------------------------
// k-means prior initialization (k-means++ seeding, Lloyd's iterations)
// ---------------------------------------------------------------------------

namespace detail {

inline double assignment_cost(const Tensor& pts, const Tensor& centers,
                              std::vector<std::size_t>& assign) {
    double cost = 0.0;
    for (std::size_t i = 0; i < pts.rows(); ++i) {
        std::size_t best = 0;
        double best_d = squared_distance(pts, i, centers, 0);
        for (std::size_t k = 1; k < centers.rows(); ++k) {
            const double d = squared_distance(pts, i, centers, k);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        assign[i] = best;
        cost += best_d;
    }
    return cost;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding. Deterministic for a fixed seed.
// An emptied cluster is re-seeded to the point currently farthest from its
// own center, which keeps all K centers meaningful.
inline Tensor kmeans_init(const Tensor& features, std::size_t K, std::size_t max_iters,
                          std::uint64_t seed, std::vector<double>* cost_history = nullptr) {
    const std::size_t N = features.rows();
    if (N < K)
        throw std::invalid_argument("kmeans_init: need at least K=" + std::to_string(K) +
                                    " points, got " + std::to_string(N));
    if (K == 0 || max_iters == 0)
        throw std::invalid_argument("kmeans_init: K and max_iters must be >= 1");

    Rng rng(seed);
    Tensor centers(K, features.cols());
    auto copy_center = [&](std::size_t k, std::size_t src_row) {
        for (std::size_t c = 0; c < features.cols(); ++c)
            centers.at(k, c) = features.at(src_row, c);
    };

    // k-means++: first center uniform, the rest D^2-weighted.
    copy_center(0, rng.next_below(N));
    std::vector<double> d2(N);
    for (std::size_t k = 1; k < K; ++k) {
        for (std::size_t i = 0; i < N; ++i) {
            double best = squared_distance(features, i, centers, 0);
            for (std::size_t j = 1; j < k; ++j)
                best = std::min(best, squared_distance(features, i, centers, j));
            d2[i] = best;
        }
        double total = 0.0;
        for (double w : d2) total += w;
        // All remaining mass at zero (duplicate points): fall back to uniform.
        copy_center(k, total > 0.0 ? rng.sample_weighted(d2) : rng.next_below(N));
    }

    std::vector<std::size_t> assign(N);
    double prev_cost = std::numeric_limits<double>::infinity();
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        const double cost = detail::assignment_cost(features, centers, assign);
        if (cost_history) cost_history->push_back(cost);
        if (cost >= prev_cost) break;  // converged (Lloyd's cost is non-increasing)
        prev_cost = cost;

        Tensor sums(K, features.cols());
        std::vector<std::size_t> counts(K, 0);
        for (std::size_t i = 0; i < N; ++i) {
            ++counts[assign[i]];
            for (std::size_t c = 0; c < features.cols(); ++c)
                sums.at(assign[i], c) += features.at(i, c);
        }
        for (std::size_t k = 0; k < K; ++k) {
            if (counts[k] > 0) {
                for (std::size_t c = 0; c < features.cols(); ++c)
                    centers.at(k, c) = sums.at(k, c) / static_cast<double>(counts[k]);
            } else {
                // Re-seed to the globally farthest point from its center.
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < N; ++i) {
                    const double d = squared_distance(features, i, centers, assign[i]);
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                copy_center(k, far);
            }
        }
    }
    return centers;
}

// Fraction of codewords that received at least one assignment.
inline double utilization(const std::vector<std::size_t>& index_histogram) {
    if (index_histogram.empty()) return 0.0;
    std::size_t used = 0;
    for (std::size_t c : index_histogram)
        if (c > 0) ++used;
    return static_cast<double>(used) / static_cast<double>(index_histogram.size());
}

inline std::vector<std::size_t> histogram_from_indices(const std::vector<std::size_t>& indices,
                                                       std::size_t K) {
    std::vector<std::size_t> h(K, 0);
    for (std::size_t i : indices) {
        if (i >= K) throw std::out_of_range("histogram_from_indices: index out of range");
        ++h[i];
    }
    return h;
}

}  // namespace mqvtg
