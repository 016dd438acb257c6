#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mqvtg/tensor.hpp"
#include "mqvtg/trainer.hpp"

namespace mqvtg {

// ---------------------------------------------------------------------------
// 2-D projection (PCA)
// ---------------------------------------------------------------------------

namespace detail {

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.rows(), t.cols());
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t.at(r, c);
    return m;
}

// Flip each eigenvector so its largest-magnitude component is positive; the
// eigensolver's sign choice is otherwise arbitrary and would make coordinates
// non-reproducible across library versions.
inline void fix_sign(Eigen::VectorXd& v) {
    Eigen::Index argmax = 0;
    v.cwiseAbs().maxCoeff(&argmax);
    if (v(argmax) < 0.0) v = -v;
}

}  // namespace detail

// Projects M points in d dimensions onto the top-2 principal components of
// their covariance. Output is M x 2 (mean-centered input times the two
// eigenvectors), so translation of the input does not move the picture.
inline Tensor project_2d(const Tensor& points) {
    if (points.rows() < 2)
        throw std::invalid_argument("project_2d: need at least 2 points, got " +
                                    std::to_string(points.rows()));
    Eigen::MatrixXd X = detail::to_eigen(points);
    X.rowwise() -= X.colwise().mean();
    if (X.cwiseAbs().maxCoeff() == 0.0)
        throw std::invalid_argument("project_2d: all points identical (rank-deficient input)");
    Eigen::MatrixXd cov =
        (X.transpose() * X) / static_cast<double>(points.rows() > 1 ? points.rows() - 1 : 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success)
        throw std::runtime_error("project_2d: eigendecomposition failed");
    // Eigenvalues come back ascending; take the last two columns.
    const Eigen::Index d = cov.rows();
    Eigen::VectorXd pc1 = solver.eigenvectors().col(d - 1);
    Eigen::VectorXd pc2 = Eigen::VectorXd::Zero(d);
    if (d >= 2) pc2 = solver.eigenvectors().col(d - 2);
    detail::fix_sign(pc1);
    if (d >= 2) detail::fix_sign(pc2);
    Tensor out(points.rows(), 2);
    for (std::size_t r = 0; r < points.rows(); ++r) {
        out.at(r, 0) = X.row(static_cast<Eigen::Index>(r)).dot(pc1);
        out.at(r, 1) = d >= 2 ? X.row(static_cast<Eigen::Index>(r)).dot(pc2) : 0.0;
    }
    return out;
}

// Fraction of total variance captured by the top-2 components; handy for
// judging whether a 2-D picture is faithful at all.
inline double explained_variance_2d(const Tensor& points) {
    if (points.rows() < 2) throw std::invalid_argument("explained_variance_2d: need >= 2 points");
    Eigen::MatrixXd X = detail::to_eigen(points);
    X.rowwise() -= X.colwise().mean();
    Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(points.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    const double total = solver.eigenvalues().sum();
    if (total <= 0.0) return 0.0;
    const Eigen::Index d = cov.rows();
    double top = solver.eigenvalues()(d - 1);
    if (d >= 2) top += solver.eigenvalues()(d - 2);
    return top / total;
}

// ---------------------------------------------------------------------------
// Embedding map (labelled 2-D scatter of clips and codewords)
// ---------------------------------------------------------------------------

struct EmbeddingMap {
    // Parallel arrays; labels are "foreground", "background" or "codeword".
    std::vector<std::string> labels;
    Tensor coords;  // N x 2
};

// Joint PCA over foreground clips, background clips, and effective codewords,
// so all three groups land in one coordinate system.
inline EmbeddingMap embedding_map(const Tensor& fg, const Tensor& bg, const Tensor& codewords) {
    const std::size_t n = fg.rows() + bg.rows() + codewords.rows();
    if (n < 2) throw std::invalid_argument("embedding_map: need at least 2 points overall");
    const std::size_t d = std::max({fg.cols(), bg.cols(), codewords.cols()});
    auto check = [&](const Tensor& t, const char* what) {
        if (t.rows() > 0 && t.cols() != d)
            throw std::invalid_argument(std::string("embedding_map: ") + what +
                                        " width does not match the other groups");
    };
    check(fg, "foreground");
    check(bg, "background");
    check(codewords, "codeword");

    Tensor all(n, d);
    EmbeddingMap map;
    std::size_t r = 0;
    auto append = [&](const Tensor& t, const char* label) {
        for (std::size_t i = 0; i < t.rows(); ++i, ++r) {
            for (std::size_t c = 0; c < d; ++c) all.at(r, c) = t.at(i, c);
            map.labels.emplace_back(label);
        }
    };
    append(fg, "foreground");
    append(bg, "background");
    append(codewords, "codeword");
    map.coords = project_2d(all);
    return map;
}

inline void write_embedding_csv(std::ostream& os, const EmbeddingMap& map) {
    os << "point_id,label,x,y\n";
    for (std::size_t i = 0; i < map.labels.size(); ++i)
        os << i << "," << map.labels[i] << "," << format_double(map.coords.at(i, 0)) << ","
           << format_double(map.coords.at(i, 1)) << "\n";
}

// ---------------------------------------------------------------------------
// Foreground/background separation statistics
// ---------------------------------------------------------------------------

struct SeparationStats {
    double silhouette = 0.0;             // mean silhouette over both classes, in [-1, 1]
    double centroid_gap = 0.0;           // L2 distance between class means
    double linear_probe_accuracy = 0.0;  // least-squares probe, in [0, 1]
};

inline SeparationStats separation_stats(const Tensor& fg, const Tensor& bg) {
    if (fg.rows() < 2 || bg.rows() < 2)
        throw std::invalid_argument("separation_stats: each class needs >= 2 points");
    if (fg.cols() != bg.cols())
        throw std::invalid_argument("separation_stats: class widths differ");
    const std::size_t d = fg.cols();
    const std::size_t A = fg.rows(), B = bg.rows();

    // Silhouette with the fg/bg split as the 2-clustering: for each point,
    // a = mean distance to its own class (excluding itself), b = mean distance
    // to the other class, s = (b - a) / max(a, b).
    auto dist = [&](const Tensor& x, std::size_t i, const Tensor& y, std::size_t j) {
        return std::sqrt(squared_distance(x, i, y, j));
    };
    auto mean_to = [&](const Tensor& x, std::size_t i, const Tensor& y, bool skip_self) {
        double total = 0.0;
        std::size_t count = 0;
        for (std::size_t j = 0; j < y.rows(); ++j) {
            if (skip_self && &x == &y && i == j) continue;
            total += dist(x, i, y, j);
            ++count;
        }
        return total / static_cast<double>(count);
    };
    double sil = 0.0;
    for (std::size_t i = 0; i < A; ++i) {
        const double a = mean_to(fg, i, fg, true);
        const double b = mean_to(fg, i, bg, false);
        const double m = std::max(a, b);
        sil += m > 0.0 ? (b - a) / m : 0.0;
    }
    for (std::size_t i = 0; i < B; ++i) {
        const double a = mean_to(bg, i, bg, true);
        const double b = mean_to(bg, i, fg, false);
        const double m = std::max(a, b);
        sil += m > 0.0 ? (b - a) / m : 0.0;
    }

    SeparationStats out;
    out.silhouette = sil / static_cast<double>(A + B);

    double gap = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
        double ma = 0.0, mb = 0.0;
        for (std::size_t i = 0; i < A; ++i) ma += fg.at(i, c);
        for (std::size_t i = 0; i < B; ++i) mb += bg.at(i, c);
        ma /= static_cast<double>(A);
        mb /= static_cast<double>(B);
        gap += (ma - mb) * (ma - mb);
    }
    out.centroid_gap = std::sqrt(gap);

    // Linear probe: ridge-regularized least squares on [x, 1] -> {+1, -1},
    // evaluated on the training points themselves (a capacity probe, not a
    // generalization estimate). The tiny ridge keeps the normal equations
    // solvable when the points are collinear.
    Eigen::MatrixXd X(A + B, d + 1);
    Eigen::VectorXd y(A + B);
    for (std::size_t i = 0; i < A; ++i) {
        for (std::size_t c = 0; c < d; ++c)
            X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = fg.at(i, c);
        X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = 1.0;
        y(static_cast<Eigen::Index>(i)) = 1.0;
    }
    for (std::size_t i = 0; i < B; ++i) {
        const Eigen::Index r = static_cast<Eigen::Index>(A + i);
        for (std::size_t c = 0; c < d; ++c)
            X(r, static_cast<Eigen::Index>(c)) = bg.at(i, c);
        X(r, static_cast<Eigen::Index>(d)) = 1.0;
        y(r) = -1.0;
    }
    Eigen::MatrixXd gram = X.transpose() * X;
    gram.diagonal().array() += 1e-8;
    Eigen::VectorXd w = gram.ldlt().solve(X.transpose() * y);
    Eigen::VectorXd pred = X * w;
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < pred.size(); ++i)
        if ((pred(i) >= 0.0) == (y(i) > 0.0)) ++correct;
    out.linear_probe_accuracy = static_cast<double>(correct) / static_cast<double>(A + B);
    return out;
}

// ---------------------------------------------------------------------------
// Codebook evolution across snapshots
// ---------------------------------------------------------------------------

struct EvolutionPoint {
    std::size_t epoch = 0;
    std::size_t effective_count = 0;
    double dispersion = 0.0;  // mean pairwise L2 among effective codewords
};

inline std::vector<EvolutionPoint> evolution_report(
    const std::vector<CodebookSnapshot>& snapshots) {
    if (snapshots.empty()) throw std::invalid_argument("evolution_report: no snapshots");
    std::vector<EvolutionPoint> out;
    out.reserve(snapshots.size());
    for (const auto& snap : snapshots) {
        EvolutionPoint p;
        p.epoch = snap.epoch;
        p.effective_count = snap.effective_ids.size();
        const auto& ids = snap.effective_ids;
        if (ids.size() >= 2) {
            double total = 0.0;
            std::size_t pairs = 0;
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = i + 1; j < ids.size(); ++j) {
                    total += std::sqrt(squared_distance(snap.entries, ids[i], snap.entries, ids[j]));
                    ++pairs;
                }
            p.dispersion = total / static_cast<double>(pairs);
        }
        out.push_back(p);
    }
    return out;
}

inline void write_evolution_csv(std::ostream& os, const std::vector<EvolutionPoint>& series) {
    os << "epoch,effective_count,dispersion\n";
    for (const auto& p : series)
        os << p.epoch << "," << p.effective_count << "," << format_double(p.dispersion) << "\n";
}

}  // namespace mqvtg
