#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mqvtg/tensor.hpp"

namespace mqvtg {

// Reverse-mode autodiff over a define-by-run graph. Values are computed
// eagerly as ops are applied; backward() walks the tape in reverse
// topological order. Graphs are rebuilt every step. Everything is double
// precision and single-threaded per graph; distinct graphs are independent.

namespace detail {
inline thread_local int no_grad_depth = 0;
inline thread_local std::uint64_t node_counter = 0;
}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Suspends tape recording (evaluation-only forwards).
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated on demand, same shape as value
    std::vector<Var> parents;
    // Reads this->grad, accumulates into parents' grads. Empty for leaves
    // and for anything recorded under NoGradGuard.
    std::function<void()> backprop;
    bool requires_grad = false;
    std::string name;

    void ensure_grad() {
        if (grad.numel() != value.numel())
            grad = Tensor::zeros(value.rows(), value.cols());
    }
    void zero_grad() { grad = Tensor(); }
};

inline Var make_leaf(Tensor value, bool requires_grad = false, std::string name = {}) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad && grad_enabled();
    n->name = name.empty() ? ("leaf#" + std::to_string(detail::node_counter++)) : std::move(name);
    return n;
}

inline Var constant(Tensor value, std::string name = {}) {
    return make_leaf(std::move(value), false, std::move(name));
}

namespace detail {

[[noreturn]] inline void shape_error(const std::string& op, const std::string& detail_msg) {
    throw std::invalid_argument("shape mismatch in " + op + ": " + detail_msg);
}

inline void check_finite(const Tensor& t, const std::string& node_name) {
    if (!t.all_finite())
        throw std::runtime_error("non-finite value in node '" + node_name + "'");
}

inline Var make_op(const std::string& op, Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->name = op + "#" + std::to_string(node_counter++);
    check_finite(value, n->name);
    n->value = std::move(value);
    if (grad_enabled()) {
        for (const auto& p : parents)
            if (p->requires_grad) n->requires_grad = true;
        if (n->requires_grad) {
            n->parents = std::move(parents);
            Node* raw = n.get();
            n->backprop = [raw, fn = std::move(backprop)]() { fn(*raw); };
        }
    }
    return n;
}

inline void accumulate(const Var& p, const Tensor& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad.add_in_place(g);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Op catalog
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    const Tensor& A = a->value;
    const Tensor& B = b->value;
    if (A.cols() != B.rows())
        detail::shape_error("matmul", A.shape_str() + " * " + B.shape_str());
    Tensor out(A.rows(), B.cols());
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t k = 0; k < A.cols(); ++k) {
            const double aik = A.at(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < B.cols(); ++j)
                out.at(i, j) += aik * B.at(k, j);
        }
    return detail::make_op("matmul", std::move(out), {a, b}, [a, b](Node& n) {
        const Tensor& G = n.grad;
        const Tensor& A = a->value;
        const Tensor& B = b->value;
        if (a->requires_grad) {  // dA = G * B^T
            Tensor ga(A.rows(), A.cols());
            for (std::size_t i = 0; i < A.rows(); ++i)
                for (std::size_t j = 0; j < B.cols(); ++j) {
                    const double g = G.at(i, j);
                    if (g == 0.0) continue;
                    for (std::size_t k = 0; k < A.cols(); ++k)
                        ga.at(i, k) += g * B.at(k, j);
                }
            detail::accumulate(a, ga);
        }
        if (b->requires_grad) {  // dB = A^T * G
            Tensor gb(B.rows(), B.cols());
            for (std::size_t i = 0; i < A.rows(); ++i)
                for (std::size_t k = 0; k < A.cols(); ++k) {
                    const double aik = A.at(i, k);
                    if (aik == 0.0) continue;
                    for (std::size_t j = 0; j < B.cols(); ++j)
                        gb.at(k, j) += aik * G.at(i, j);
                }
            detail::accumulate(b, gb);
        }
    });
}

namespace detail {

enum class Broadcast { same, row, scalar };

inline Broadcast classify_broadcast(const std::string& op, const Tensor& a, const Tensor& b) {
    if (a.same_shape(b)) return Broadcast::same;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
    if (b.numel() == 1) return Broadcast::scalar;
    shape_error(op, a.shape_str() + " vs " + b.shape_str());
}

// Reduce a full-shape gradient back onto a broadcast operand.
inline Tensor reduce_broadcast(const Tensor& g, Broadcast mode) {
    if (mode == Broadcast::same) return g;
    if (mode == Broadcast::row) {
        Tensor out(1, g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) out.at(0, c) += g.at(r, c);
        return out;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < g.numel(); ++i) s += g[i];
    return Tensor::scalar(s);
}

inline double broadcast_at(const Tensor& b, Broadcast mode, std::size_t r, std::size_t c) {
    switch (mode) {
        case Broadcast::same: return b.at(r, c);
        case Broadcast::row: return b.at(0, c);
        default: return b[0];
    }
}

}  // namespace detail

// add/subtract/multiply accept equal shapes, a 1xC row broadcast against the
// rows of a, or a 1x1 scalar broadcast (all the listed primitives need).
inline Var add(const Var& a, const Var& b) {
    const auto mode = detail::classify_broadcast("add", a->value, b->value);
    Tensor out(a->value.rows(), a->value.cols());
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c)
            out.at(r, c) = a->value.at(r, c) + detail::broadcast_at(b->value, mode, r, c);
    return detail::make_op("add", std::move(out), {a, b}, [a, b, mode](Node& n) {
        detail::accumulate(a, n.grad);
        if (b->requires_grad) detail::accumulate(b, detail::reduce_broadcast(n.grad, mode));
    });
}

inline Var subtract(const Var& a, const Var& b) {
    const auto mode = detail::classify_broadcast("subtract", a->value, b->value);
    Tensor out(a->value.rows(), a->value.cols());
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c)
            out.at(r, c) = a->value.at(r, c) - detail::broadcast_at(b->value, mode, r, c);
    return detail::make_op("subtract", std::move(out), {a, b}, [a, b, mode](Node& n) {
        detail::accumulate(a, n.grad);
        if (b->requires_grad) {
            Tensor g = n.grad;
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] = -g[i];
            detail::accumulate(b, detail::reduce_broadcast(g, mode));
        }
    });
}

inline Var multiply(const Var& a, const Var& b) {
    const auto mode = detail::classify_broadcast("multiply", a->value, b->value);
    Tensor out(a->value.rows(), a->value.cols());
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c)
            out.at(r, c) = a->value.at(r, c) * detail::broadcast_at(b->value, mode, r, c);
    return detail::make_op("multiply", std::move(out), {a, b}, [a, b, mode](Node& n) {
        if (a->requires_grad) {
            Tensor ga(n.grad.rows(), n.grad.cols());
            for (std::size_t r = 0; r < ga.rows(); ++r)
                for (std::size_t c = 0; c < ga.cols(); ++c)
                    ga.at(r, c) = n.grad.at(r, c) * detail::broadcast_at(b->value, mode, r, c);
            detail::accumulate(a, ga);
        }
        if (b->requires_grad) {
            Tensor gb(n.grad.rows(), n.grad.cols());
            for (std::size_t r = 0; r < gb.rows(); ++r)
                for (std::size_t c = 0; c < gb.cols(); ++c)
                    gb.at(r, c) = n.grad.at(r, c) * a->value.at(r, c);
            detail::accumulate(b, detail::reduce_broadcast(gb, mode));
        }
    });
}

inline Var scale(const Var& a, double k) {
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= k;
    return detail::make_op("scale", std::move(out), {a}, [a, k](Node& n) {
        Tensor g = n.grad;
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= k;
        detail::accumulate(a, g);
    });
}

inline Var relu(const Var& a) {
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return detail::make_op("relu", std::move(out), {a}, [a](Node& n) {
        Tensor g(n.grad.rows(), n.grad.cols());
        for (std::size_t i = 0; i < g.numel(); ++i)
            g[i] = a->value[i] > 0.0 ? n.grad[i] : 0.0;
        detail::accumulate(a, g);
    });
}

inline Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    Tensor saved = out;
    return detail::make_op("sigmoid", std::move(out), {a}, [a, saved](Node& n) {
        Tensor g(n.grad.rows(), n.grad.cols());
        for (std::size_t i = 0; i < g.numel(); ++i)
            g[i] = n.grad[i] * saved[i] * (1.0 - saved[i]);
        detail::accumulate(a, g);
    });
}

inline Var exponential(const Var& a) {
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    Tensor saved = out;
    return detail::make_op("exponential", std::move(out), {a}, [a, saved](Node& n) {
        Tensor g(n.grad.rows(), n.grad.cols());
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * saved[i];
        detail::accumulate(a, g);
    });
}

inline Var logarithm(const Var& a) {
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    return detail::make_op("logarithm", std::move(out), {a}, [a](Node& n) {
        Tensor g(n.grad.rows(), n.grad.cols());
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] / a->value[i];
        detail::accumulate(a, g);
    });
}

// Softmax along axis (0 = down columns, 1 = across rows), max-shifted.
inline Var softmax(const Var& a, int axis) {
    if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
    const Tensor& A = a->value;
    Tensor out(A.rows(), A.cols());
    const std::size_t lanes = axis == 1 ? A.rows() : A.cols();
    const std::size_t extent = axis == 1 ? A.cols() : A.rows();
    auto at = [&](const Tensor& t, std::size_t lane, std::size_t i) -> double {
        return axis == 1 ? t.at(lane, i) : t.at(i, lane);
    };
    auto set = [&](Tensor& t, std::size_t lane, std::size_t i, double v) {
        if (axis == 1) t.at(lane, i) = v; else t.at(i, lane) = v;
    };
    for (std::size_t l = 0; l < lanes; ++l) {
        double mx = at(A, l, 0);
        for (std::size_t i = 1; i < extent; ++i) mx = std::max(mx, at(A, l, i));
        double denom = 0.0;
        for (std::size_t i = 0; i < extent; ++i) {
            const double e = std::exp(at(A, l, i) - mx);
            set(out, l, i, e);
            denom += e;
        }
        for (std::size_t i = 0; i < extent; ++i) set(out, l, i, at(out, l, i) / denom);
    }
    Tensor saved = out;
    return detail::make_op("softmax", std::move(out), {a}, [a, saved, axis](Node& n) {
        const std::size_t lanes = axis == 1 ? saved.rows() : saved.cols();
        const std::size_t extent = axis == 1 ? saved.cols() : saved.rows();
        auto at = [&](const Tensor& t, std::size_t lane, std::size_t i) -> double {
            return axis == 1 ? t.at(lane, i) : t.at(i, lane);
        };
        Tensor g(saved.rows(), saved.cols());
        for (std::size_t l = 0; l < lanes; ++l) {
            double dot = 0.0;
            for (std::size_t i = 0; i < extent; ++i) dot += at(n.grad, l, i) * at(saved, l, i);
            for (std::size_t i = 0; i < extent; ++i) {
                const double v = at(saved, l, i) * (at(n.grad, l, i) - dot);
                if (axis == 1) g.at(l, i) = v; else g.at(i, l) = v;
            }
        }
        detail::accumulate(a, g);
    });
}

// Per-row normalization (x - mean) / sqrt(var + eps); no affine parameters.
inline Var layer_normalize(const Var& a, double eps = 1e-5) {
    const Tensor& A = a->value;
    Tensor out(A.rows(), A.cols());
    std::vector<double> inv_sigma(A.rows());
    const double n_cols = static_cast<double>(A.cols());
    for (std::size_t r = 0; r < A.rows(); ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < A.cols(); ++c) mu += A.at(r, c);
        mu /= n_cols;
        double var = 0.0;
        for (std::size_t c = 0; c < A.cols(); ++c) {
            const double d = A.at(r, c) - mu;
            var += d * d;
        }
        var /= n_cols;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (std::size_t c = 0; c < A.cols(); ++c) out.at(r, c) = (A.at(r, c) - mu) * is;
    }
    Tensor saved = out;
    return detail::make_op("layer-normalize", std::move(out), {a},
                           [a, saved, inv_sigma](Node& n) {
        const double n_cols = static_cast<double>(saved.cols());
        Tensor g(saved.rows(), saved.cols());
        for (std::size_t r = 0; r < saved.rows(); ++r) {
            double gbar = 0.0, gy = 0.0;
            for (std::size_t c = 0; c < saved.cols(); ++c) {
                gbar += n.grad.at(r, c);
                gy += n.grad.at(r, c) * saved.at(r, c);
            }
            gbar /= n_cols;
            gy /= n_cols;
            for (std::size_t c = 0; c < saved.cols(); ++c)
                g.at(r, c) = inv_sigma[r] * (n.grad.at(r, c) - gbar - saved.at(r, c) * gy);
        }
        detail::accumulate(a, g);
    });
}

namespace detail {

// axis -1: full reduction to 1x1; axis 0: 1xC column stats; axis 1: Rx1 row stats.
inline Tensor reduce(const Tensor& A, int axis, bool mean) {
    if (axis == -1) {
        double s = 0.0;
        for (std::size_t i = 0; i < A.numel(); ++i) s += A[i];
        return Tensor::scalar(mean ? s / static_cast<double>(A.numel()) : s);
    }
    if (axis == 0) {
        Tensor out(1, A.cols());
        for (std::size_t r = 0; r < A.rows(); ++r)
            for (std::size_t c = 0; c < A.cols(); ++c) out.at(0, c) += A.at(r, c);
        if (mean)
            for (std::size_t c = 0; c < A.cols(); ++c) out.at(0, c) /= static_cast<double>(A.rows());
        return out;
    }
    if (axis == 1) {
        Tensor out(A.rows(), 1);
        for (std::size_t r = 0; r < A.rows(); ++r)
            for (std::size_t c = 0; c < A.cols(); ++c) out.at(r, 0) += A.at(r, c);
        if (mean)
            for (std::size_t r = 0; r < A.rows(); ++r) out.at(r, 0) /= static_cast<double>(A.cols());
        return out;
    }
    throw std::invalid_argument("reduce: axis must be -1, 0 or 1");
}

inline Var reduction_op(const char* opname, const Var& a, int axis, bool is_mean) {
    Tensor out = reduce(a->value, axis, is_mean);
    const std::size_t in_rows = a->value.rows(), in_cols = a->value.cols();
    return make_op(opname, std::move(out), {a}, [a, axis, is_mean, in_rows, in_cols](Node& n) {
        double denom = 1.0;
        if (is_mean)
            denom = axis == -1 ? static_cast<double>(in_rows * in_cols)
                  : axis == 0  ? static_cast<double>(in_rows)
                               : static_cast<double>(in_cols);
        Tensor g(in_rows, in_cols);
        for (std::size_t r = 0; r < in_rows; ++r)
            for (std::size_t c = 0; c < in_cols; ++c) {
                const double up = axis == -1 ? n.grad[0] : axis == 0 ? n.grad.at(0, c) : n.grad.at(r, 0);
                g.at(r, c) = up / denom;
            }
        detail::accumulate(a, g);
    });
}

}  // namespace detail

inline Var sum(const Var& a, int axis = -1) { return detail::reduction_op("sum", a, axis, false); }
inline Var mean(const Var& a, int axis = -1) { return detail::reduction_op("mean", a, axis, true); }

// Sum of squared elementwise differences, as a 1x1 scalar.
inline Var squared_l2_distance(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value))
        detail::shape_error("squared-L2-distance", a->value.shape_str() + " vs " + b->value.shape_str());
    double s = 0.0;
    for (std::size_t i = 0; i < a->value.numel(); ++i) {
        const double d = a->value[i] - b->value[i];
        s += d * d;
    }
    return detail::make_op("squared-L2-distance", Tensor::scalar(s), {a, b}, [a, b](Node& n) {
        const double g = n.grad[0];
        if (a->requires_grad) {
            Tensor ga(a->value.rows(), a->value.cols());
            for (std::size_t i = 0; i < ga.numel(); ++i)
                ga[i] = 2.0 * g * (a->value[i] - b->value[i]);
            detail::accumulate(a, ga);
        }
        if (b->requires_grad) {
            Tensor gb(b->value.rows(), b->value.cols());
            for (std::size_t i = 0; i < gb.numel(); ++i)
                gb[i] = -2.0 * g * (a->value[i] - b->value[i]);
            detail::accumulate(b, gb);
        }
    });
}

inline Var concatenate(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concatenate: no inputs");
    if (axis != 0 && axis != 1) throw std::invalid_argument("concatenate: axis must be 0 or 1");
    std::size_t rows = parts[0]->value.rows(), cols = parts[0]->value.cols();
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const Tensor& t = parts[i]->value;
        if (axis == 0) {
            if (t.cols() != cols) detail::shape_error("concatenate", "column counts differ");
            rows += t.rows();
        } else {
            if (t.rows() != rows) detail::shape_error("concatenate", "row counts differ");
            cols += t.cols();
        }
    }
    Tensor out(rows, cols);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const Tensor& t = p->value;
        for (std::size_t r = 0; r < t.rows(); ++r)
            for (std::size_t c = 0; c < t.cols(); ++c) {
                if (axis == 0) out.at(offset + r, c) = t.at(r, c);
                else out.at(r, offset + c) = t.at(r, c);
            }
        offset += axis == 0 ? t.rows() : t.cols();
    }
    return detail::make_op("concatenate", std::move(out), parts, [parts, axis](Node& n) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
            const std::size_t pr = p->value.rows(), pc = p->value.cols();
            if (p->requires_grad) {
                Tensor g(pr, pc);
                for (std::size_t r = 0; r < pr; ++r)
                    for (std::size_t c = 0; c < pc; ++c)
                        g.at(r, c) = axis == 0 ? n.grad.at(offset + r, c) : n.grad.at(r, offset + c);
                detail::accumulate(p, g);
            }
            offset += axis == 0 ? pr : pc;
        }
    });
}

inline Var concatenate(const Var& a, const Var& b, int axis) {
    return concatenate(std::vector<Var>{a, b}, axis);
}

// Select rows of m by index; gradient scatter-adds into m.
inline Var row_gather(const Var& m, std::vector<std::size_t> indices) {
    const Tensor& M = m->value;
    Tensor out(indices.size(), M.cols());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= M.rows())
            throw std::out_of_range("row-gather: index " + std::to_string(indices[r]) +
                                    " out of range for " + M.shape_str());
        for (std::size_t c = 0; c < M.cols(); ++c) out.at(r, c) = M.at(indices[r], c);
    }
    return detail::make_op("row-gather", std::move(out), {m},
                           [m, idx = std::move(indices)](Node& n) {
        Tensor g(m->value.rows(), m->value.cols());
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c)
                g.at(idx[r], c) += n.grad.at(r, c);
        detail::accumulate(m, g);
    });
}

namespace detail {

inline Var max_pool_impl(const Var& a, std::size_t group, std::size_t out_rows, bool over_cols) {
    const Tensor& A = a->value;
    Tensor out;
    std::vector<std::size_t> argmax;  // winning flat index per output element
    if (over_cols) {  // pool across the columns of each row -> Rx1
        out = Tensor(A.rows(), 1);
        argmax.resize(A.rows());
        for (std::size_t r = 0; r < A.rows(); ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < A.cols(); ++c)
                if (A.at(r, c) > A.at(r, best)) best = c;  // ties keep lowest index
            out.at(r, 0) = A.at(r, best);
            argmax[r] = r * A.cols() + best;
        }
    } else {  // pool groups of `group` consecutive rows -> (rows/group)xC
        out = Tensor(out_rows, A.cols());
        argmax.resize(out_rows * A.cols());
        for (std::size_t g = 0; g < out_rows; ++g)
            for (std::size_t c = 0; c < A.cols(); ++c) {
                std::size_t best = g * group;
                for (std::size_t r = g * group + 1; r < (g + 1) * group; ++r)
                    if (A.at(r, c) > A.at(best, c)) best = r;
                out.at(g, c) = A.at(best, c);
                argmax[g * A.cols() + c] = best * A.cols() + c;
            }
    }
    return make_op("max-pool", std::move(out), {a}, [a, argmax](Node& n) {
        Tensor g(a->value.rows(), a->value.cols());
        for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += n.grad[i];
        detail::accumulate(a, g);
    });
}

}  // namespace detail

// Max over an axis: axis 0 collapses all rows (one group), axis 1 collapses
// each row to a single column. Ties resolve to the lowest index.
inline Var max_pool(const Var& a, int axis) {
    if (axis == 0) return detail::max_pool_impl(a, a->value.rows(), 1, false);
    if (axis == 1) return detail::max_pool_impl(a, 0, 0, true);
    throw std::invalid_argument("max-pool: axis must be 0 or 1");
}

// Max over groups of `group` consecutive rows ((T*P)xd -> Txd patch pooling).
inline Var max_pool_rows(const Var& a, std::size_t group) {
    if (group == 0 || a->value.rows() % group != 0)
        detail::shape_error("max-pool", "group " + std::to_string(group) +
                            " does not divide " + a->value.shape_str());
    return detail::max_pool_impl(a, group, a->value.rows() / group, false);
}

// Pairwise cosine similarity between rows: (Mxd, Nxd) -> MxN.
inline Var cosine_similarity(const Var& a, const Var& b, double eps = 1e-12) {
    const Tensor& A = a->value;
    const Tensor& B = b->value;
    if (A.cols() != B.cols())
        detail::shape_error("cosine-similarity", A.shape_str() + " vs " + B.shape_str());
    std::vector<double> na(A.rows()), nb(B.rows());
    for (std::size_t i = 0; i < A.rows(); ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < A.cols(); ++c) s += A.at(i, c) * A.at(i, c);
        na[i] = std::sqrt(s) + eps;
    }
    for (std::size_t j = 0; j < B.rows(); ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < B.cols(); ++c) s += B.at(j, c) * B.at(j, c);
        nb[j] = std::sqrt(s) + eps;
    }
    Tensor out(A.rows(), B.rows());
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < B.rows(); ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < A.cols(); ++c) dot += A.at(i, c) * B.at(j, c);
            out.at(i, j) = dot / (na[i] * nb[j]);
        }
    Tensor saved = out;
    return detail::make_op("cosine-similarity", std::move(out), {a, b},
                           [a, b, saved, na, nb](Node& n) {
        const Tensor& A = a->value;
        const Tensor& B = b->value;
        // d cos_ij / dA_i = B_j/(|A_i||B_j|) - cos_ij * A_i/|A_i|^2
        if (a->requires_grad) {
            Tensor ga(A.rows(), A.cols());
            for (std::size_t i = 0; i < A.rows(); ++i)
                for (std::size_t j = 0; j < B.rows(); ++j) {
                    const double g = n.grad.at(i, j);
                    if (g == 0.0) continue;
                    const double cs = saved.at(i, j);
                    for (std::size_t c = 0; c < A.cols(); ++c)
                        ga.at(i, c) += g * (B.at(j, c) / (na[i] * nb[j]) -
                                            cs * A.at(i, c) / (na[i] * na[i]));
                }
            detail::accumulate(a, ga);
        }
        if (b->requires_grad) {
            Tensor gb(B.rows(), B.cols());
            for (std::size_t i = 0; i < A.rows(); ++i)
                for (std::size_t j = 0; j < B.rows(); ++j) {
                    const double g = n.grad.at(i, j);
                    if (g == 0.0) continue;
                    const double cs = saved.at(i, j);
                    for (std::size_t c = 0; c < B.cols(); ++c)
                        gb.at(j, c) += g * (A.at(i, c) / (na[i] * nb[j]) -
                                            cs * B.at(j, c) / (nb[j] * nb[j]));
                }
            detail::accumulate(b, gb);
        }
    });
}

// Identity forward, zero backward. The output never requires grad, so the
// tape simply stops here.
inline Var stop_gradient(const Var& a) {
    auto n = std::make_shared<Node>();
    n->value = a->value;
    n->requires_grad = false;
    n->name = "stop-gradient#" + std::to_string(detail::node_counter++);
    return n;
}

// ---------------------------------------------------------------------------
// Utility ops (identity-style gradients)
// ---------------------------------------------------------------------------

inline Var transpose(const Var& a) {
    return detail::make_op("transpose", a->value.transposed(), {a}, [a](Node& n) {
        detail::accumulate(a, n.grad.transposed());
    });
}

inline Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
    if (rows * cols != a->value.numel())
        detail::shape_error("reshape", a->value.shape_str() + " -> " + std::to_string(rows) +
                            "x" + std::to_string(cols));
    Tensor out(rows, cols, a->value.data());
    return detail::make_op("reshape", std::move(out), {a}, [a](Node& n) {
        detail::accumulate(a, Tensor(a->value.rows(), a->value.cols(), n.grad.data()));
    });
}

// Straight-through substitute: forward is an exact copy of `discrete`,
// backward passes the incoming gradient to `continuous` unchanged. The
// discrete branch gets nothing (it is trained by its own loss).
inline Var straight_through(const Var& discrete, const Var& continuous) {
    if (!discrete->value.same_shape(continuous->value))
        detail::shape_error("straight-through", discrete->value.shape_str() + " vs " +
                            continuous->value.shape_str());
    Tensor out = discrete->value;
    return detail::make_op("straight-through", std::move(out), {continuous},
                           [continuous](Node& n) {
        detail::accumulate(continuous, n.grad);
    });
}

// log(1 + exp(x)) composed from catalog primitives; derivative is sigmoid.
inline Var softplus(const Var& a) {
    auto one = constant(Tensor::ones(a->value.rows(), a->value.cols()));
    return logarithm(add(exponential(a), one));
}

// ---------------------------------------------------------------------------
// Backward pass and gradient checking
// ---------------------------------------------------------------------------

inline void backward(const Var& loss) {
    if (loss->value.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " +
                                    loss->value.shape_str());
    if (!loss->requires_grad) return;  // nothing on the tape

    // Iterative post-order DFS over the requires_grad subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        bool descended = false;
        while (next_child < node->parents.size()) {
            Node* p = node->parents[next_child++].get();
            if (p->requires_grad && visited.insert(p).second) {
                stack.emplace_back(p, 0);
                descended = true;
                break;
            }
        }
        if (!descended && next_child >= node->parents.size()) {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        n->ensure_grad();
        if (n->backprop) n->backprop();
        detail::check_finite(n->grad, n->name + " (grad)");
    }
}

// Max over all leaf elements of |analytic - central difference| relative
// error. `build` must construct a fresh scalar graph from the given leaves.
inline double grad_check(const std::function<Var(const std::vector<Var>&)>& build,
                         std::vector<Tensor> points, double eps = 1e-5) {
    if (!(eps > 0.0) || eps > 1e-2)
        throw std::invalid_argument("grad_check: eps must be in (0, 1e-2]");
    for (const auto& p : points)
        if (!p.all_finite()) throw std::invalid_argument("grad_check: non-finite leaf value");

    std::vector<Var> leaves;
    leaves.reserve(points.size());
    for (auto& p : points) leaves.push_back(make_leaf(p, true));
    Var loss = build(leaves);
    backward(loss);

    auto eval = [&](const std::vector<Tensor>& pts) {
        NoGradGuard ng;
        std::vector<Var> ls;
        ls.reserve(pts.size());
        for (const auto& p : pts) ls.push_back(make_leaf(p, false));
        return build(ls)->value.item();
    };

    double worst = 0.0;
    for (std::size_t li = 0; li < points.size(); ++li) {
        leaves[li]->ensure_grad();
        for (std::size_t i = 0; i < points[li].numel(); ++i) {
            const double original = points[li][i];
            points[li][i] = original + eps;
            const double f_plus = eval(points);
            points[li][i] = original - eps;
            const double f_minus = eval(points);
            points[li][i] = original;
            const double numeric = (f_plus - f_minus) / (2.0 * eps);
            const double analytic = leaves[li]->grad[i];
            const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
            worst = std::max(worst, std::fabs(analytic - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace mqvtg
