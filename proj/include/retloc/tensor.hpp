#pragma once

// Dense double-precision tensors with tape-based reverse-mode differentiation.
//
// Design notes:
//  - 64-bit reals everywhere; gradient-check fidelity beats speed at this scale.
//  - A Tape is an ordered Wengert list. Operations append a record when a tape
//    is active and any input is tracked; backward() sweeps the list once in
//    reverse. Calling backward() twice without reset() throws.
//  - Tensors are cheap shared handles. Untracked tensors are immutable in
//    practice and safe to share across threads; a tape is single-threaded.
//  - Dense matrix products are delegated to Eigen maps; every other rule is
//    written out explicitly next to its forward pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "retloc/errors.hpp"

namespace retloc {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation
    std::int64_t id = 0;

    std::vector<double>& grad_buf() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline std::int64_t next_node_id() {
    static std::int64_t counter = 0;
    return ++counter;
}

using EigenMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMatrix>;
using ConstMatMap = Eigen::Map<const EigenMatrix>;

}  // namespace detail

class Tape;

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from(std::move(shape), {});
    }

    static Tensor full(Shape shape, double value) {
        auto n = detail::shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), false);
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}, false); }

    static Tensor from(Shape shape, std::vector<double> data) {
        auto n = detail::shape_numel(shape);
        if (data.empty()) data.assign(n, 0.0);
        if (data.size() != n)
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + detail::shape_str(shape));
        return Tensor(std::move(shape), std::move(data), false);
    }

    /// Leaf parameter: tracked by tapes, updated in place by optimizers.
    static Tensor param(Shape shape, std::vector<double> data) {
        Tensor t = from(std::move(shape), std::move(data));
        t.n_->requires_grad = true;
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::size_t rank() const { return n_->shape.size(); }
    std::size_t size() const { return n_->data.size(); }
    std::size_t dim(std::size_t i) const { return n_->shape[i]; }
    bool requires_grad() const { return n_->requires_grad; }
    /// Leaf-parameter freeze/unfreeze control; tapes skip untracked inputs.
    void set_requires_grad(bool value) { n_->requires_grad = value; }
    std::int64_t node_id() const { return n_->id; }

    std::vector<double>& data() { return n_->data; }
    const std::vector<double>& data() const { return n_->data; }

    double value() const {
        if (size() != 1)
            throw UsageError("value() requires a scalar tensor, got shape " +
                             detail::shape_str(shape()));
        return n_->data[0];
    }

    double at(std::size_t i) const { return n_->data[i]; }
    double at(std::size_t r, std::size_t c) const {
        return n_->data[r * n_->shape[1] + c];
    }

    /// Gradient buffer (zeros if backward never reached this tensor).
    const std::vector<double>& grad() const { return n_->grad_buf(); }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
    }

    std::shared_ptr<detail::TensorNode> node() const { return n_; }

private:
    friend class Tape;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad)
        : n_(std::make_shared<detail::TensorNode>()) {
        n_->shape = std::move(shape);
        n_->data = std::move(data);
        n_->requires_grad = requires_grad;
        n_->id = detail::next_node_id();
    }

    std::shared_ptr<detail::TensorNode> n_;
};

/// Wengert list recording one forward computation. Constructing a Tape makes
/// it the active tape for the current thread; operations with tracked inputs
/// append records, and backward() replays them in reverse exactly once.
class Tape {
public:
    Tape() {
        if (active_ != nullptr)
            throw UsageError("a tape is already active on this thread");
        active_ = this;
    }
    ~Tape() { active_ = nullptr; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(const std::shared_ptr<detail::TensorNode>& out,
                std::function<void()> pull) {
        records_.push_back({out, std::move(pull)});
    }

    std::size_t size() const { return records_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and sweeps the list once in reverse order,
    /// accumulating into the grad buffer of every tracked node. Using the
    /// same tape again without reset() is an error.
    void backward(const Tensor& loss) {
        if (loss.size() != 1)
            throw UsageError("backward() requires a scalar loss, got shape " +
                             detail::shape_str(loss.shape()));
        if (consumed_)
            throw UsageError("backward() called twice on the same tape; call reset()");
        consumed_ = true;
        loss.node()->grad_buf()[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (!it->out->grad.empty()) it->pull();
        }
    }

    /// Drops all records (and with them the saved activations).
    void reset() {
        records_.clear();
        consumed_ = false;
    }

private:
    struct Record {
        std::shared_ptr<detail::TensorNode> out;
        std::function<void()> pull;
    };
    std::vector<Record> records_;
    bool consumed_ = false;
    static thread_local Tape* active_;
};

inline thread_local Tape* Tape::active_ = nullptr;

namespace detail {

/// True when the op must be recorded: a tape is live and some input is tracked.
inline bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline Tensor make_output(Shape shape, std::vector<double> data, bool tracked) {
    Tensor out = Tensor::from(std::move(shape), std::move(data));
    if (tracked) out.node()->requires_grad = true;
    return out;
}

inline void accumulate(const std::shared_ptr<TensorNode>& node,
                       const double* src, std::size_t n) {
    auto& g = node->grad_buf();
    for (std::size_t i = 0; i < n; ++i) g[i] += src[i];
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() != r)
        throw DimensionError(std::string(op) + ": expected rank " +
                             std::to_string(r) + " tensor, got shape " +
                             shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// C = A·B for A[m×k], B[k×n]. Backward: dA += dC·Bᵀ, dB += Aᵀ·dC.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree, " +
                             detail::shape_str(a.shape()) + " vs " +
                             detail::shape_str(b.shape()));
    std::vector<double> out(m * n);
    {
        detail::ConstMatMap A(a.data().data(), m, k), B(b.data().data(), k, n);
        detail::MatMap C(out.data(), m, n);
        C.noalias() = A * B;
    }
    bool tracked = detail::tracking({&a, &b});
    Tensor c = detail::make_output({m, n}, std::move(out), tracked);
    if (tracked) {
        auto an = a.node(), bn = b.node(), cn = c.node();
        Tape::active()->record(cn, [an, bn, cn, m, k, n] {
            detail::ConstMatMap dC(cn->grad.data(), m, n);
            if (an->requires_grad) {
                detail::ConstMatMap B(bn->data.data(), k, n);
                detail::MatMap dA(an->grad_buf().data(), m, k);
                dA.noalias() += dC * B.transpose();
            }
            if (bn->requires_grad) {
                detail::ConstMatMap A(an->data.data(), m, k);
                detail::MatMap dB(bn->grad_buf().data(), k, n);
                dB.noalias() += A.transpose() * dC;
            }
        });
    }
    return c;
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank(x, 2, "transpose");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.at(i, j);
    bool tracked = detail::tracking({&x});
    Tensor y = detail::make_output({n, m}, std::move(out), tracked);
    if (tracked) {
        auto xn = x.node(), yn = y.node();
        Tape::active()->record(yn, [xn, yn, m, n] {
            auto& gx = xn->grad_buf();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    gx[i * n + j] += yn->grad[j * m + i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    bool tracked = detail::tracking({&a, &b});
    Tensor c = detail::make_output(a.shape(), std::move(out), tracked);
    if (tracked) {
        auto an = a.node(), bn = b.node(), cn = c.node();
        Tape::active()->record(cn, [an, bn, cn] {
            if (an->requires_grad)
                detail::accumulate(an, cn->grad.data(), cn->grad.size());
            if (bn->requires_grad)
                detail::accumulate(bn, cn->grad.data(), cn->grad.size());
        });
    }
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    bool tracked = detail::tracking({&a, &b});
    Tensor c = detail::make_output(a.shape(), std::move(out), tracked);
    if (tracked) {
        auto an = a.node(), bn = b.node(), cn = c.node();
        Tape::active()->record(cn, [an, bn, cn] {
            if (an->requires_grad)
                detail::accumulate(an, cn->grad.data(), cn->grad.size());
            if (bn->requires_grad) {
                auto& g = bn->grad_buf();
                for (std::size_t i = 0; i < cn->grad.size(); ++i)
                    g[i] -= cn->grad[i];
            }
        });
    }
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
    bool tracked = detail::tracking({&a});
    Tensor c = detail::make_output(a.shape(), std::move(out), tracked);
    if (tracked) {
        auto an = a.node(), cn = c.node();
        Tape::active()->record(cn, [an, cn, s] {
            auto& g = an->grad_buf();
            for (std::size_t i = 0; i < cn->grad.size(); ++i)
                g[i] += s * cn->grad[i];
        });
    }
    return c;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "hadamard");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    bool tracked = detail::tracking({&a, &b});
    Tensor c = detail::make_output(a.shape(), std::move(out), tracked);
    if (tracked) {
        auto an = a.node(), bn = b.node(), cn = c.node();
        Tape::active()->record(cn, [an, bn, cn] {
            if (an->requires_grad) {
                auto& g = an->grad_buf();
                for (std::size_t i = 0; i < cn->grad.size(); ++i)
                    g[i] += bn->data[i] * cn->grad[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->grad_buf();
                for (std::size_t i = 0; i < cn->grad.size(); ++i)
                    g[i] += an->data[i] * cn->grad[i];
            }
        });
    }
    return c;
}

/// relu with the subgradient at 0 defined as 0 (gradient passes only for x > 0).
inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
    bool tracked = detail::tracking({&a});
    Tensor c = detail::make_output(a.shape(), std::move(out), tracked);
    if (tracked) {
        auto an = a.node(), cn = c.node();
        Tape::active()->record(cn, [an, cn] {
            auto& g = an->grad_buf();
            for (std::size_t i = 0; i < cn->grad.size(); ++i)
                if (an->data[i] > 0.0) g[i] += cn->grad[i];
        });
    }
    return c;
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.at(i));
    bool tracked = detail::tracking({&a});
    Tensor c = detail::make_output(a.shape(), std::move(out), tracked);
    if (tracked) {
        auto an = a.node(), cn = c.node();
        Tape::active()->record(cn, [an, cn] {
            auto& g = an->grad_buf();
            for (std::size_t i = 0; i < cn->grad.size(); ++i)
                g[i] += cn->data[i] * cn->grad[i];
        });
    }
    return c;
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.at(i));
    bool tracked = detail::tracking({&a});
    Tensor c = detail::make_output(a.shape(), std::move(out), tracked);
    if (tracked) {
        auto an = a.node(), cn = c.node();
        Tape::active()->record(cn, [an, cn] {
            auto& g = an->grad_buf();
            for (std::size_t i = 0; i < cn->grad.size(); ++i)
                g[i] += cn->grad[i] / an->data[i];
        });
    }
    return c;
}

/// max(x, floor); gradient passes only where x > floor (mirrors the relu rule).
inline Tensor clamp_min(const Tensor& a, double floor_value) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.at(i), floor_value);
    bool tracked = detail::tracking({&a});
    Tensor c = detail::make_output(a.shape(), std::move(out), tracked);
    if (tracked) {
        auto an = a.node(), cn = c.node();
        Tape::active()->record(cn, [an, cn, floor_value] {
            auto& g = an->grad_buf();
            for (std::size_t i = 0; i < cn->grad.size(); ++i)
                if (an->data[i] > floor_value) g[i] += cn->grad[i];
        });
    }
    return c;
}

// ---------------------------------------------------------------------------
// Broadcast adds (row/column vectors onto 2D, scalar onto any shape)
// ---------------------------------------------------------------------------

inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    detail::require_rank(x, 2, "add_rowvec");
    detail::require_rank(b, 1, "add_rowvec");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (b.dim(0) != n)
        throw DimensionError("add_rowvec: " + detail::shape_str(x.shape()) +
                             " vs " + detail::shape_str(b.shape()));
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.at(i, j) + b.at(j);
    bool tracked = detail::tracking({&x, &b});
    Tensor c = detail::make_output({m, n}, std::move(out), tracked);
    if (tracked) {
        auto xn = x.node(), bn = b.node(), cn = c.node();
        Tape::active()->record(cn, [xn, bn, cn, m, n] {
            if (xn->requires_grad)
                detail::accumulate(xn, cn->grad.data(), cn->grad.size());
            if (bn->requires_grad) {
                auto& g = bn->grad_buf();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[j] += cn->grad[i * n + j];
            }
        });
    }
    return c;
}

inline Tensor add_colvec(const Tensor& x, const Tensor& col) {
    detail::require_rank(x, 2, "add_colvec");
    detail::require_rank(col, 1, "add_colvec");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (col.dim(0) != m)
        throw DimensionError("add_colvec: " + detail::shape_str(x.shape()) +
                             " vs " + detail::shape_str(col.shape()));
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.at(i, j) + col.at(i);
    bool tracked = detail::tracking({&x, &col});
    Tensor c = detail::make_output({m, n}, std::move(out), tracked);
    if (tracked) {
        auto xn = x.node(), vn = col.node(), cn = c.node();
        Tape::active()->record(cn, [xn, vn, cn, m, n] {
            if (xn->requires_grad)
                detail::accumulate(xn, cn->grad.data(), cn->grad.size());
            if (vn->requires_grad) {
                auto& g = vn->grad_buf();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[i] += cn->grad[i * n + j];
            }
        });
    }
    return c;
}

inline Tensor broadcast_scalar(const Tensor& s, Shape shape) {
    if (s.size() != 1)
        throw DimensionError("broadcast_scalar: source must be scalar, got " +
                             detail::shape_str(s.shape()));
    auto n = detail::shape_numel(shape);
    std::vector<double> out(n, s.at(0));
    bool tracked = detail::tracking({&s});
    Tensor c = detail::make_output(std::move(shape), std::move(out), tracked);
    if (tracked) {
        auto sn = s.node(), cn = c.node();
        Tape::active()->record(cn, [sn, cn] {
            double total = 0.0;
            for (double g : cn->grad) total += g;
            sn->grad_buf()[0] += total;
        });
    }
    return c;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {
// Iteration helper for axis reductions of arbitrary rank: the tensor is viewed
// as [outer, axis_len, inner] with the reduced axis in the middle.
struct AxisView {
    std::size_t outer, len, inner;
};
inline AxisView axis_view(const Shape& s, std::size_t axis) {
    AxisView v{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}
inline Shape drop_axis(const Shape& s, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) out.push_back(s[i]);
    if (out.empty()) out.push_back(1);
    return out;
}
}  // namespace detail

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank())
        throw DimensionError("mean_axis: axis " + std::to_string(axis) +
                             " out of range for " + detail::shape_str(x.shape()));
    auto v = detail::axis_view(x.shape(), axis);
    std::vector<double> out(v.outer * v.inner, 0.0);
    const auto& d = x.data();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t a = 0; a < v.len; ++a)
            for (std::size_t i = 0; i < v.inner; ++i)
                out[o * v.inner + i] += d[(o * v.len + a) * v.inner + i];
    const double inv = 1.0 / static_cast<double>(v.len);
    for (double& e : out) e *= inv;
    bool tracked = detail::tracking({&x});
    Tensor c = detail::make_output(detail::drop_axis(x.shape(), axis), std::move(out), tracked);
    if (tracked) {
        auto xn = x.node(), cn = c.node();
        Tape::active()->record(cn, [xn, cn, v, inv] {
            auto& g = xn->grad_buf();
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t a = 0; a < v.len; ++a)
                    for (std::size_t i = 0; i < v.inner; ++i)
                        g[(o * v.len + a) * v.inner + i] +=
                            inv * cn->grad[o * v.inner + i];
        });
    }
    return c;
}

/// Max over one axis. Ties route the gradient to the lowest index along the
/// axis, so backward is deterministic.
inline Tensor max_axis(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank())
        throw DimensionError("max_axis: axis " + std::to_string(axis) +
                             " out of range for " + detail::shape_str(x.shape()));
    auto v = detail::axis_view(x.shape(), axis);
    if (v.len == 0) throw DimensionError("max_axis: empty axis");
    std::vector<double> out(v.outer * v.inner);
    auto argmax = std::make_shared<std::vector<std::size_t>>(v.outer * v.inner);
    const auto& d = x.data();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
            std::size_t best = 0;
            double bv = d[(o * v.len) * v.inner + i];
            for (std::size_t a = 1; a < v.len; ++a) {
                double e = d[(o * v.len + a) * v.inner + i];
                if (e > bv) {  // strict: lowest index wins ties
                    bv = e;
                    best = a;
                }
            }
            out[o * v.inner + i] = bv;
            (*argmax)[o * v.inner + i] = best;
        }
    bool tracked = detail::tracking({&x});
    Tensor c = detail::make_output(detail::drop_axis(x.shape(), axis), std::move(out), tracked);
    if (tracked) {
        auto xn = x.node(), cn = c.node();
        Tape::active()->record(cn, [xn, cn, v, argmax] {
            auto& g = xn->grad_buf();
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t i = 0; i < v.inner; ++i) {
                    std::size_t a = (*argmax)[o * v.inner + i];
                    g[(o * v.len + a) * v.inner + i] += cn->grad[o * v.inner + i];
                }
        });
    }
    return c;
}

inline Tensor sum_all(const Tensor& x) {
    double total = 0.0;
    for (double e : x.data()) total += e;
    bool tracked = detail::tracking({&x});
    Tensor c = detail::make_output({1}, {total}, tracked);
    if (tracked) {
        auto xn = x.node(), cn = c.node();
        Tape::active()->record(cn, [xn, cn] {
            auto& g = xn->grad_buf();
            for (double& e : g) e += cn->grad[0];
        });
    }
    return c;
}

inline Tensor mean_all(const Tensor& x) {
    if (x.size() == 0) throw DimensionError("mean_all: empty tensor");
    return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

/// Inner product of two equally sized 1D tensors.
inline Tensor dot(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 1, "dot");
    detail::require_rank(b, 1, "dot");
    detail::require_same_shape(a, b, "dot");
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) total += a.at(i) * b.at(i);
    bool tracked = detail::tracking({&a, &b});
    Tensor c = detail::make_output({1}, {total}, tracked);
    if (tracked) {
        auto an = a.node(), bn = b.node(), cn = c.node();
        Tape::active()->record(cn, [an, bn, cn] {
            const double g = cn->grad[0];
            if (an->requires_grad) {
                auto& ga = an->grad_buf();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * bn->data[i];
            }
            if (bn->requires_grad) {
                auto& gb = bn->grad_buf();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * an->data[i];
            }
        });
    }
    return c;
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (detail::shape_numel(shape) != x.size())
        throw DimensionError("reshape: cannot view " + detail::shape_str(x.shape()) +
                             " as " + detail::shape_str(shape));
    bool tracked = detail::tracking({&x});
    Tensor c = detail::make_output(std::move(shape), x.data(), tracked);
    if (tracked) {
        auto xn = x.node(), cn = c.node();
        Tape::active()->record(cn, [xn, cn] {
            detail::accumulate(xn, cn->grad.data(), cn->grad.size());
        });
    }
    return c;
}

/// Concatenate along an axis; all other dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size())
        throw DimensionError("concat: axis out of range");
    Shape out_shape = ref;
    std::size_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != ref.size())
            throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < ref.size(); ++i)
            if (i != axis && p.shape()[i] != ref[i])
                throw DimensionError("concat: shape mismatch " +
                                     detail::shape_str(p.shape()) + " vs " +
                                     detail::shape_str(ref));
        total_axis += p.shape()[axis];
    }
    out_shape[axis] = total_axis;

    auto vout = detail::axis_view(out_shape, axis);
    std::vector<double> out(detail::shape_numel(out_shape));
    std::size_t offset = 0;
    for (const auto& p : parts) {
        auto vp = detail::axis_view(p.shape(), axis);
        const auto& d = p.data();
        for (std::size_t o = 0; o < vp.outer; ++o)
            for (std::size_t a = 0; a < vp.len; ++a)
                for (std::size_t i = 0; i < vp.inner; ++i)
                    out[(o * vout.len + offset + a) * vout.inner + i] =
                        d[(o * vp.len + a) * vp.inner + i];
        offset += vp.len;
    }

    bool tracked = Tape::active() != nullptr &&
                   std::any_of(parts.begin(), parts.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
    Tensor c = detail::make_output(std::move(out_shape), std::move(out), tracked);
    if (tracked) {
        std::vector<std::shared_ptr<detail::TensorNode>> nodes;
        nodes.reserve(parts.size());
        for (const auto& p : parts) nodes.push_back(p.node());
        auto cn = c.node();
        Tape::active()->record(cn, [nodes, cn, vout, axis] {
            std::size_t offset = 0;
            for (const auto& pn : nodes) {
                auto vp = detail::axis_view(pn->shape, axis);
                if (pn->requires_grad) {
                    auto& g = pn->grad_buf();
                    for (std::size_t o = 0; o < vp.outer; ++o)
                        for (std::size_t a = 0; a < vp.len; ++a)
                            for (std::size_t i = 0; i < vp.inner; ++i)
                                g[(o * vp.len + a) * vp.inner + i] +=
                                    cn->grad[(o * vout.len + offset + a) * vout.inner + i];
                }
                offset += vp.len;
            }
        });
    }
    return c;
}

/// Contiguous slice along the last axis, any rank.
inline Tensor slice_last(const Tensor& x, std::size_t from, std::size_t to) {
    if (x.rank() == 0 || from >= to || to > x.shape().back())
        throw DimensionError("slice_last: bad range [" + std::to_string(from) + "," +
                             std::to_string(to) + ") for " +
                             detail::shape_str(x.shape()));
    const std::size_t last = x.shape().back();
    const std::size_t width = to - from;
    const std::size_t rows = x.size() / last;
    Shape out_shape = x.shape();
    out_shape.back() = width;
    std::vector<double> out(rows * width);
    const auto& d = x.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < width; ++j)
            out[r * width + j] = d[r * last + from + j];
    bool tracked = detail::tracking({&x});
    Tensor c = detail::make_output(std::move(out_shape), std::move(out), tracked);
    if (tracked) {
        auto xn = x.node(), cn = c.node();
        Tape::active()->record(cn, [xn, cn, rows, width, last, from] {
            auto& g = xn->grad_buf();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < width; ++j)
                    g[r * last + from + j] += cn->grad[r * width + j];
        });
    }
    return c;
}

/// Gather rows of a 2D tensor; repeated indices scatter-add on backward.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
    detail::require_rank(x, 2, "gather_rows");
    const std::size_t n = x.dim(1);
    for (std::size_t r : idx)
        if (r >= x.dim(0))
            throw DimensionError("gather_rows: row " + std::to_string(r) +
                                 " out of range for " + detail::shape_str(x.shape()));
    std::vector<double> out(idx.size() * n);
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.at(idx[i], j);
    bool tracked = detail::tracking({&x});
    Tensor c = detail::make_output({idx.size(), n}, std::move(out), tracked);
    if (tracked) {
        auto xn = x.node(), cn = c.node();
        Tape::active()->record(cn, [xn, cn, idx, n] {
            auto& g = xn->grad_buf();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < n; ++j)
                    g[idx[i] * n + j] += cn->grad[i * n + j];
        });
    }
    return c;
}

/// Gather arbitrary elements by flat index into a 1D tensor.
inline Tensor gather_elems(const Tensor& x, const std::vector<std::size_t>& idx) {
    for (std::size_t i : idx)
        if (i >= x.size())
            throw DimensionError("gather_elems: index " + std::to_string(i) +
                                 " out of range");
    std::vector<double> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x.at(idx[i]);
    bool tracked = detail::tracking({&x});
    Tensor c = detail::make_output({idx.size()}, std::move(out), tracked);
    if (tracked) {
        auto xn = x.node(), cn = c.node();
        Tape::active()->record(cn, [xn, cn, idx] {
            auto& g = xn->grad_buf();
            for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += cn->grad[i];
        });
    }
    return c;
}

/// Stack 1D tensors of equal length into a 2D matrix, one per row.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw DimensionError("stack_rows: no inputs");
    const std::size_t n = rows[0].size();
    for (const auto& r : rows) {
        detail::require_rank(r, 1, "stack_rows");
        if (r.size() != n) throw DimensionError("stack_rows: length mismatch");
    }
    std::vector<double> out(rows.size() * n);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i].data().begin(), rows[i].data().end(), out.begin() + i * n);
    bool tracked = Tape::active() != nullptr &&
                   std::any_of(rows.begin(), rows.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
    Tensor c = detail::make_output({rows.size(), n}, std::move(out), tracked);
    if (tracked) {
        std::vector<std::shared_ptr<detail::TensorNode>> nodes;
        for (const auto& r : rows) nodes.push_back(r.node());
        auto cn = c.node();
        Tape::active()->record(cn, [nodes, cn, n] {
            for (std::size_t i = 0; i < nodes.size(); ++i)
                if (nodes[i]->requires_grad) {
                    auto& g = nodes[i]->grad_buf();
                    for (std::size_t j = 0; j < n; ++j) g[j] += cn->grad[i * n + j];
                }
        });
    }
    return c;
}

// ---------------------------------------------------------------------------
// Row-structured nonlinearities
// ---------------------------------------------------------------------------

/// Row-wise softmax, stabilized by subtracting each row's max before exp.
inline Tensor softmax_rows(const Tensor& x) {
    detail::require_rank(x, 2, "softmax_rows");
    const std::size_t m = x.dim(0), n = x.dim(1);
    if (m == 0 || n == 0)
        throw DimensionError("softmax_rows: empty tensor " +
                             detail::shape_str(x.shape()));
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = x.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(x.at(i, j) - mx);
            sum += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
    }
    bool tracked = detail::tracking({&x});
    Tensor y = detail::make_output({m, n}, std::move(out), tracked);
    if (tracked) {
        auto xn = x.node(), yn = y.node();
        // dx_row = y ⊙ (dy − ⟨dy, y⟩)
        Tape::active()->record(yn, [xn, yn, m, n] {
            auto& g = xn->grad_buf();
            for (std::size_t i = 0; i < m; ++i) {
                double inner = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    inner += yn->grad[i * n + j] * yn->data[i * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    g[i * n + j] +=
                        yn->data[i * n + j] * (yn->grad[i * n + j] - inner);
            }
        });
    }
    return y;
}

/// Per-row layer normalization with affine scale/shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    detail::require_rank(x, 2, "layer_norm");
    detail::require_rank(gamma, 1, "layer_norm");
    detail::require_rank(beta, 1, "layer_norm");
    const std::size_t m = x.dim(0), d = x.dim(1);
    if (d == 0) throw DimensionError("layer_norm: zero feature dimension");
    if (gamma.dim(0) != d || beta.dim(0) != d)
        throw DimensionError("layer_norm: affine params " +
                             detail::shape_str(gamma.shape()) + "/" +
                             detail::shape_str(beta.shape()) + " do not match " +
                             detail::shape_str(x.shape()));
    if (eps <= 0.0) throw UsageError("layer_norm: eps must be positive");

    std::vector<double> out(m * d);
    auto xhat = std::make_shared<std::vector<double>>(m * d);
    auto inv_std = std::make_shared<std::vector<double>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = x.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            double xh = (x.at(i, j) - mean) * is;
            (*xhat)[i * d + j] = xh;
            out[i * d + j] = gamma.at(j) * xh + beta.at(j);
        }
    }
    bool tracked = detail::tracking({&x, &gamma, &beta});
    Tensor y = detail::make_output({m, d}, std::move(out), tracked);
    if (tracked) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), yn = y.node();
        Tape::active()->record(yn, [xn, gn, bn, yn, xhat, inv_std, m, d] {
            for (std::size_t i = 0; i < m; ++i) {
                // g = gamma ⊙ dy;  dx = inv_std (g − mean(g) − xhat·mean(g⊙xhat))
                double mean_g = 0.0, mean_gx = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    double gj = gn->data[j] * yn->grad[i * d + j];
                    mean_g += gj;
                    mean_gx += gj * (*xhat)[i * d + j];
                }
                mean_g /= static_cast<double>(d);
                mean_gx /= static_cast<double>(d);
                if (xn->requires_grad) {
                    auto& gx = xn->grad_buf();
                    for (std::size_t j = 0; j < d; ++j) {
                        double gj = gn->data[j] * yn->grad[i * d + j];
                        gx[i * d + j] += (*inv_std)[i] *
                                         (gj - mean_g - (*xhat)[i * d + j] * mean_gx);
                    }
                }
                if (gn->requires_grad) {
                    auto& gg = gn->grad_buf();
                    for (std::size_t j = 0; j < d; ++j)
                        gg[j] += yn->grad[i * d + j] * (*xhat)[i * d + j];
                }
                if (bn->requires_grad) {
                    auto& gb = bn->grad_buf();
                    for (std::size_t j = 0; j < d; ++j) gb[j] += yn->grad[i * d + j];
                }
            }
        });
    }
    return y;
}

/// log Σ exp along one axis of a 2D tensor, stabilized by the axis max.
inline Tensor logsumexp_axis(const Tensor& x, std::size_t axis) {
    detail::require_rank(x, 2, "logsumexp_axis");
    if (axis > 1) throw DimensionError("logsumexp_axis: axis out of range");
    const std::size_t m = x.dim(0), n = x.dim(1);
    const std::size_t outer = axis == 1 ? m : n;
    const std::size_t len = axis == 1 ? n : m;
    auto at = [&](std::size_t o, std::size_t a) {
        return axis == 1 ? x.at(o, a) : x.at(a, o);
    };
    std::vector<double> out(outer);
    for (std::size_t o = 0; o < outer; ++o) {
        double mx = at(o, 0);
        for (std::size_t a = 1; a < len; ++a) mx = std::max(mx, at(o, a));
        double sum = 0.0;
        for (std::size_t a = 0; a < len; ++a) sum += std::exp(at(o, a) - mx);
        out[o] = mx + std::log(sum);
    }
    bool tracked = detail::tracking({&x});
    Tensor y = detail::make_output({outer}, std::move(out), tracked);
    if (tracked) {
        auto xn = x.node(), yn = y.node();
        Tape::active()->record(yn, [xn, yn, axis, m, n, outer, len] {
            auto& g = xn->grad_buf();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t a = 0; a < len; ++a) {
                    std::size_t flat = axis == 1 ? o * n + a : a * n + o;
                    g[flat] += yn->grad[o] * std::exp(xn->data[flat] - yn->data[o]);
                }
            }
        });
    }
    return y;
}

// Convenience operators used throughout the model code.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace retloc
