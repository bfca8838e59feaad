#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tpl/common.hpp"

namespace tpl {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;    // allocated lazily by the backward pass
    bool requires_grad = false;  // leaf parameter flag
    bool tracked = false;        // participates in some recorded computation
};

inline std::size_t shape_numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

}  // namespace detail

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ')';
    return os.str();
}

// Dense row-major tensor of 64-bit floats. A Tensor is a cheap shared handle:
// copies alias the same storage, which is what the tape's closures rely on.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->value.assign(detail::shape_numel(t.node_->shape), 0.0);
        t.node_->requires_grad = requires_grad;
        t.node_->tracked = requires_grad;
        return t;
    }

    static Tensor full(std::vector<std::size_t> shape, double v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor ones(std::vector<std::size_t> shape) { return full(std::move(shape), 1.0); }

    static Tensor from(std::vector<std::size_t> shape, std::vector<double> data,
                       bool requires_grad = false) {
        if (detail::shape_numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        t.node_->tracked = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    // Accessors are const members returning mutable references: a Tensor is a
    // handle, and const-ness of the handle does not freeze the shared storage
    // (the tape's closures depend on this).
    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }

    std::size_t rows() const { return rank() == 2 ? node_->shape[0] : size(); }
    std::size_t cols() const { return rank() == 2 ? node_->shape[1] : 1; }

    std::vector<double>& data() const { return node_->value; }

    double& at(std::size_t i) const { return node_->value[i]; }
    double& at(std::size_t i, std::size_t j) const {
        return node_->value[i * node_->shape[1] + j];
    }

    double item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool tracked() const { return node_ && node_->tracked; }
    void mark_tracked() const { node_->tracked = true; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::vector<double>& grad() const {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
        return node_->grad;
    }
    void zero_grad() const {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    // Deep copy of values (gradient state is not copied).
    Tensor clone() const {
        Tensor t = Tensor::from(node_->shape, node_->value, node_->requires_grad);
        return t;
    }

    bool same_storage(const Tensor& o) const { return node_ == o.node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Reverse-mode tape: an ordered log of recorded operations. Inputs of every
// node were recorded (or are leaves) before the node itself, so running the
// closures once, in reverse, accumulates exact chain-rule gradients.
class Tape {
public:
    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and walks the tape backwards exactly once.
    void backward(Tensor loss) {
        if (loss.size() != 1)
            throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        loss.grad()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

namespace detail {

inline bool want_grad(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape) return false;
    for (const Tensor* t : inputs)
        if (t->tracked()) return true;
    return false;
}

inline void require_rank2(const Tensor& t, const char* who) {
    if (t.rank() != 2) throw ShapeError(std::string(who) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) + b.at(i);
    if (detail::want_grad(tape, {&a, &b})) {
        out.mark_tracked();
        tape->record([a, b, out]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (a.tracked()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.tracked()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) * b.at(i);
    if (detail::want_grad(tape, {&a, &b})) {
        out.mark_tracked();
        tape->record([a, b, out]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (a.tracked()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.at(i);
            }
            if (b.tracked()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.at(i);
            }
        });
    }
    return out;
}

inline Tensor scale(Tape* tape, const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) * s;
    if (detail::want_grad(tape, {&a})) {
        out.mark_tracked();
        tape->record([a, out, s]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

inline Tensor add_const(Tape* tape, const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) + c;
    if (detail::want_grad(tape, {&a})) {
        out.mark_tracked();
        tape->record([a, out]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

inline Tensor relu(Tape* tape, const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) > 0.0 ? a.at(i) : 0.0;
    if (detail::want_grad(tape, {&a})) {
        out.mark_tracked();
        tape->record([a, out]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (a.at(i) > 0.0) ga[i] += g[i];
        });
    }
    return out;
}

inline Tensor sum_all(Tape* tape, const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i);
    Tensor out = Tensor::scalar(s);
    if (detail::want_grad(tape, {&a})) {
        out.mark_tracked();
        tape->record([a, out]() {
            if (!out.has_grad()) return;
            double g = out.grad()[0];
            auto& ga = a.grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(Tape* tape, const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i);
    Tensor out = Tensor::scalar(s * inv);
    if (detail::want_grad(tape, {&a})) {
        out.mark_tracked();
        tape->record([a, out, inv]() {
            if (!out.has_grad()) return;
            double g = out.grad()[0] * inv;
            auto& ga = a.grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

// Broadcasts a length-m vector over every row of an n-by-m matrix.
inline Tensor add_rowvec(Tape* tape, const Tensor& x, const Tensor& b) {
    detail::require_rank2(x, "add_rowvec");
    if (b.size() != x.cols())
        throw ShapeError("add_rowvec: bias " + shape_str(b.shape()) + " vs matrix " + shape_str(x.shape()));
    const std::size_t n = x.rows(), m = x.cols();
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.at(i, j) = x.at(i, j) + b.at(j);
    if (detail::want_grad(tape, {&x, &b})) {
        out.mark_tracked();
        tape->record([x, b, out, n, m]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (x.tracked()) {
                auto& gx = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (b.tracked()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
            }
        });
    }
    return out;
}

inline Tensor concat_vec(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1)
        throw ShapeError("concat_vec: expected rank-1 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    Tensor out = Tensor::zeros({a.size() + b.size()});
    for (std::size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i);
    for (std::size_t i = 0; i < b.size(); ++i) out.at(a.size() + i) = b.at(i);
    if (detail::want_grad(tape, {&a, &b})) {
        out.mark_tracked();
        tape->record([a, b, out]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (a.tracked()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
            }
            if (b.tracked()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[a.size() + i];
            }
        });
    }
    return out;
}

inline Tensor concat_rows(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "concat_rows");
    detail::require_rank2(b, "concat_rows");
    if (a.cols() != b.cols())
        throw ShapeError("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.cols();
    Tensor out = Tensor::zeros({a.rows() + b.rows(), m});
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
    if (detail::want_grad(tape, {&a, &b})) {
        out.mark_tracked();
        tape->record([a, b, out]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (a.tracked()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
            }
            if (b.tracked()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[a.size() + i];
            }
        });
    }
    return out;
}

inline Tensor gather_rows(Tape* tape, const Tensor& x, const std::vector<std::size_t>& idx) {
    detail::require_rank2(x, "gather_rows");
    const std::size_t m = x.cols();
    for (std::size_t r : idx)
        if (r >= x.rows())
            throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
    Tensor out = Tensor::zeros({idx.size(), m});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * m), m,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * m));
    if (detail::want_grad(tape, {&x})) {
        out.mark_tracked();
        tape->record([x, out, idx, m]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < m; ++j) gx[idx[i] * m + j] += g[i * m + j];
        });
    }
    return out;
}

// Row lookup into an embedding table by integer id.
inline Tensor embedding_rows(Tape* tape, const Tensor& table, const std::vector<int>& ids) {
    detail::require_rank2(table, "embedding_rows");
    std::vector<std::size_t> idx(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows())
            throw ContractError("embedding_rows: token id " + std::to_string(ids[i]) +
                                " overflows vocabulary of size " + std::to_string(table.rows()));
        idx[i] = static_cast<std::size_t>(ids[i]);
    }
    return gather_rows(tape, table, idx);
}

inline Tensor slice_cols(Tape* tape, const Tensor& x, std::size_t c0, std::size_t c1) {
    detail::require_rank2(x, "slice_cols");
    if (c0 >= c1 || c1 > x.cols())
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") invalid for " + shape_str(x.shape()));
    const std::size_t n = x.rows(), m = x.cols(), w = c1 - c0;
    Tensor out = Tensor::zeros({n, w});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) out.at(i, j) = x.at(i, c0 + j);
    if (detail::want_grad(tape, {&x})) {
        out.mark_tracked();
        tape->record([x, out, c0, n, m, w]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < w; ++j) gx[i * m + c0 + j] += g[i * w + j];
        });
    }
    return out;
}

inline Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::size_t n = parts[0].rows();
    std::size_t m = 0;
    for (const Tensor& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.rows() != n)
            throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
        m += p.cols();
    }
    Tensor out = Tensor::zeros({n, m});
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
        off += p.cols();
    }
    bool track = false;
    if (tape)
        for (const Tensor& p : parts) track = track || p.tracked();
    if (track) {
        out.mark_tracked();
        tape->record([parts, out, n, m]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            std::size_t off = 0;
            for (const Tensor& p : parts) {
                if (p.tracked()) {
                    auto& gp = p.grad();
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < p.cols(); ++j) gp[i * p.cols() + j] += g[i * m + off + j];
                }
                off += p.cols();
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* pc = out.data().data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = pa[i * k + p];
                if (aip == 0.0) continue;
                const double* brow = pb + p * n;
                double* crow = pc + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
            }
    }
    if (detail::want_grad(tape, {&a, &b})) {
        out.mark_tracked();
        tape->record([a, b, out, m, k, n]() {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.tracked()) {
                double* ga = a.grad().data();
                const double* pb = b.data().data();
                // dA = G · Bᵀ
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* grow = g + i * n;
                        const double* brow = pb + p * n;
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ga[i * k + p] += s;
                    }
            }
            if (b.tracked()) {
                double* gb = b.grad().data();
                const double* pa = a.data().data();
                // dB = Aᵀ · G
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = pa[i * k + p];
                        if (aip == 0.0) continue;
                        const double* grow = g + i * n;
                        double* brow = gb + p * n;
                        for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
                    }
            }
        });
    }
    return out;
}

// a · bᵀ for row-major operands of shapes (m,k) and (n,k).
inline Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul_nt");
    detail::require_rank2(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: dimension mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double* ra = a.data().data() + i * k;
            const double* rb = b.data().data() + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ra[p] * rb[p];
            out.at(i, j) = s;
        }
    if (detail::want_grad(tape, {&a, &b})) {
        out.mark_tracked();
        tape->record([a, b, out, m, k, n]() {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.tracked()) {
                double* ga = a.grad().data();
                const double* pb = b.data().data();
                // dA = G · B
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gij = g[i * n + j];
                        if (gij == 0.0) continue;
                        const double* rb = pb + j * k;
                        double* ra = ga + i * k;
                        for (std::size_t p = 0; p < k; ++p) ra[p] += gij * rb[p];
                    }
            }
            if (b.tracked()) {
                double* gb = b.grad().data();
                const double* pa = a.data().data();
                // dB = Gᵀ · A
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gij = g[i * n + j];
                        if (gij == 0.0) continue;
                        const double* ra = pa + i * k;
                        double* rb = gb + j * k;
                        for (std::size_t p = 0; p < k; ++p) rb[p] += gij * ra[p];
                    }
            }
        });
    }
    return out;
}

inline Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(tape, matmul(tape, x, w), b);
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

// Additive mask of 0 / -inf entries; nullptr means no mask. Entries are scaled
// by `scale` together with the logits before exponentiation, matching
// softmax((logits + mask) * scale) with per-row max subtraction.
inline Tensor softmax_rows(Tape* tape, const Tensor& logits, const Tensor* mask = nullptr,
                           double scale = 1.0) {
    detail::require_rank2(logits, "softmax_rows");
    const std::size_t n = logits.rows(), m = logits.cols();
    if (mask) {
        if (mask->shape() != logits.shape())
            throw ShapeError("softmax_rows: mask " + shape_str(mask->shape()) + " vs logits " +
                             shape_str(logits.shape()));
        for (std::size_t i = 0; i < mask->size(); ++i)
            if (mask->at(i) != 0.0 && mask->at(i) != kNegInf)
                throw ContractError("softmax_rows: mask entries must be 0 or -inf");
    }
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        double mx = kNegInf;
        for (std::size_t j = 0; j < m; ++j) {
            double z = logits.at(i, j) + (mask ? mask->at(i, j) : 0.0);
            z *= scale;
            out.at(i, j) = z;  // stash scaled logit
            mx = std::max(mx, z);
        }
        if (mx == kNegInf)
            throw ContractError("softmax_rows: row " + std::to_string(i) + " is fully masked");
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            double e = std::exp(out.at(i, j) - mx);
            out.at(i, j) = e;
            s += e;
        }
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < m; ++j) out.at(i, j) *= inv;
    }
    if (detail::want_grad(tape, {&logits})) {
        out.mark_tracked();
        tape->record([logits, out, n, m, scale]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& gl = logits.grad();
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * out.at(i, j);
                for (std::size_t j = 0; j < m; ++j)
                    gl[i * m + j] += scale * out.at(i, j) * (g[i * m + j] - dot);
            }
        });
    }
    return out;
}

// Pruning-aware softmax: Â_ij = exp(z_ij)·G_ij / Σ_k exp(z_ik)·G_ik with the
// adjacency G_ij = 1 on the diagonal and keep_j off it. Gradients flow into
// both the logits and the keep vector, which is what lets a straight-through
// mask upstream receive a training signal. Causal masking composes by baking
// -inf into the logits before the call.
inline Tensor masked_softmax_pruned(Tape* tape, const Tensor& logits, const Tensor& keep) {
    detail::require_rank2(logits, "masked_softmax_pruned");
    const std::size_t n = logits.rows();
    if (logits.cols() != n)
        throw ShapeError("masked_softmax_pruned: logits must be square, got " + shape_str(logits.shape()));
    if (keep.rank() != 1 || keep.size() != n)
        throw ShapeError("masked_softmax_pruned: keep " + shape_str(keep.shape()) + " vs logits " +
                         shape_str(logits.shape()));
    {
        double mx = 0.0;
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, keep.at(j));
        if (mx <= 0.0) throw ContractError("masked_softmax_pruned: keep vector has no positive entry");
    }
    Tensor out = Tensor::zeros({n, n});
    Tensor expz = Tensor::zeros({n, n});   // exp(z - rowmax), un-gated
    std::vector<double> denom(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = kNegInf;
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, logits.at(i, j));
        if (mx == kNegInf)
            throw ContractError("masked_softmax_pruned: row " + std::to_string(i) + " is fully masked");
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(logits.at(i, j) - mx);
            const double gij = (i == j) ? 1.0 : keep.at(j);
            expz.at(i, j) = e;
            const double w = e * gij;
            out.at(i, j) = w;
            s += w;
        }
        if (s <= 0.0)
            throw ContractError("masked_softmax_pruned: row " + std::to_string(i) + " has no surviving entry");
        denom[i] = s;
        const double inv = 1.0 / s;
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) *= inv;
    }
    if (detail::want_grad(tape, {&logits, &keep})) {
        out.mark_tracked();
        tape->record([logits, keep, out, expz, denom, n]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            std::vector<double> rowdot(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * out.at(i, j);
                rowdot[i] = dot;
            }
            if (logits.tracked()) {
                auto& gl = logits.grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        gl[i * n + j] += out.at(i, j) * (g[i * n + j] - rowdot[i]);
            }
            if (keep.tracked()) {
                auto& gk = keep.grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const double inv = 1.0 / denom[i];
                    for (std::size_t j = 0; j < n; ++j) {
                        if (i == j) continue;  // diagonal of G is constant
                        gk[j] += expz.at(i, j) * inv * (g[i * n + j] - rowdot[i]);
                    }
                }
            }
        });
    }
    return out;
}

// Upper-triangular -inf mask: position i may attend to j <= i only.
inline Tensor make_causal_mask(std::size_t n) {
    Tensor m = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) m.at(i, j) = kNegInf;
    return m;
}

// ---------------------------------------------------------------------------
// Losses and normalization
// ---------------------------------------------------------------------------

// Mean negative log-likelihood over the given rows of a logits matrix.
inline Tensor nll_rows(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                       const std::vector<std::size_t>& rows) {
    detail::require_rank2(logits, "nll_rows");
    if (targets.size() != rows.size())
        throw ShapeError("nll_rows: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows.size()) + " rows");
    if (rows.empty()) throw ContractError("nll_rows: no supervised rows");
    const std::size_t v = logits.cols();
    double total = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= logits.rows())
            throw ShapeError("nll_rows: row " + std::to_string(rows[r]) + " out of range");
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v)
            throw ContractError("nll_rows: target id " + std::to_string(targets[r]) +
                                " overflows vocabulary of size " + std::to_string(v));
        double mx = kNegInf;
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits.at(rows[r], j));
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) s += std::exp(logits.at(rows[r], j) - mx);
        total += mx + std::log(s) - logits.at(rows[r], static_cast<std::size_t>(targets[r]));
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    Tensor out = Tensor::scalar(total * inv);
    if (detail::want_grad(tape, {&logits})) {
        out.mark_tracked();
        tape->record([logits, out, targets, rows, v, inv]() {
            if (!out.has_grad()) return;
            const double go = out.grad()[0] * inv;
            auto& gl = logits.grad();
            for (std::size_t r = 0; r < rows.size(); ++r) {
                const std::size_t row = rows[r];
                double mx = kNegInf;
                for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits.at(row, j));
                double s = 0.0;
                for (std::size_t j = 0; j < v; ++j) s += std::exp(logits.at(row, j) - mx);
                const double invs = 1.0 / s;
                for (std::size_t j = 0; j < v; ++j) {
                    double p = std::exp(logits.at(row, j) - mx) * invs;
                    if (j == static_cast<std::size_t>(targets[r])) p -= 1.0;
                    gl[row * v + j] += go * p;
                }
            }
        });
    }
    return out;
}

inline Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    detail::require_rank2(x, "layer_norm");
    const std::size_t n = x.rows(), d = x.cols();
    if (gamma.size() != d || beta.size() != d)
        throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "," + shape_str(beta.shape()) +
                         " vs " + shape_str(x.shape()));
    Tensor out = Tensor::zeros({n, d});
    Tensor xhat = Tensor::zeros({n, d});
    std::vector<double> inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x.at(i, j);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x.at(i, j) - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (x.at(i, j) - mu) * is;
            xhat.at(i, j) = h;
            out.at(i, j) = gamma.at(j) * h + beta.at(j);
        }
    }
    if (detail::want_grad(tape, {&x, &gamma, &beta})) {
        out.mark_tracked();
        tape->record([x, gamma, beta, out, xhat, inv_std, n, d]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (gamma.tracked()) {
                auto& gg = gamma.grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat.at(i, j);
            }
            if (beta.tracked()) {
                auto& gb = beta.grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
            }
            if (x.tracked()) {
                auto& gx = x.grad();
                const double invd = 1.0 / static_cast<double>(d);
                for (std::size_t i = 0; i < n; ++i) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[i * d + j] * gamma.at(j);
                        mean_dh += dh;
                        mean_dh_h += dh * xhat.at(i, j);
                    }
                    mean_dh *= invd;
                    mean_dh_h *= invd;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = g[i * d + j] * gamma.at(j);
                        gx[i * d + j] += inv_std[i] * (dh - mean_dh - xhat.at(i, j) * mean_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Straight-through estimator
// ---------------------------------------------------------------------------

// Forward emits the given hard values; backward passes the output gradient to
// `soft` unchanged (identity Jacobian).
inline Tensor ste_passthrough(Tape* tape, const Tensor& soft, const std::vector<double>& hard) {
    if (soft.size() != hard.size())
        throw ShapeError("ste_passthrough: soft " + shape_str(soft.shape()) + " vs hard length " +
                         std::to_string(hard.size()));
    Tensor out = Tensor::from(soft.shape(), hard);
    if (detail::want_grad(tape, {&soft})) {
        out.mark_tracked();
        tape->record([soft, out]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& gs = soft.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
        });
    }
    return out;
}

// Extract one column of a matrix as a rank-1 tensor.
inline Tensor column(Tape* tape, const Tensor& x, std::size_t j) {
    detail::require_rank2(x, "column");
    if (j >= x.cols()) throw ShapeError("column: index " + std::to_string(j) + " out of range");
    const std::size_t n = x.rows(), m = x.cols();
    Tensor out = Tensor::zeros({n});
    for (std::size_t i = 0; i < n; ++i) out.at(i) = x.at(i, j);
    if (detail::want_grad(tape, {&x})) {
        out.mark_tracked();
        tape->record([x, out, j, n, m]() {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < n; ++i) gx[i * m + j] += g[i];
        });
    }
    return out;
}

}  // namespace tpl
