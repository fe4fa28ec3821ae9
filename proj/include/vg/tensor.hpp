#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "vg/error.hpp"

namespace vg {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

template <typename T>
class Tape;

// One value buffer in the computation graph. Values are either owned
// (store) or a read-only view of another node's memory (replicas share the
// master's parameter values but keep private gradients).
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> store;
    const T* data = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    std::string name;
    const void* tape = nullptr;  // tape that created this node, null for leaves

    std::size_t size() const { return shape_numel(shape); }
};

// Handle to a Node. Cheap to copy; all ops below build new nodes and record
// their adjoints on the active tape.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor leaf(Shape shape, std::vector<T> values, bool requires_grad = false,
                       std::string name = {}) {
        if (shape_numel(shape) != values.size())
            throw DimError("leaf " + name + ": shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->store = std::move(values);
        n->data = n->store.data();
        n->requires_grad = requires_grad;
        if (requires_grad) n->grad.assign(n->store.size(), T(0));
        n->name = std::move(name);
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false, std::string name = {}) {
        std::vector<T> v(shape_numel(shape), T(0));
        return leaf(std::move(shape), std::move(v), requires_grad, std::move(name));
    }

    static Tensor scalar(T v, bool requires_grad = false, std::string name = {}) {
        return leaf({1}, {v}, requires_grad, std::move(name));
    }

    // Same values (viewed, not copied), fresh gradient accumulator. The
    // master tensor must outlive the replica.
    Tensor replica() const {
        auto n = std::make_shared<Node<T>>();
        n->shape = node_->shape;
        n->data = node_->data;
        n->requires_grad = node_->requires_grad;
        if (n->requires_grad) n->grad.assign(size(), T(0));
        n->name = node_->name;
        return Tensor(std::move(n));
    }

    // Point this leaf's values at another tensor's storage.
    void bind_values(const Tensor& master) {
        if (master.shape() != shape())
            throw DimError("bind_values: " + shape_str(master.shape()) + " vs " + shape_str(shape()));
        node_->store.clear();
        node_->store.shrink_to_fit();
        node_->data = master.data();
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->size(); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::string& name() const { return node_->name; }

    const T* data() const { return node_->data; }
    T value(std::size_t i = 0) const { return node_->data[i]; }
    T item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }
    std::vector<T> values() const { return std::vector<T>(data(), data() + size()); }

    // Mutable access to owned storage (parameter updates, FD perturbation).
    T* mutable_data() {
        if (node_->store.empty() && size() != 0)
            throw ContractError("mutable_data() on a view tensor " + node_->name);
        return node_->store.data();
    }

    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& grad_mut() { return node_->grad; }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

    std::shared_ptr<Node<T>> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}
    std::shared_ptr<Node<T>> node_;

    template <typename U>
    friend class Tape;
};

// Reverse-mode tape: ops append adjoint closures in execution order;
// backward() replays them in exact reverse. Tapes are single-threaded, but
// independent tapes may run concurrently.
template <typename T>
class Tape {
public:
    Tensor<T> make(Shape shape, bool requires_grad) {
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->store.assign(shape_numel(n->shape), T(0));
        n->data = n->store.data();
        n->requires_grad = requires_grad && grad_enabled_;
        if (n->requires_grad) {
            n->grad.assign(n->store.size(), T(0));
            nodes_.push_back(n);
        }
        n->tape = this;
        return Tensor<T>(std::move(n));
    }

    // Register an adjoint step. `inputs` are the op's operands; leaves among
    // them (nodes not created by this tape) are tracked so that each backward
    // pass lands in their persistent accumulator as exactly one addition per
    // element, keeping repeated-backward additivity bit-exact.
    void record(std::initializer_list<std::shared_ptr<Node<T>>> inputs, std::function<void()> fn) {
        if (!grad_enabled_) return;
        for (const auto& n : inputs) {
            if (n->tape != this && n->requires_grad && seen_external_.insert(n.get()).second)
                externals_.push_back(n);
        }
        steps_.push_back(std::move(fn));
    }

    bool grad_enabled() const { return grad_enabled_; }
    void set_grad_enabled(bool on) { grad_enabled_ = on; }

    // Seeds d loss/d loss = 1 and accumulates into every requires_grad leaf.
    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (loss.node()->tape != this) throw ContractError("backward: loss is not on this tape");
        if (!loss.requires_grad()) throw ContractError("backward: loss does not require grad");
        for (auto& n : nodes_) std::fill(n->grad.begin(), n->grad.end(), T(0));
        std::vector<std::vector<T>> saved(externals_.size());
        for (std::size_t i = 0; i < externals_.size(); ++i) {
            saved[i] = std::move(externals_[i]->grad);
            externals_[i]->grad.assign(saved[i].size(), T(0));
        }
        loss.node()->grad[0] = T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
        for (std::size_t i = 0; i < externals_.size(); ++i) {
            auto& g = externals_[i]->grad;
            const auto& s = saved[i];
            for (std::size_t j = 0; j < g.size(); ++j) g[j] = s[j] + g[j];
        }
    }

    void clear() {
        steps_.clear();
        nodes_.clear();
        externals_.clear();
        seen_external_.clear();
    }

    std::size_t num_steps() const { return steps_.size(); }

private:
    std::vector<std::function<void()>> steps_;
    std::vector<std::shared_ptr<Node<T>>> nodes_;
    std::vector<std::shared_ptr<Node<T>>> externals_;
    std::unordered_set<const Node<T>*> seen_external_;
    bool grad_enabled_ = true;
};

namespace detail {

// C[m x n] (+)= op(A) . op(B); row-major, accumulating.
template <typename T>
void gemm_acc(T* c, const T* a, const T* b, int m, int k, int n, bool ta, bool tb) {
    if (!ta && !tb) {
        for (int i = 0; i < m; ++i) {
            T* cr = c + static_cast<std::size_t>(i) * n;
            const T* ar = a + static_cast<std::size_t>(i) * k;
            for (int p = 0; p < k; ++p) {
                const T av = ar[p];
                const T* br = b + static_cast<std::size_t>(p) * n;
                for (int j = 0; j < n; ++j) cr[j] += av * br[j];
            }
        }
    } else if (!ta && tb) {
        // C[i,j] += dot(A[i,:], B[j,:])
        for (int i = 0; i < m; ++i) {
            const T* ar = a + static_cast<std::size_t>(i) * k;
            T* cr = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const T* br = b + static_cast<std::size_t>(j) * k;
                T s = 0;
                for (int p = 0; p < k; ++p) s += ar[p] * br[p];
                cr[j] += s;
            }
        }
    } else if (ta && !tb) {
        // C[i,j] += sum_p A[p,i] * B[p,j]
        for (int p = 0; p < k; ++p) {
            const T* ar = a + static_cast<std::size_t>(p) * m;
            const T* br = b + static_cast<std::size_t>(p) * n;
            for (int i = 0; i < m; ++i) {
                const T av = ar[i];
                T* cr = c + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) cr[j] += av * br[j];
            }
        }
    } else {
        // C[i,j] += sum_p A[p,i] * B[j,p]
        for (int i = 0; i < m; ++i) {
            T* cr = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const T* br = b + static_cast<std::size_t>(j) * k;
                T s = 0;
                for (int p = 0; p < k; ++p) s += a[static_cast<std::size_t>(p) * m + i] * br[p];
                cr[j] += s;
            }
        }
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul_any(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimError("matmul: need rank-2 operands, got " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    const int m = ta ? a.dim(1) : a.dim(0);
    const int k = ta ? a.dim(0) : a.dim(1);
    const int kb = tb ? b.dim(1) : b.dim(0);
    const int n = tb ? b.dim(0) : b.dim(1);
    if (k != kb)
        throw DimError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                       (ta ? "^T" : "") + " vs " + shape_str(b.shape()) + (tb ? "^T" : ""));
    auto out = tp.make({m, n}, a.requires_grad() || b.requires_grad());
    detail::gemm_acc(out.node()->store.data(), a.data(), b.data(), m, k, n, ta, tb);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        tp.record({an, bn}, [an, bn, on, m, k, n, ta, tb] {
            const T* g = on->grad.data();
            if (an->requires_grad) {
                // dA = dC . B^T (layout depends on the transpose flags)
                if (!ta && !tb)
                    detail::gemm_acc(an->grad.data(), g, bn->data, m, n, k, false, true);
                else if (!ta && tb)
                    detail::gemm_acc(an->grad.data(), g, bn->data, m, n, k, false, false);
                else if (ta && !tb)
                    detail::gemm_acc(an->grad.data(), bn->data, g, k, n, m, false, true);
                else
                    detail::gemm_acc(an->grad.data(), bn->data, g, k, n, m, true, true);
            }
            if (bn->requires_grad) {
                if (!ta && !tb)
                    detail::gemm_acc(bn->grad.data(), an->data, g, k, m, n, true, false);
                else if (!ta && tb)
                    detail::gemm_acc(bn->grad.data(), g, an->data, n, m, k, true, false);
                else if (ta && !tb)
                    detail::gemm_acc(bn->grad.data(), an->data, g, k, m, n, false, false);
                else
                    detail::gemm_acc(bn->grad.data(), g, an->data, n, m, k, true, true);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> matmul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return matmul_any(tp, a, b, false, false);
}

// a . b^T
template <typename T>
Tensor<T> matmul_nt(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return matmul_any(tp, a, b, false, true);
}

// a^T . b
template <typename T>
Tensor<T> matmul_tn(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return matmul_any(tp, a, b, true, false);
}

// Batched product over the leading dimension: [B,m,k] x [B,k,n] -> [B,m,n].
// With tb set, b is [B,n,k] and used transposed.
template <typename T>
Tensor<T> bmm_any(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b, bool tb) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw DimError("bmm: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int B = a.dim(0), m = a.dim(1), k = a.dim(2);
    const int kb = tb ? b.dim(2) : b.dim(1);
    const int n = tb ? b.dim(1) : b.dim(2);
    if (k != kb)
        throw DimError("bmm: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()) + (tb ? "^T" : ""));
    auto out = tp.make({B, m, n}, a.requires_grad() || b.requires_grad());
    const std::size_t sa = static_cast<std::size_t>(m) * k;
    const std::size_t sb = static_cast<std::size_t>(b.dim(1)) * b.dim(2);
    const std::size_t so = static_cast<std::size_t>(m) * n;
    for (int h = 0; h < B; ++h)
        detail::gemm_acc(out.node()->store.data() + h * so, a.data() + h * sa, b.data() + h * sb,
                         m, k, n, false, tb);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        tp.record({an, bn}, [an, bn, on, B, m, k, n, tb, sa, sb, so] {
            for (int h = 0; h < B; ++h) {
                const T* g = on->grad.data() + h * so;
                if (an->requires_grad) {
                    if (!tb)
                        detail::gemm_acc(an->grad.data() + h * sa, g, bn->data + h * sb, m, n, k, false, true);
                    else
                        detail::gemm_acc(an->grad.data() + h * sa, g, bn->data + h * sb, m, n, k, false, false);
                }
                if (bn->requires_grad) {
                    if (!tb)
                        detail::gemm_acc(bn->grad.data() + h * sb, an->data + h * sa, g, k, m, n, true, false);
                    else
                        detail::gemm_acc(bn->grad.data() + h * sb, g, an->data + h * sa, n, m, k, true, false);
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> bmm(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return bmm_any(tp, a, b, false);
}

template <typename T>
Tensor<T> bmm_nt(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return bmm_any(tp, a, b, true);
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { add, sub, mul, div, min, max };

// Binary elementwise op; one operand may be a size-1 scalar tensor, which is
// broadcast against the other.
template <typename T>
Tensor<T> binary(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b, BinOp op, const char* opname) {
    const bool sa = a.size() == 1, sb = b.size() == 1;
    if (!sa && !sb) require_same_shape(a, b, opname);
    const Shape& oshape = sa && !sb ? b.shape() : a.shape();
    const std::size_t n = shape_numel(oshape);
    auto out = tp.make(oshape, a.requires_grad() || b.requires_grad());
    T* o = out.node()->store.data();
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = pa[sa ? 0 : i], y = pb[sb ? 0 : i];
        switch (op) {
            case BinOp::add: o[i] = x + y; break;
            case BinOp::sub: o[i] = x - y; break;
            case BinOp::mul: o[i] = x * y; break;
            case BinOp::div: o[i] = x / y; break;
            case BinOp::min: o[i] = x <= y ? x : y; break;
            case BinOp::max: o[i] = x >= y ? x : y; break;
        }
    }
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        tp.record({an, bn}, [an, bn, on, n, sa, sb, op] {
            const T* g = on->grad.data();
            const T* pa = an->data;
            const T* pb = bn->data;
            for (std::size_t i = 0; i < n; ++i) {
                const T x = pa[sa ? 0 : i], y = pb[sb ? 0 : i];
                T da = 0, db = 0;
                switch (op) {
                    case BinOp::add: da = g[i]; db = g[i]; break;
                    case BinOp::sub: da = g[i]; db = -g[i]; break;
                    case BinOp::mul: da = g[i] * y; db = g[i] * x; break;
                    case BinOp::div: da = g[i] / y; db = -g[i] * x / (y * y); break;
                    // ties route the gradient to the left operand
                    case BinOp::min: (x <= y ? da : db) = g[i]; break;
                    case BinOp::max: (x >= y ? da : db) = g[i]; break;
                }
                if (an->requires_grad) an->grad[sa ? 0 : i] += da;
                if (bn->requires_grad) bn->grad[sb ? 0 : i] += db;
            }
        });
    }
    return out;
}

template <typename T, typename F, typename DF>
Tensor<T> unary(Tape<T>& tp, const Tensor<T>& a, F f, DF df) {
    const std::size_t n = a.size();
    auto out = tp.make(a.shape(), a.requires_grad());
    T* o = out.node()->store.data();
    const T* pa = a.data();
    for (std::size_t i = 0; i < n; ++i) o[i] = f(pa[i]);
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tp.record({an}, [an, on, n, df] {
            const T* g = on->grad.data();
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i] * df(an->data[i], on->data[i]);
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(tp, a, b, detail::BinOp::add, "add");
}
template <typename T>
Tensor<T> sub(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(tp, a, b, detail::BinOp::sub, "sub");
}
template <typename T>
Tensor<T> mul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(tp, a, b, detail::BinOp::mul, "mul");
}
template <typename T>
Tensor<T> div(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(tp, a, b, detail::BinOp::div, "div");
}
template <typename T>
Tensor<T> minimum(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(tp, a, b, detail::BinOp::min, "minimum");
}
template <typename T>
Tensor<T> maximum(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary(tp, a, b, detail::BinOp::max, "maximum");
}

template <typename T>
Tensor<T> scale(Tape<T>& tp, const Tensor<T>& a, T c) {
    return detail::unary(tp, a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(Tape<T>& tp, const Tensor<T>& a, T c) {
    return detail::unary(tp, a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(Tape<T>& tp, const Tensor<T>& a) {
    // gradient passes only where the input is strictly positive
    return detail::unary(tp, a, [](T x) { return x > T(0) ? x : T(0); },
                         [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tp, const Tensor<T>& a) {
    auto f = [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
    };
    return detail::unary(tp, a, f, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp_(Tape<T>& tp, const Tensor<T>& a) {
    return detail::unary(tp, a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> abs_(Tape<T>& tp, const Tensor<T>& a) {
    // subgradient 0 at x == 0
    return detail::unary(tp, a, [](T x) { return std::abs(x); },
                         [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> clamp_min(Tape<T>& tp, const Tensor<T>& a, T lo) {
    return detail::unary(tp, a, [lo](T x) { return x < lo ? lo : x; },
                         [lo](T x, T) { return x >= lo ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(Tape<T>& tp, const Tensor<T>& a) {
    auto out = tp.make({1}, a.requires_grad());
    T s = 0;
    const T* pa = a.data();
    for (std::size_t i = 0; i < a.size(); ++i) s += pa[i];
    out.node()->store[0] = s;
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tp.record({an}, [an, on] {
            const T g = on->grad[0];
            for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
        });
    }
    return out;
}

namespace detail {
struct AxisSpan {
    std::size_t outer, len, inner;
};

inline AxisSpan axis_span(const Shape& shape, int axis) {
    const int r = static_cast<int>(shape.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw DimError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    AxisSpan s{1, static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]), 1};
    for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    for (int i = axis + 1; i < r; ++i) s.inner *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    return s;
}
}  // namespace detail

// Max-subtracted softmax along an axis; slices sum to 1 even for inputs of
// magnitude 1e4.
template <typename T>
Tensor<T> softmax(Tape<T>& tp, const Tensor<T>& a, int axis = -1) {
    const auto sp = detail::axis_span(a.shape(), axis);
    auto out = tp.make(a.shape(), a.requires_grad());
    T* o = out.node()->store.data();
    const T* pa = a.data();
    for (std::size_t u = 0; u < sp.outer; ++u) {
        for (std::size_t v = 0; v < sp.inner; ++v) {
            const std::size_t base = u * sp.len * sp.inner + v;
            T mx = pa[base];
            for (std::size_t i = 1; i < sp.len; ++i) mx = std::max(mx, pa[base + i * sp.inner]);
            T z = 0;
            for (std::size_t i = 0; i < sp.len; ++i) {
                const T e = std::exp(pa[base + i * sp.inner] - mx);
                o[base + i * sp.inner] = e;
                z += e;
            }
            const T inv = T(1) / z;
            for (std::size_t i = 0; i < sp.len; ++i) o[base + i * sp.inner] *= inv;
        }
    }
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tp.record({an}, [an, on, sp] {
            const T* y = on->data;
            const T* g = on->grad.data();
            for (std::size_t u = 0; u < sp.outer; ++u) {
                for (std::size_t v = 0; v < sp.inner; ++v) {
                    const std::size_t base = u * sp.len * sp.inner + v;
                    T dot = 0;
                    for (std::size_t i = 0; i < sp.len; ++i) {
                        const std::size_t ix = base + i * sp.inner;
                        dot += g[ix] * y[ix];
                    }
                    for (std::size_t i = 0; i < sp.len; ++i) {
                        const std::size_t ix = base + i * sp.inner;
                        an->grad[ix] += y[ix] * (g[ix] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// Per-position normalization over the last dimension with biased variance,
// eps inside the square root, then an affine map.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    const int C = x.dim(x.rank() - 1);
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
        throw DimError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                       " do not match last dim of " + shape_str(x.shape()));
    const std::size_t rows = x.size() / static_cast<std::size_t>(C);
    auto out = tp.make(x.shape(), x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    // cache per-row 1/sqrt(var+eps) and normalized values for the backward pass
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    auto xhat = std::make_shared<std::vector<T>>(x.size());
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pb = beta.data();
    T* o = out.node()->store.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = px + r * C;
        T mean = 0;
        for (int c = 0; c < C; ++c) mean += row[c];
        mean /= T(C);
        T var = 0;
        for (int c = 0; c < C; ++c) {
            const T d = row[c] - mean;
            var += d * d;
        }
        var /= T(C);
        const T inv = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        for (int c = 0; c < C; ++c) {
            const T h = (row[c] - mean) * inv;
            (*xhat)[r * C + c] = h;
            o[r * C + c] = h * pg[c] + pb[c];
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        tp.record({xn, gn, bn}, [xn, gn, bn, on, inv_std, xhat, rows, C] {
            const T* g = on->grad.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* grow = g + r * C;
                const T* hrow = xhat->data() + r * C;
                if (gn->requires_grad || bn->requires_grad) {
                    for (int c = 0; c < C; ++c) {
                        if (gn->requires_grad) gn->grad[static_cast<std::size_t>(c)] += grow[c] * hrow[c];
                        if (bn->requires_grad) bn->grad[static_cast<std::size_t>(c)] += grow[c];
                    }
                }
                if (xn->requires_grad) {
                    T m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat * xhat)
                    for (int c = 0; c < C; ++c) {
                        const T dh = grow[c] * gn->data[c];
                        m1 += dh;
                        m2 += dh * hrow[c];
                    }
                    m1 /= T(C);
                    m2 /= T(C);
                    const T inv = (*inv_std)[r];
                    for (int c = 0; c < C; ++c) {
                        const T dh = grow[c] * gn->data[c];
                        xn->grad[r * C + c] += inv * (dh - m1 - hrow[c] * m2);
                    }
                }
            }
        });
    }
    return out;
}

// Each slice along `axis` divided by max(||slice||, eps).
template <typename T>
Tensor<T> l2_normalize(Tape<T>& tp, const Tensor<T>& a, int axis = -1, T eps = T(1e-12)) {
    const auto sp = detail::axis_span(a.shape(), axis);
    auto out = tp.make(a.shape(), a.requires_grad());
    auto norms = std::make_shared<std::vector<T>>(sp.outer * sp.inner);
    const T* pa = a.data();
    T* o = out.node()->store.data();
    for (std::size_t u = 0; u < sp.outer; ++u) {
        for (std::size_t v = 0; v < sp.inner; ++v) {
            const std::size_t base = u * sp.len * sp.inner + v;
            T ss = 0;
            for (std::size_t i = 0; i < sp.len; ++i) {
                const T x = pa[base + i * sp.inner];
                ss += x * x;
            }
            const T n = std::max(std::sqrt(ss), eps);
            (*norms)[u * sp.inner + v] = n;
            for (std::size_t i = 0; i < sp.len; ++i) o[base + i * sp.inner] = pa[base + i * sp.inner] / n;
        }
    }
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tp.record({an}, [an, on, sp, norms, eps] {
            const T* g = on->grad.data();
            const T* y = on->data;
            for (std::size_t u = 0; u < sp.outer; ++u) {
                for (std::size_t v = 0; v < sp.inner; ++v) {
                    const std::size_t base = u * sp.len * sp.inner + v;
                    const T n = (*norms)[u * sp.inner + v];
                    if (n <= eps) {
                        // clamped region: y = x / eps is linear
                        for (std::size_t i = 0; i < sp.len; ++i)
                            an->grad[base + i * sp.inner] += g[base + i * sp.inner] / n;
                        continue;
                    }
                    T dot = 0;
                    for (std::size_t i = 0; i < sp.len; ++i) {
                        const std::size_t ix = base + i * sp.inner;
                        dot += g[ix] * y[ix];
                    }
                    for (std::size_t i = 0; i < sp.len; ++i) {
                        const std::size_t ix = base + i * sp.inner;
                        an->grad[ix] += (g[ix] - y[ix] * dot) / n;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Structured ops used by attention and scoring
// ---------------------------------------------------------------------------

// out[r] = dot(a[r,:], b[r,:])
template <typename T>
Tensor<T> rowwise_dot(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "rowwise_dot");
    if (a.rank() != 2) throw DimError("rowwise_dot: need rank-2, got " + shape_str(a.shape()));
    const int R = a.dim(0), C = a.dim(1);
    auto out = tp.make({R}, a.requires_grad() || b.requires_grad());
    T* o = out.node()->store.data();
    for (int r = 0; r < R; ++r) {
        const T* ar = a.data() + static_cast<std::size_t>(r) * C;
        const T* br = b.data() + static_cast<std::size_t>(r) * C;
        T s = 0;
        for (int c = 0; c < C; ++c) s += ar[c] * br[c];
        o[r] = s;
    }
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        tp.record({an, bn}, [an, bn, on, R, C] {
            for (int r = 0; r < R; ++r) {
                const T g = on->grad[static_cast<std::size_t>(r)];
                const std::size_t off = static_cast<std::size_t>(r) * C;
                for (int c = 0; c < C; ++c) {
                    if (an->requires_grad) an->grad[off + c] += g * bn->data[off + c];
                    if (bn->requires_grad) bn->grad[off + c] += g * an->data[off + c];
                }
            }
        });
    }
    return out;
}

// out[r,c] = x[r,c] * s[r]; broadcasts a score vector over channels.
template <typename T>
Tensor<T> scale_rows(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& s) {
    if (x.rank() != 2 || s.rank() != 1 || s.dim(0) != x.dim(0))
        throw DimError("scale_rows: " + shape_str(x.shape()) + " vs " + shape_str(s.shape()));
    const int R = x.dim(0), C = x.dim(1);
    auto out = tp.make(x.shape(), x.requires_grad() || s.requires_grad());
    T* o = out.node()->store.data();
    for (int r = 0; r < R; ++r) {
        const T sv = s.value(static_cast<std::size_t>(r));
        const std::size_t off = static_cast<std::size_t>(r) * C;
        for (int c = 0; c < C; ++c) o[off + c] = x.data()[off + c] * sv;
    }
    if (out.requires_grad()) {
        auto xn = x.node(), sn = s.node(), on = out.node();
        tp.record({xn, sn}, [xn, sn, on, R, C] {
            for (int r = 0; r < R; ++r) {
                const std::size_t off = static_cast<std::size_t>(r) * C;
                const T sv = sn->data[r];
                T acc = 0;
                for (int c = 0; c < C; ++c) {
                    const T g = on->grad[off + c];
                    if (xn->requires_grad) xn->grad[off + c] += g * sv;
                    acc += g * xn->data[off + c];
                }
                if (sn->requires_grad) sn->grad[static_cast<std::size_t>(r)] += acc;
            }
        });
    }
    return out;
}

// Row gather for embedding lookup: out[l,:] = table[ids[l],:].
template <typename T>
Tensor<T> gather_rows(Tape<T>& tp, const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw DimError("gather_rows: table must be rank-2, got " + shape_str(table.shape()));
    const int V = table.dim(0), C = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= V)
            throw ContractError("gather_rows: id " + std::to_string(id) + " out of range [0," + std::to_string(V) + ")");
    const int L = static_cast<int>(ids.size());
    auto out = tp.make({L, C}, table.requires_grad());
    for (int l = 0; l < L; ++l)
        std::copy_n(table.data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(l)]) * C, C,
                    out.node()->store.data() + static_cast<std::size_t>(l) * C);
    if (out.requires_grad()) {
        auto tn = table.node(), on = out.node();
        tp.record({tn}, [tn, on, ids, C] {
            for (std::size_t l = 0; l < ids.size(); ++l) {
                const std::size_t src = l * C;
                const std::size_t dst = static_cast<std::size_t>(ids[l]) * C;
                for (int c = 0; c < C; ++c) tn->grad[dst + c] += on->grad[src + c];
            }
        });
    }
    return out;
}

// out[r,c] = x[r,c] + b[c]; broadcasts a bias vector over rows.
template <typename T>
Tensor<T> add_rows(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
        throw DimError("add_rows: " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
    const int R = x.dim(0), C = x.dim(1);
    auto out = tp.make(x.shape(), x.requires_grad() || b.requires_grad());
    T* o = out.node()->store.data();
    for (int r = 0; r < R; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * C;
        for (int c = 0; c < C; ++c) o[off + c] = x.data()[off + c] + b.data()[c];
    }
    if (out.requires_grad()) {
        auto xn = x.node(), bn = b.node(), on = out.node();
        tp.record({xn, bn}, [xn, bn, on, R, C] {
            for (int r = 0; r < R; ++r) {
                const std::size_t off = static_cast<std::size_t>(r) * C;
                for (int c = 0; c < C; ++c) {
                    const T g = on->grad[off + c];
                    if (xn->requires_grad) xn->grad[off + c] += g;
                    if (bn->requires_grad) bn->grad[static_cast<std::size_t>(c)] += g;
                }
            }
        });
    }
    return out;
}

// [L, h*dk] -> [h, L, dk]; head h owns channel block [h*dk, (h+1)*dk).
template <typename T>
Tensor<T> split_heads(Tape<T>& tp, const Tensor<T>& x, int heads) {
    if (x.rank() != 2 || x.dim(1) % heads != 0)
        throw DimError("split_heads: " + shape_str(x.shape()) + " not divisible into " +
                       std::to_string(heads) + " heads");
    const int L = x.dim(0), C = x.dim(1), dk = C / heads;
    auto out = tp.make({heads, L, dk}, x.requires_grad());
    T* o = out.node()->store.data();
    for (int h = 0; h < heads; ++h)
        for (int l = 0; l < L; ++l)
            std::copy_n(x.data() + static_cast<std::size_t>(l) * C + h * dk, dk,
                        o + (static_cast<std::size_t>(h) * L + l) * dk);
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        tp.record({xn}, [xn, on, heads, L, C, dk] {
            for (int h = 0; h < heads; ++h)
                for (int l = 0; l < L; ++l) {
                    const T* g = on->grad.data() + (static_cast<std::size_t>(h) * L + l) * dk;
                    T* dst = xn->grad.data() + static_cast<std::size_t>(l) * C + h * dk;
                    for (int t = 0; t < dk; ++t) dst[t] += g[t];
                }
        });
    }
    return out;
}

// [h, L, dk] -> [L, h*dk]; exact inverse of split_heads.
template <typename T>
Tensor<T> merge_heads(Tape<T>& tp, const Tensor<T>& x) {
    if (x.rank() != 3) throw DimError("merge_heads: need rank-3, got " + shape_str(x.shape()));
    const int heads = x.dim(0), L = x.dim(1), dk = x.dim(2), C = heads * dk;
    auto out = tp.make({L, C}, x.requires_grad());
    T* o = out.node()->store.data();
    for (int h = 0; h < heads; ++h)
        for (int l = 0; l < L; ++l)
            std::copy_n(x.data() + (static_cast<std::size_t>(h) * L + l) * dk, dk,
                        o + static_cast<std::size_t>(l) * C + h * dk);
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        tp.record({xn}, [xn, on, heads, L, C, dk] {
            for (int h = 0; h < heads; ++h)
                for (int l = 0; l < L; ++l) {
                    const T* g = on->grad.data() + static_cast<std::size_t>(l) * C + h * dk;
                    T* dst = xn->grad.data() + (static_cast<std::size_t>(h) * L + l) * dk;
                    for (int t = 0; t < dk; ++t) dst[t] += g[t];
                }
        });
    }
    return out;
}

// Scalar extraction: out = x.flat[i].
template <typename T>
Tensor<T> select(Tape<T>& tp, const Tensor<T>& x, std::size_t i) {
    if (i >= x.size()) throw ContractError("select: index " + std::to_string(i) + " out of range");
    auto out = tp.make({1}, x.requires_grad());
    out.node()->store[0] = x.value(i);
    if (out.requires_grad()) {
        auto xn = x.node(), on = out.node();
        tp.record({xn}, [xn, on, i] { xn->grad[i] += on->grad[0]; });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Central-difference check of an analytic gradient. `f` must rebuild its
// computation from the current contents of `x` on every call; `analytic` is
// d f/d x evaluated once by the caller. 64-bit only: the tolerances are not
// meaningful in float.
inline double finite_difference_check(const std::function<double()>& f, Tensor<double>& x,
                                      const std::vector<double>& analytic, double h = 1e-4) {
    if (analytic.size() != x.size())
        throw ContractError("finite_difference_check: gradient size mismatch");
    double* px = x.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = px[i];
        px[i] = keep + h;
        const double fp = f();
        px[i] = keep - h;
        const double fm = f();
        px[i] = keep;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_difference_check: non-finite value of f");
        const double num = (fp - fm) / (2.0 * h);
        const double ana = analytic[i];
        const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
        worst = std::max(worst, std::abs(ana - num) / denom);
    }
    return worst;
}

}  // namespace vg
