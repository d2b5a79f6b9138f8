#pragma once

// Tape-based reverse-mode differentiation over dense NCHW tensors.
//
// Every op appends a node to the Graph in creation order, so the node list is
// already topologically sorted; backprop walks it once in reverse. Ops that
// work per sample (conv, norm, attention) produce bit-identical results for a
// sample regardless of which batch it is part of.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <utility>

#include "diffscale/parallel.hpp"
#include "diffscale/tensor.hpp"

namespace diffscale::ad {

struct Var {
    int id = -1;
    bool valid() const noexcept { return id >= 0; }
};

template <class T>
class Graph {
public:
    using Backward = std::function<void(Graph&, int)>;

    Var constant(Tensor<T> value) { return push(std::move(value), false, {}, nullptr); }
    Var leaf(Tensor<T> value, bool requires_grad = true) { return push(std::move(value), requires_grad, {}, nullptr); }

    /// Leaf that reads `external` in place; it must outlive the graph and stay unmodified during a sweep.
    Var borrow(const Tensor<T>& external, bool requires_grad = true)
    {
        Var v = push(Tensor<T>{}, requires_grad, {}, nullptr);
        nodes_.back().external = &external;
        return v;
    }

    /// Appends an op result. It requires grad iff any input does.
    Var record(Tensor<T> value, std::vector<int> inputs, Backward backward)
    {
        bool rg = false;
        for (int i : inputs) rg = rg || nodes_.at(static_cast<std::size_t>(i)).requires_grad;
        return push(std::move(value), rg, std::move(inputs), rg ? std::move(backward) : nullptr);
    }

    const Tensor<T>& value(Var v) const
    {
        const auto& n = node(v);
        return n.external ? *n.external : n.value;
    }
    const Shape& shape(Var v) const { return value(v).shape; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    bool has_grad(Var v) const { return !node(v).grad.empty(); }

    /// Gradient buffer of v, zero-initialized on first access.
    Tensor<T>& grad(Var v)
    {
        auto& n = node(v);
        if (n.grad.empty()) n.grad = Tensor<T>(n.external ? n.external->shape : n.value.shape);
        return n.grad;
    }
    Tensor<T>& grad(int id) { return grad(Var{id}); }
    const Tensor<T>& value(int id) const { return value(Var{id}); }
    bool requires_grad(int id) const { return requires_grad(Var{id}); }

    std::size_t size() const noexcept { return nodes_.size(); }
    std::size_t backward_visits() const noexcept { return visits_; }

    /// Reverse sweep from a scalar loss. Returns the number of nodes whose rule ran.
    std::size_t backprop(Var loss)
    {
        if (value(loss).numel() != 1)
            throw UsageError("backprop requires a scalar loss, got shape " + shape_str(value(loss).shape));
        for (auto& n : nodes_) n.grad = Tensor<T>{};
        grad(loss).data[0] = T(1);
        visits_ = 0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.backward || n.grad.empty()) continue;
            auto fn = n.backward; // the rule may grow other nodes' grads, never this vector
            fn(*this, i);
            ++visits_;
        }
        return visits_;
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        const Tensor<T>* external = nullptr;
        std::vector<int> inputs;
        Backward backward;
    };

    Var push(Tensor<T> value, bool rg, std::vector<int> inputs, Backward backward)
    {
        nodes_.push_back(Node{std::move(value), {}, rg, nullptr, std::move(inputs), std::move(backward)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }
    Node& node(Var v)
    {
        if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw UsageError("invalid graph variable");
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    const Node& node(Var v) const
    {
        if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw UsageError("invalid graph variable");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    std::vector<Node> nodes_;
    std::size_t visits_ = 0;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapM = Eigen::Map<const RowMat<T>>;

inline void expect(bool ok, const std::string& what)
{
    if (!ok) throw DimensionError(what);
}

inline void expect_rank(const Shape& s, int r, const char* op)
{
    expect(static_cast<int>(s.size()) == r, std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                                                 shape_str(s));
}

// col[(c*k + i)*k + j][y*W + x] = in[c][y + i - p][x + j - p] (zero outside)
template <class T>
void im2col(const T* in, int C, int H, int W, int k, T* col)
{
    const int p = k / 2;
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
                T* row = col + (static_cast<std::size_t>((c * k + i) * k + j)) * H * W;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + i - p;
                    T* dst = row + static_cast<std::size_t>(y) * W;
                    if (sy < 0 || sy >= H) {
                        std::fill(dst, dst + W, T(0));
                        continue;
                    }
                    const T* src = in + (static_cast<std::size_t>(c) * H + sy) * W;
                    for (int x = 0; x < W; ++x) {
                        const int sx = x + j - p;
                        dst[x] = (sx >= 0 && sx < W) ? src[sx] : T(0);
                    }
                }
            }
}

template <class T>
void col2im_add(const T* col, int C, int H, int W, int k, T* out)
{
    const int p = k / 2;
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
                const T* row = col + (static_cast<std::size_t>((c * k + i) * k + j)) * H * W;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + i - p;
                    if (sy < 0 || sy >= H) continue;
                    T* dst = out + (static_cast<std::size_t>(c) * H + sy) * W;
                    const T* src = row + static_cast<std::size_t>(y) * W;
                    for (int x = 0; x < W; ++x) {
                        const int sx = x + j - p;
                        if (sx >= 0 && sx < W) dst[sx] += src[x];
                    }
                }
            }
}

/// Sums per-sample partial gradients in sample order so results do not depend on thread count.
template <class T>
void reduce_partials(const std::vector<Buffer<T>>& parts, Buffer<T>& acc)
{
    for (const auto& p : parts)
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
}

} // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var add(Graph<T>& g, Var a, Var b)
{
    const auto& A = g.value(a);
    const auto& B = g.value(b);
    detail::expect(A.shape == B.shape, "add: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += B.data[i];
    return g.record(std::move(out), {a.id, b.id}, [a, b](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        for (Var v : {a, b}) {
            if (!gr.requires_grad(v)) continue;
            auto& gv = gr.grad(v).data;
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += go[i];
        }
    });
}

template <class T>
Var sub(Graph<T>& g, Var a, Var b)
{
    const auto& A = g.value(a);
    const auto& B = g.value(b);
    detail::expect(A.shape == B.shape, "sub: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= B.data[i];
    return g.record(std::move(out), {a.id, b.id}, [a, b](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        if (gr.requires_grad(a)) {
            auto& ga = gr.grad(a).data;
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
        }
        if (gr.requires_grad(b)) {
            auto& gb = gr.grad(b).data;
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
        }
    });
}

template <class T>
Var mul(Graph<T>& g, Var a, Var b)
{
    const auto& A = g.value(a);
    const auto& B = g.value(b);
    detail::expect(A.shape == B.shape, "mul: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Tensor<T> out = A;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= B.data[i];
    return g.record(std::move(out), {a.id, b.id}, [a, b](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        if (gr.requires_grad(a)) {
            const auto& bv = gr.value(b).data;
            auto& ga = gr.grad(a).data;
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv[i];
        }
        if (gr.requires_grad(b)) {
            const auto& av = gr.value(a).data;
            auto& gb = gr.grad(b).data;
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
        }
    });
}

template <class T>
Var scale(Graph<T>& g, Var a, T s)
{
    Tensor<T> out = g.value(a);
    for (auto& v : out.data) v *= s;
    return g.record(std::move(out), {a.id}, [a, s](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        auto& ga = gr.grad(a).data;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * go[i];
    });
}

/// silu(x) = x / (1 + e^-x).
template <class T>
Var silu(Graph<T>& g, Var a)
{
    const auto& A = g.value(a);
    Tensor<T> out(A.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const T x = A.data[i];
        out.data[i] = x / (T(1) + std::exp(-x));
    }
    return g.record(std::move(out), {a.id}, [a](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        const auto& av = gr.value(a).data;
        auto& ga = gr.grad(a).data;
        for (std::size_t i = 0; i < ga.size(); ++i) {
            const T x = av[i];
            const T sg = T(1) / (T(1) + std::exp(-x));
            ga[i] += go[i] * sg * (T(1) + x * (T(1) - sg));
        }
    });
}

// ---------------------------------------------------------------- reductions

template <class T>
Var sum(Graph<T>& g, Var a)
{
    double s = 0.0;
    for (T v : g.value(a).data) s += static_cast<double>(v);
    return g.record(Tensor<T>(Shape{1}, std::vector<T>{static_cast<T>(s)}), {a.id}, [a](Graph<T>& gr, int self) {
        const T go = gr.grad(self).data[0];
        for (auto& v : gr.grad(a).data) v += go;
    });
}

template <class T>
Var mean(Graph<T>& g, Var a)
{
    const auto n = static_cast<double>(g.value(a).numel());
    return scale(g, sum(g, a), static_cast<T>(1.0 / n));
}

/// mean((a - b)^2) over all elements, accumulated in double.
template <class T>
Var mse(Graph<T>& g, Var a, Var b)
{
    const auto& A = g.value(a);
    const auto& B = g.value(b);
    detail::expect(A.shape == B.shape, "mse: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    double s = 0.0;
    for (std::size_t i = 0; i < A.numel(); ++i) {
        const double d = static_cast<double>(A.data[i]) - static_cast<double>(B.data[i]);
        s += d * d;
    }
    const double n = static_cast<double>(A.numel());
    return g.record(Tensor<T>(Shape{1}, std::vector<T>{static_cast<T>(s / n)}), {a.id, b.id},
                    [a, b, n](Graph<T>& gr, int self) {
                        const T go = gr.grad(self).data[0];
                        const auto& av = gr.value(a).data;
                        const auto& bv = gr.value(b).data;
                        const T k = static_cast<T>(2.0 / n) * go;
                        if (gr.requires_grad(a)) {
                            auto& ga = gr.grad(a).data;
                            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += k * (av[i] - bv[i]);
                        }
                        if (gr.requires_grad(b)) {
                            auto& gb = gr.grad(b).data;
                            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= k * (av[i] - bv[i]);
                        }
                    });
}

// ---------------------------------------------------------------- dense

/// y[n, o] = sum_i x[n, i] w[o, i] + b[o]. Row by row so each sample's output is batch independent.
template <class T>
Var dense(Graph<T>& g, Var x, Var w, Var b)
{
    const auto& X = g.value(x);
    const auto& Wt = g.value(w);
    detail::expect_rank(X.shape, 2, "dense");
    detail::expect_rank(Wt.shape, 2, "dense");
    const int N = X.dim(0), I = X.dim(1), O = Wt.dim(0);
    detail::expect(Wt.dim(1) == I, "dense: weight " + shape_str(Wt.shape) + " incompatible with input " + shape_str(X.shape));
    if (b.valid()) detail::expect(g.value(b).shape == Shape{O}, "dense: bias shape must be [" + std::to_string(O) + "]");
    Tensor<T> out(Shape{N, O});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            double s = b.valid() ? static_cast<double>(g.value(b).data[o]) : 0.0;
            for (int i = 0; i < I; ++i)
                s += static_cast<double>(X.data[static_cast<std::size_t>(n) * I + i]) * Wt.data[static_cast<std::size_t>(o) * I + i];
            out.data[static_cast<std::size_t>(n) * O + o] = static_cast<T>(s);
        }
    std::vector<int> inputs{x.id, w.id};
    if (b.valid()) inputs.push_back(b.id);
    return g.record(std::move(out), std::move(inputs), [x, w, b, N, I, O](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        const auto& xv = gr.value(x).data;
        const auto& wv = gr.value(w).data;
        if (gr.requires_grad(x)) {
            auto& gx = gr.grad(x).data;
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) {
                    const T d = go[static_cast<std::size_t>(n) * O + o];
                    for (int i = 0; i < I; ++i) gx[static_cast<std::size_t>(n) * I + i] += d * wv[static_cast<std::size_t>(o) * I + i];
                }
        }
        if (gr.requires_grad(w)) {
            auto& gw = gr.grad(w).data;
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) {
                    const T d = go[static_cast<std::size_t>(n) * O + o];
                    for (int i = 0; i < I; ++i) gw[static_cast<std::size_t>(o) * I + i] += d * xv[static_cast<std::size_t>(n) * I + i];
                }
        }
        if (b.valid() && gr.requires_grad(b)) {
            auto& gb = gr.grad(b).data;
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) gb[o] += go[static_cast<std::size_t>(n) * O + o];
        }
    });
}

/// Repeats a [E] vector into N rows: [N, E].
template <class T>
Var broadcast_rows(Graph<T>& g, Var v, int N)
{
    const auto& V = g.value(v);
    detail::expect_rank(V.shape, 1, "broadcast_rows");
    const int E = V.dim(0);
    Tensor<T> out(Shape{N, E});
    for (int n = 0; n < N; ++n) std::copy(V.data.begin(), V.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(n) * E);
    return g.record(std::move(out), {v.id}, [v, N, E](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        auto& gv = gr.grad(v).data;
        for (int n = 0; n < N; ++n)
            for (int e = 0; e < E; ++e) gv[e] += go[static_cast<std::size_t>(n) * E + e];
    });
}

// ---------------------------------------------------------------- convolution

/// Stride-1 convolution with zero "same" padding; odd square kernels. w: [Co, C, k, k], b: [Co] or invalid.
template <class T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b)
{
    const auto& X = g.value(x);
    const auto& Wt = g.value(w);
    detail::expect_rank(X.shape, 4, "conv2d");
    detail::expect_rank(Wt.shape, 4, "conv2d");
    const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    const int Co = Wt.dim(0), k = Wt.dim(2);
    detail::expect(Wt.dim(1) == C && Wt.dim(3) == k && k % 2 == 1,
                   "conv2d: weight " + shape_str(Wt.shape) + " incompatible with input " + shape_str(X.shape));
    if (b.valid()) detail::expect(g.value(b).shape == Shape{Co}, "conv2d: bias must have shape [" + std::to_string(Co) + "]");
    const int HW = H * W, K = C * k * k;
    Tensor<T> out(Shape{N, Co, H, W});
    const T* bias = b.valid() ? g.value(b).data.data() : nullptr;
    parallel_for(static_cast<std::size_t>(N), [&](std::size_t n) {
        const T* xin = X.data.data() + n * static_cast<std::size_t>(C) * HW;
        Buffer<T> col;
        const T* colp = xin;
        if (k > 1) {
            col.resize(static_cast<std::size_t>(K) * HW);
            detail::im2col(xin, C, H, W, k, col.data());
            colp = col.data();
        }
        detail::MapM<T> Y(out.data.data() + n * static_cast<std::size_t>(Co) * HW, Co, HW);
        Y.noalias() = detail::CMapM<T>(Wt.data.data(), Co, K) * detail::CMapM<T>(colp, K, HW);
        if (bias)
            for (int o = 0; o < Co; ++o) Y.row(o).array() += bias[o];
    });
    std::vector<int> inputs{x.id, w.id};
    if (b.valid()) inputs.push_back(b.id);
    return g.record(std::move(out), std::move(inputs), [x, w, b, N, C, H, W, Co, k, HW, K](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        const auto& xv = gr.value(x).data;
        const auto& wv = gr.value(w).data;
        const bool gx_on = gr.requires_grad(x);
        const bool gw_on = gr.requires_grad(w);
        T* gx = gx_on ? gr.grad(x).data.data() : nullptr;
        std::vector<Buffer<T>> wparts(gw_on ? N : 0);
        parallel_for(static_cast<std::size_t>(N), [&](std::size_t n) {
            const T* xin = xv.data() + n * static_cast<std::size_t>(C) * HW;
            detail::CMapM<T> dY(go.data() + n * static_cast<std::size_t>(Co) * HW, Co, HW);
            if (gw_on) {
                Buffer<T> col;
                const T* colp = xin;
                if (k > 1) {
                    col.resize(static_cast<std::size_t>(K) * HW);
                    detail::im2col(xin, C, H, W, k, col.data());
                    colp = col.data();
                }
                wparts[n].assign(static_cast<std::size_t>(Co) * K, T(0));
                detail::MapM<T>(wparts[n].data(), Co, K).noalias() = dY * detail::CMapM<T>(colp, K, HW).transpose();
            }
            if (gx_on) {
                T* gxn = gx + n * static_cast<std::size_t>(C) * HW;
                if (k == 1) {
                    detail::MapM<T>(gxn, C, HW).noalias() += detail::CMapM<T>(wv.data(), Co, K).transpose() * dY;
                } else {
                    Buffer<T> dcol(static_cast<std::size_t>(K) * HW);
                    detail::MapM<T>(dcol.data(), K, HW).noalias() = detail::CMapM<T>(wv.data(), Co, K).transpose() * dY;
                    detail::col2im_add(dcol.data(), C, H, W, k, gxn);
                }
            }
        });
        if (gw_on) detail::reduce_partials(wparts, gr.grad(w).data);
        if (b.valid() && gr.requires_grad(b)) {
            auto& gb = gr.grad(b).data;
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < Co; ++o) {
                    const T* row = go.data() + (static_cast<std::size_t>(n) * Co + o) * HW;
                    double s = 0.0;
                    for (int i = 0; i < HW; ++i) s += row[i];
                    gb[o] += static_cast<T>(s);
                }
        }
    });
}

// ---------------------------------------------------------------- normalization

/// Group normalization: per sample and channel group, zero mean / unit variance, then per-channel affine.
template <class T>
Var group_norm(Graph<T>& g, Var x, Var gamma, Var beta, int groups, double eps = 1e-5)
{
    const auto& X = g.value(x);
    detail::expect_rank(X.shape, 4, "group_norm");
    const int N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
    detail::expect(groups > 0 && C % groups == 0, "group_norm: " + std::to_string(C) + " channels not divisible into " +
                                                      std::to_string(groups) + " groups");
    detail::expect(g.value(gamma).shape == Shape{C} && g.value(beta).shape == Shape{C}, "group_norm: affine shape must be [C]");
    const int cg = C / groups;
    const std::size_t gsize = static_cast<std::size_t>(cg) * HW;
    auto xhat = std::make_shared<std::vector<T>>(X.numel());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N) * groups);
    Tensor<T> out(X.shape);
    const auto& ga = g.value(gamma).data;
    const auto& be = g.value(beta).data;
    for (int n = 0; n < N; ++n)
        for (int gi = 0; gi < groups; ++gi) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(gi) * cg) * HW;
            double m = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) m += X.data[off + i];
            m /= static_cast<double>(gsize);
            double v = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) {
                const double d = X.data[off + i] - m;
                v += d * d;
            }
            v /= static_cast<double>(gsize);
            const double is = 1.0 / std::sqrt(v + eps);
            (*inv_std)[static_cast<std::size_t>(n) * groups + gi] = static_cast<T>(is);
            for (int c = 0; c < cg; ++c) {
                const int ch = gi * cg + c;
                for (int i = 0; i < HW; ++i) {
                    const std::size_t idx = off + static_cast<std::size_t>(c) * HW + i;
                    const T xh = static_cast<T>((X.data[idx] - m) * is);
                    (*xhat)[idx] = xh;
                    out.data[idx] = ga[ch] * xh + be[ch];
                }
            }
        }
    return g.record(std::move(out), {x.id, gamma.id, beta.id},
                    [x, gamma, beta, N, C, HW, groups, cg, gsize, xhat, inv_std](Graph<T>& gr, int self) {
                        const auto& go = gr.grad(self).data;
                        const auto& ga = gr.value(gamma).data;
                        if (gr.requires_grad(gamma) || gr.requires_grad(beta)) {
                            std::vector<double> dg(C, 0.0), db(C, 0.0);
                            for (int n = 0; n < N; ++n)
                                for (int c = 0; c < C; ++c) {
                                    const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
                                    for (int i = 0; i < HW; ++i) {
                                        dg[c] += static_cast<double>(go[off + i]) * (*xhat)[off + i];
                                        db[c] += go[off + i];
                                    }
                                }
                            if (gr.requires_grad(gamma)) {
                                auto& gg = gr.grad(gamma).data;
                                for (int c = 0; c < C; ++c) gg[c] += static_cast<T>(dg[c]);
                            }
                            if (gr.requires_grad(beta)) {
                                auto& gb = gr.grad(beta).data;
                                for (int c = 0; c < C; ++c) gb[c] += static_cast<T>(db[c]);
                            }
                        }
                        if (!gr.requires_grad(x)) return;
                        auto& gx = gr.grad(x).data;
                        std::vector<double> dxh(gsize);
                        for (int n = 0; n < N; ++n)
                            for (int gi = 0; gi < groups; ++gi) {
                                const std::size_t off = (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(gi) * cg) * HW;
                                double mean_d = 0.0, mean_dx = 0.0;
                                for (int c = 0; c < cg; ++c)
                                    for (int i = 0; i < HW; ++i) {
                                        const std::size_t j = static_cast<std::size_t>(c) * HW + i;
                                        dxh[j] = static_cast<double>(go[off + j]) * ga[gi * cg + c];
                                        mean_d += dxh[j];
                                        mean_dx += dxh[j] * (*xhat)[off + j];
                                    }
                                mean_d /= static_cast<double>(gsize);
                                mean_dx /= static_cast<double>(gsize);
                                const double is = (*inv_std)[static_cast<std::size_t>(n) * groups + gi];
                                for (std::size_t j = 0; j < gsize; ++j)
                                    gx[off + j] += static_cast<T>(is * (dxh[j] - mean_d - (*xhat)[off + j] * mean_dx));
                            }
                    });
}

// ---------------------------------------------------------------- resampling

template <class T>
Var avg_pool2(Graph<T>& g, Var x)
{
    const auto& X = g.value(x);
    detail::expect_rank(X.shape, 4, "avg_pool2");
    const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    detail::expect(H % 2 == 0 && W % 2 == 0, "avg_pool2: spatial size " + shape_str(X.shape) + " must be even");
    const int h = H / 2, w = W / 2;
    Tensor<T> out(Shape{N, C, h, w});
    for (int nc = 0; nc < N * C; ++nc)
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                const T* src = X.data.data() + static_cast<std::size_t>(nc) * H * W;
                out.data[(static_cast<std::size_t>(nc) * h + r) * w + c] =
                    T(0.25) * (src[(2 * r) * W + 2 * c] + src[(2 * r) * W + 2 * c + 1] + src[(2 * r + 1) * W + 2 * c] +
                               src[(2 * r + 1) * W + 2 * c + 1]);
            }
    return g.record(std::move(out), {x.id}, [x, N, C, H, W, h, w](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        auto& gx = gr.grad(x).data;
        for (int nc = 0; nc < N * C; ++nc)
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c)
                    gx[(static_cast<std::size_t>(nc) * H + r) * W + c] +=
                        T(0.25) * go[(static_cast<std::size_t>(nc) * h + r / 2) * w + c / 2];
    });
}

template <class T>
Var upsample2(Graph<T>& g, Var x)
{
    const auto& X = g.value(x);
    detail::expect_rank(X.shape, 4, "upsample2");
    const int N = X.dim(0), C = X.dim(1), h = X.dim(2), w = X.dim(3);
    const int H = 2 * h, W = 2 * w;
    Tensor<T> out(Shape{N, C, H, W});
    for (int nc = 0; nc < N * C; ++nc)
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c)
                out.data[(static_cast<std::size_t>(nc) * H + r) * W + c] = X.data[(static_cast<std::size_t>(nc) * h + r / 2) * w + c / 2];
    return g.record(std::move(out), {x.id}, [x, N, C, H, W, h, w](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        auto& gx = gr.grad(x).data;
        for (int nc = 0; nc < N * C; ++nc)
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c)
                    gx[(static_cast<std::size_t>(nc) * h + r / 2) * w + c / 2] += go[(static_cast<std::size_t>(nc) * H + r) * W + c];
    });
}

template <class T>
Var concat_channels(Graph<T>& g, Var a, Var b)
{
    const auto& A = g.value(a);
    const auto& B = g.value(b);
    detail::expect_rank(A.shape, 4, "concat_channels");
    detail::expect_rank(B.shape, 4, "concat_channels");
    detail::expect(A.dim(0) == B.dim(0) && A.dim(2) == B.dim(2) && A.dim(3) == B.dim(3),
                   "concat_channels: incompatible " + shape_str(A.shape) + " and " + shape_str(B.shape));
    const int N = A.dim(0), Ca = A.dim(1), Cb = B.dim(1), HW = A.dim(2) * A.dim(3);
    Tensor<T> out(Shape{N, Ca + Cb, A.dim(2), A.dim(3)});
    for (int n = 0; n < N; ++n) {
        auto dst = out.data.begin() + static_cast<std::ptrdiff_t>(n) * (Ca + Cb) * HW;
        std::copy_n(A.data.begin() + static_cast<std::ptrdiff_t>(n) * Ca * HW, Ca * HW, dst);
        std::copy_n(B.data.begin() + static_cast<std::ptrdiff_t>(n) * Cb * HW, Cb * HW, dst + static_cast<std::ptrdiff_t>(Ca) * HW);
    }
    return g.record(std::move(out), {a.id, b.id}, [a, b, N, Ca, Cb, HW](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        for (int n = 0; n < N; ++n) {
            const T* src = go.data() + static_cast<std::size_t>(n) * (Ca + Cb) * HW;
            if (gr.requires_grad(a)) {
                T* ga = gr.grad(a).data.data() + static_cast<std::size_t>(n) * Ca * HW;
                for (int i = 0; i < Ca * HW; ++i) ga[i] += src[i];
            }
            if (gr.requires_grad(b)) {
                T* gb = gr.grad(b).data.data() + static_cast<std::size_t>(n) * Cb * HW;
                for (int i = 0; i < Cb * HW; ++i) gb[i] += src[static_cast<std::size_t>(Ca) * HW + i];
            }
        }
    });
}

/// x[n, c, :, :] + e[n, c]; the embedding-injection broadcast.
template <class T>
Var add_channel_bias(Graph<T>& g, Var x, Var e)
{
    const auto& X = g.value(x);
    const auto& E = g.value(e);
    detail::expect_rank(X.shape, 4, "add_channel_bias");
    detail::expect(E.shape == Shape{X.dim(0), X.dim(1)},
                   "add_channel_bias: bias " + shape_str(E.shape) + " does not match " + shape_str(X.shape));
    const int NC = X.dim(0) * X.dim(1), HW = X.dim(2) * X.dim(3);
    Tensor<T> out = X;
    for (int nc = 0; nc < NC; ++nc)
        for (int i = 0; i < HW; ++i) out.data[static_cast<std::size_t>(nc) * HW + i] += E.data[nc];
    return g.record(std::move(out), {x.id, e.id}, [x, e, NC, HW](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        if (gr.requires_grad(x)) {
            auto& gx = gr.grad(x).data;
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
        }
        if (gr.requires_grad(e)) {
            auto& ge = gr.grad(e).data;
            for (int nc = 0; nc < NC; ++nc) {
                double s = 0.0;
                for (int i = 0; i < HW; ++i) s += go[static_cast<std::size_t>(nc) * HW + i];
                ge[nc] += static_cast<T>(s);
            }
        }
    });
}

// ---------------------------------------------------------------- attention

/// Single-head softmax attention over the H*W positions of each sample. q, k, v: [N, C, H, W].
template <class T>
Var attention(Graph<T>& g, Var q, Var k, Var v)
{
    const auto& Q = g.value(q);
    const auto& K = g.value(k);
    const auto& V = g.value(v);
    detail::expect_rank(Q.shape, 4, "attention");
    detail::expect(Q.shape == K.shape && Q.shape == V.shape, "attention: q, k, v shapes differ");
    const int N = Q.dim(0), C = Q.dim(1), P = Q.dim(2) * Q.dim(3);
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(C)));
    auto probs = std::make_shared<Buffer<T>>(static_cast<std::size_t>(N) * P * P);
    Tensor<T> out(Q.shape);
    parallel_for(static_cast<std::size_t>(N), [&](std::size_t n) {
        const std::size_t off = n * static_cast<std::size_t>(C) * P;
        detail::CMapM<T> q_(Q.data.data() + off, C, P), k_(K.data.data() + off, C, P), v_(V.data.data() + off, C, P);
        detail::MapM<T> A(probs->data() + n * static_cast<std::size_t>(P) * P, P, P);
        A.noalias() = (q_.transpose() * k_) * inv_sqrt;
        for (int i = 0; i < P; ++i) {
            const T mx = A.row(i).maxCoeff();
            A.row(i) = (A.row(i).array() - mx).exp();
            A.row(i) /= A.row(i).sum();
        }
        detail::MapM<T>(out.data.data() + off, C, P).noalias() = v_ * A.transpose();
    });
    return g.record(std::move(out), {q.id, k.id, v.id}, [q, k, v, N, C, P, inv_sqrt, probs](Graph<T>& gr, int self) {
        const auto& go = gr.grad(self).data;
        const auto& Qv = gr.value(q).data;
        const auto& Kv = gr.value(k).data;
        const auto& Vv = gr.value(v).data;
        T* gq = gr.requires_grad(q) ? gr.grad(q).data.data() : nullptr;
        T* gk = gr.requires_grad(k) ? gr.grad(k).data.data() : nullptr;
        T* gv = gr.requires_grad(v) ? gr.grad(v).data.data() : nullptr;
        parallel_for(static_cast<std::size_t>(N), [&](std::size_t n) {
            const std::size_t off = n * static_cast<std::size_t>(C) * P;
            detail::CMapM<T> q_(Qv.data() + off, C, P), k_(Kv.data() + off, C, P), v_(Vv.data() + off, C, P);
            detail::CMapM<T> dO(go.data() + off, C, P);
            detail::CMapM<T> A(probs->data() + n * static_cast<std::size_t>(P) * P, P, P);
            if (gv) detail::MapM<T>(gv + off, C, P).noalias() += dO * A;
            detail::RowMat<T> dA = dO.transpose() * v_;
            detail::RowMat<T> dS(P, P);
            for (int i = 0; i < P; ++i) {
                const T dot = (dA.row(i).array() * A.row(i).array()).sum();
                dS.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
            }
            dS *= inv_sqrt;
            if (gq) detail::MapM<T>(gq + off, C, P).noalias() += k_ * dS.transpose();
            if (gk) detail::MapM<T>(gk + off, C, P).noalias() += q_ * dS;
        });
    });
}

// ---------------------------------------------------------------- gradient checking

/// Options for finite_diff_check.
struct FdOptions {
    double step = 1e-3;
    /// 0 checks every element; otherwise an evenly spaced subset of this many per tensor.
    std::size_t max_per_tensor = 0;
};

/// Location of the worst entry found by finite_diff_check.
struct FdWorst {
    std::size_t tensor = 0;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Max over checked parameter entries of |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
/// g_fd is the fourth-order central difference with spacing opt.step.
/// `build` constructs the scalar loss from parameter leaves in a fresh graph.
inline double finite_diff_check(const std::function<Var(Graph<double>&, std::span<const Var>)>& build,
                                std::vector<Tensor<double>>& params, FdOptions opt = {}, FdWorst* worst_at = nullptr)
{
    auto evaluate = [&](bool want_grads, std::vector<Tensor<double>>* grads) {
        Graph<double> g;
        std::vector<Var> leaves;
        for (auto& p : params) leaves.push_back(g.borrow(p, want_grads));
        Var loss = build(g, leaves);
        const double value = g.value(loss).data.at(0);
        if (want_grads) {
            g.backprop(loss);
            grads->clear();
            for (Var l : leaves) grads->push_back(g.has_grad(l) ? g.grad(l) : Tensor<double>(g.shape(l)));
        }
        return value;
    };
    std::vector<Tensor<double>> analytic;
    evaluate(true, &analytic);
    double worst = 0.0;
    for (std::size_t t = 0; t < params.size(); ++t) {
        const std::size_t n = params[t].numel();
        const std::size_t count = opt.max_per_tensor == 0 ? n : std::min(n, opt.max_per_tensor);
        for (std::size_t s = 0; s < count; ++s) {
            const std::size_t i = count == n ? s : (s * n) / count;
            const double orig = params[t].data[i];
            auto at = [&](double offset) {
                params[t].data[i] = orig + offset;
                return evaluate(false, nullptr);
            };
            const double h = opt.step;
            const double fd = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
            params[t].data[i] = orig;
            const double ad = analytic[t].data[i];
            const double denom = std::max({std::abs(ad), std::abs(fd), 1e-8});
            const double rel = std::abs(ad - fd) / denom;
            if (rel > worst && worst_at) *worst_at = {t, i, ad, fd};
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

} // namespace diffscale::ad
