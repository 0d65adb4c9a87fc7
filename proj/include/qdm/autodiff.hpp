#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "qdm/rng.hpp"
#include "qdm/tensor.hpp"

namespace qdm {

// Tape-based reverse-mode autodiff over a closed set of primitives. Values are
// computed eagerly; each node records a backward closure over node ids.
// Gradients accumulate additively across fan-out; constants get no gradient.
template <typename T>
class TapeT;

template <typename T>
struct VarT {
    TapeT<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const TensorT<T>& val() const { return tape->value(id); }
    const Shape& shape() const { return val().shape(); }
};

template <typename T>
class TapeT {
public:
    using Tensor = TensorT<T>;
    using Var = VarT<T>;

    struct Node {
        Tensor value;
        Tensor grad; // empty until touched during backward
        std::function<void(TapeT&, int)> backprop;
        bool requires_grad = false;
    };

    Var leaf(Tensor v, bool requires_grad = false) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }
    Var constant(Tensor v) { return leaf(std::move(v), false); }

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }

    // accumulate into a node's gradient buffer
    void accum(int id, const Tensor& g) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad) return;
        if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
        for (int64_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
    }
    Tensor& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
        return n.grad;
    }
    bool wants_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    // seed d(out)/d(out) = 1 and sweep the tape in reverse
    void backward(Var out) {
        if (out.val().numel() != 1) throw DimensionError("backward: output must be scalar");
        grad_buf(static_cast<int>(out.id))[0] = T(1);
        nodes_[static_cast<size_t>(out.id)].requires_grad = true;
        for (int id = out.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.requires_grad || n.grad.empty() || !n.backprop) continue;
            n.backprop(*this, id);
        }
    }

    const Tensor& grad(Var v) {
        Node& n = nodes_[static_cast<size_t>(v.id)];
        if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
        return n.grad;
    }

    Var make(Tensor value, std::vector<int> inputs, std::function<void(TapeT&, int)> backprop) {
        bool rg = false;
        for (int i : inputs) rg = rg || nodes_[static_cast<size_t>(i)].requires_grad;
        Node n;
        n.value = std::move(value);
        n.requires_grad = rg;
        if (rg) n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

private:
    std::vector<Node> nodes_;
};

using Tape = TapeT<float>;
using DTape = TapeT<double>;

namespace ad {

template <typename T>
void check_same_shape(const VarT<T>& a, const VarT<T>& b, const char* what) {
    if (!a.val().same_shape(b.val()))
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
VarT<T> add(VarT<T> a, VarT<T> b) {
    check_same_shape(a, b, "add");
    TensorT<T> out = a.val();
    const auto& bv = b.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    int ai = a.id, bi = b.id;
    return a.tape->make(std::move(out), {ai, bi}, [ai, bi](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        t.accum(ai, g);
        t.accum(bi, g);
    });
}

template <typename T>
VarT<T> sub(VarT<T> a, VarT<T> b) {
    check_same_shape(a, b, "sub");
    TensorT<T> out = a.val();
    const auto& bv = b.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    int ai = a.id, bi = b.id;
    return a.tape->make(std::move(out), {ai, bi}, [ai, bi](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        t.accum(ai, g);
        if (t.wants_grad(bi)) {
            TensorT<T> neg = g;
            for (int64_t i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
            t.accum(bi, neg);
        }
    });
}

template <typename T>
VarT<T> mul(VarT<T> a, VarT<T> b) {
    check_same_shape(a, b, "mul");
    TensorT<T> out = a.val();
    const auto& bv = b.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    int ai = a.id, bi = b.id;
    return a.tape->make(std::move(out), {ai, bi}, [ai, bi](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.wants_grad(ai)) {
            TensorT<T> ga = g;
            const auto& bvv = t.value(bi);
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] *= bvv[i];
            t.accum(ai, ga);
        }
        if (t.wants_grad(bi)) {
            TensorT<T> gb = g;
            const auto& avv = t.value(ai);
            for (int64_t i = 0; i < gb.numel(); ++i) gb[i] *= avv[i];
            t.accum(bi, gb);
        }
    });
}

// out = alpha * a + beta
template <typename T>
VarT<T> affine(VarT<T> a, T alpha, T beta = T(0)) {
    TensorT<T> out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = alpha * out[i] + beta;
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai, alpha](TapeT<T>& t, int self) {
        TensorT<T> g = t.node(self).grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] *= alpha;
        t.accum(ai, g);
    });
}

// a: (..., n, d) + b broadcast over all leading dims; b: (n, d) or (d)
template <typename T>
VarT<T> add_bcast(VarT<T> a, VarT<T> b) {
    const int64_t bn = b.val().numel();
    if (a.val().numel() % bn != 0) throw DimensionError("add_bcast: trailing block mismatch");
    TensorT<T> out = a.val();
    const auto& bv = b.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i % bn];
    int ai = a.id, bi = b.id;
    return a.tape->make(std::move(out), {ai, bi}, [ai, bi, bn](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        t.accum(ai, g);
        if (t.wants_grad(bi)) {
            TensorT<T> gb = TensorT<T>::zeros(t.value(bi).shape());
            for (int64_t i = 0; i < g.numel(); ++i) gb[i % bn] += g[i];
            t.accum(bi, gb);
        }
    });
}

// per-row modulation: a (B, n, d) op m (B, d), broadcast over the middle dim
template <typename T>
VarT<T> mul_rows(VarT<T> a, VarT<T> m) {
    if (a.val().rank() != 3 || m.val().rank() != 2 || a.val().dim(0) != m.val().dim(0) || a.val().dim(2) != m.val().dim(1))
        throw DimensionError("mul_rows: want a (B,n,d), m (B,d)");
    const int64_t B = a.val().dim(0), n = a.val().dim(1), d = a.val().dim(2);
    TensorT<T> out = a.val();
    const auto& mv = m.val();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) out.at(b, i, j) *= mv.at(b, j);
    int ai = a.id, mi = m.id;
    return a.tape->make(std::move(out), {ai, mi}, [ai, mi, B, n, d](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.wants_grad(ai)) {
            TensorT<T> ga = g;
            const auto& mv = t.value(mi);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < d; ++j) ga.at(b, i, j) *= mv.at(b, j);
            t.accum(ai, ga);
        }
        if (t.wants_grad(mi)) {
            TensorT<T> gm = TensorT<T>::zeros({B, d});
            const auto& av = t.value(ai);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < d; ++j) gm.at(b, j) += g.at(b, i, j) * av.at(b, i, j);
            t.accum(mi, gm);
        }
    });
}

template <typename T>
VarT<T> add_rows(VarT<T> a, VarT<T> m) {
    if (a.val().rank() != 3 || m.val().rank() != 2 || a.val().dim(0) != m.val().dim(0) || a.val().dim(2) != m.val().dim(1))
        throw DimensionError("add_rows: want a (B,n,d), m (B,d)");
    const int64_t B = a.val().dim(0), n = a.val().dim(1), d = a.val().dim(2);
    TensorT<T> out = a.val();
    const auto& mv = m.val();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) out.at(b, i, j) += mv.at(b, j);
    int ai = a.id, mi = m.id;
    return a.tape->make(std::move(out), {ai, mi}, [ai, mi, B, n, d](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        t.accum(ai, g);
        if (t.wants_grad(mi)) {
            TensorT<T> gm = TensorT<T>::zeros({B, d});
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < d; ++j) gm.at(b, j) += g.at(b, i, j);
            t.accum(mi, gm);
        }
    });
}

namespace detail {
// rows (R,k) @ W (k,m) -> (R,m), accumulate into out
template <typename T>
void matmul_rows(const T* x, const T* w, T* out, int64_t R, int64_t k, int64_t m) {
    for (int64_t r = 0; r < R; ++r) {
        T* orow = out + r * m;
        const T* xrow = x + r * k;
        for (int64_t i = 0; i < k; ++i) {
            const T xv = xrow[i];
            if (xv == T(0)) continue;
            const T* wrow = w + i * m;
            for (int64_t j = 0; j < m; ++j) orow[j] += xv * wrow[j];
        }
    }
}
} // namespace detail

// x (..., k) @ W (k, m) [+ b (m)] -> (..., m)
template <typename T>
VarT<T> linear(VarT<T> x, VarT<T> w, VarT<T> b) {
    const auto& xs = x.val().shape();
    if (w.val().rank() != 2 || xs.back() != w.val().dim(0))
        throw DimensionError("linear: inner dims mismatch");
    const int64_t k = w.val().dim(0), m = w.val().dim(1);
    const int64_t R = x.val().numel() / k;
    const bool has_bias = b.valid();
    if (has_bias && (b.val().rank() != 1 || b.val().dim(0) != m))
        throw DimensionError("linear: bias shape");
    Shape os = xs;
    os.back() = m;
    TensorT<T> out(os);
    if (has_bias) {
        for (int64_t r = 0; r < R; ++r)
            for (int64_t j = 0; j < m; ++j) out[r * m + j] = b.val()[j];
    }
    detail::matmul_rows(x.val().data(), w.val().data(), out.data(), R, k, m);
    int xi = x.id, wi = w.id, bi = has_bias ? b.id : -1;
    std::vector<int> inputs = {xi, wi};
    if (has_bias) inputs.push_back(bi);
    return x.tape->make(std::move(out), inputs, [xi, wi, bi, R, k, m](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& xv = t.value(xi);
        const auto& wv = t.value(wi);
        if (t.wants_grad(xi)) {
            TensorT<T> gx = TensorT<T>::zeros(xv.shape());
            // gx = g @ W^T
            for (int64_t r = 0; r < R; ++r)
                for (int64_t j = 0; j < m; ++j) {
                    const T gv = g[r * m + j];
                    if (gv == T(0)) continue;
                    for (int64_t i = 0; i < k; ++i) gx[r * k + i] += gv * wv.at(i, j);
                }
            t.accum(xi, gx);
        }
        if (t.wants_grad(wi)) {
            TensorT<T> gw = TensorT<T>::zeros({k, m});
            // gw = X^T @ g
            for (int64_t r = 0; r < R; ++r)
                for (int64_t i = 0; i < k; ++i) {
                    const T xvv = xv[r * k + i];
                    if (xvv == T(0)) continue;
                    for (int64_t j = 0; j < m; ++j) gw.at(i, j) += xvv * g[r * m + j];
                }
            t.accum(wi, gw);
        }
        if (bi >= 0 && t.wants_grad(bi)) {
            TensorT<T> gb = TensorT<T>::zeros({m});
            for (int64_t r = 0; r < R; ++r)
                for (int64_t j = 0; j < m; ++j) gb[j] += g[r * m + j];
            t.accum(bi, gb);
        }
    });
}

template <typename T>
VarT<T> linear_nobias(VarT<T> x, VarT<T> w) {
    return linear(x, w, VarT<T>{});
}

// batched matmul: a (N, n, k) @ b (N, k, m) -> (N, n, m)
template <typename T>
VarT<T> bmm(VarT<T> a, VarT<T> b) {
    if (a.val().rank() != 3 || b.val().rank() != 3 || a.val().dim(0) != b.val().dim(0) || a.val().dim(2) != b.val().dim(1))
        throw DimensionError("bmm: want (N,n,k)@(N,k,m)");
    const int64_t N = a.val().dim(0), n = a.val().dim(1), k = a.val().dim(2), m = b.val().dim(2);
    TensorT<T> out({N, n, m}, T(0));
    for (int64_t s = 0; s < N; ++s)
        detail::matmul_rows(a.val().data() + s * n * k, b.val().data() + s * k * m, out.data() + s * n * m, n, k, m);
    int ai = a.id, bi = b.id;
    return a.tape->make(std::move(out), {ai, bi}, [ai, bi, N, n, k, m](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& av = t.value(ai);
        const auto& bv = t.value(bi);
        if (t.wants_grad(ai)) {
            TensorT<T> ga = TensorT<T>::zeros({N, n, k});
            for (int64_t s = 0; s < N; ++s)
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t j = 0; j < m; ++j) {
                        const T gv = g.at(s, r, j);
                        if (gv == T(0)) continue;
                        for (int64_t i = 0; i < k; ++i) ga.at(s, r, i) += gv * bv.at(s, i, j);
                    }
            t.accum(ai, ga);
        }
        if (t.wants_grad(bi)) {
            TensorT<T> gb = TensorT<T>::zeros({N, k, m});
            for (int64_t s = 0; s < N; ++s)
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t i = 0; i < k; ++i) {
                        const T avv = av.at(s, r, i);
                        if (avv == T(0)) continue;
                        for (int64_t j = 0; j < m; ++j) gb.at(s, i, j) += avv * g.at(s, r, j);
                    }
            t.accum(bi, gb);
        }
    });
}

template <typename T>
VarT<T> transpose12(VarT<T> a) {
    if (a.val().rank() != 3) throw DimensionError("transpose12: want rank-3");
    const int64_t N = a.val().dim(0), n = a.val().dim(1), m = a.val().dim(2);
    TensorT<T> out({N, m, n});
    for (int64_t s = 0; s < N; ++s)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < m; ++j) out.at(s, j, i) = a.val().at(s, i, j);
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai, N, n, m](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        TensorT<T> ga({N, n, m});
        for (int64_t s = 0; s < N; ++s)
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < m; ++j) ga.at(s, i, j) = g.at(s, j, i);
        t.accum(ai, ga);
    });
}

template <typename T>
VarT<T> softmax_last(VarT<T> a) {
    const int64_t d = a.val().shape().back();
    const int64_t R = a.val().numel() / d;
    TensorT<T> out = a.val();
    for (int64_t r = 0; r < R; ++r) {
        T* row = out.data() + r * d;
        T mx = row[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int64_t j = 0; j < d; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int64_t j = 0; j < d; ++j) row[j] /= sum;
    }
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai, R, d](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& y = t.node(self).value;
        TensorT<T> ga(y.shape());
        for (int64_t r = 0; r < R; ++r) {
            T dot = T(0);
            for (int64_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
            for (int64_t j = 0; j < d; ++j) ga[r * d + j] = (g[r * d + j] - dot) * y[r * d + j];
        }
        t.accum(ai, ga);
    });
}

// normalization over the last dim, no affine parameters
template <typename T>
VarT<T> layer_norm_last(VarT<T> a, T eps = T(1e-6)) {
    const int64_t d = a.val().shape().back();
    const int64_t R = a.val().numel() / d;
    TensorT<T> out(a.val().shape());
    TensorT<T> inv_std({std::max<int64_t>(R, 1)});
    for (int64_t r = 0; r < R; ++r) {
        const T* row = a.val().data() + r * d;
        T mu = T(0);
        for (int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int64_t j = 0; j < d; ++j) out[r * d + j] = (row[j] - mu) * is;
    }
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai, R, d, inv_std](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& y = t.node(self).value; // normalized values
        TensorT<T> ga(y.shape());
        for (int64_t r = 0; r < R; ++r) {
            T gmean = T(0), gydot = T(0);
            for (int64_t j = 0; j < d; ++j) {
                gmean += g[r * d + j];
                gydot += g[r * d + j] * y[r * d + j];
            }
            gmean /= static_cast<T>(d);
            gydot /= static_cast<T>(d);
            for (int64_t j = 0; j < d; ++j)
                ga[r * d + j] = inv_std[r] * (g[r * d + j] - gmean - y[r * d + j] * gydot);
        }
        t.accum(ai, ga);
    });
}

template <typename T>
VarT<T> gelu(VarT<T> a) {
    TensorT<T> out = a.val();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double x = static_cast<double>(out[i]);
        out[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& xv = t.value(ai);
        TensorT<T> ga(xv.shape());
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        for (int64_t i = 0; i < ga.numel(); ++i) {
            const double x = static_cast<double>(xv[i]);
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            ga[i] = static_cast<T>(static_cast<double>(g[i]) * (cdf + x * pdf));
        }
        t.accum(ai, ga);
    });
}

template <typename T>
VarT<T> silu(VarT<T> a) {
    TensorT<T> out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double x = static_cast<double>(out[i]);
        out[i] = static_cast<T>(x / (1.0 + std::exp(-x)));
    }
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& xv = t.value(ai);
        TensorT<T> ga(xv.shape());
        for (int64_t i = 0; i < ga.numel(); ++i) {
            const double x = static_cast<double>(xv[i]);
            const double s = 1.0 / (1.0 + std::exp(-x));
            ga[i] = static_cast<T>(static_cast<double>(g[i]) * (s * (1.0 + x * (1.0 - s))));
        }
        t.accum(ai, ga);
    });
}

template <typename T>
VarT<T> reshape(VarT<T> a, Shape s) {
    TensorT<T> out = a.val().reshaped(s);
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai](TapeT<T>& t, int self) {
        t.accum(ai, t.node(self).grad.reshaped(t.value(ai).shape()));
    });
}

// (B, n, d) -> (B*h, n, d/h)
template <typename T>
VarT<T> split_heads(VarT<T> a, int64_t h) {
    if (a.val().rank() != 3 || a.val().dim(2) % h != 0) throw DimensionError("split_heads: bad shape");
    const int64_t B = a.val().dim(0), n = a.val().dim(1), d = a.val().dim(2), dh = d / h;
    TensorT<T> out({B * h, n, dh});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t hd = 0; hd < h; ++hd)
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < dh; ++j)
                    out.at(b * h + hd, i, j) = a.val().at(b, i, hd * dh + j);
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai, B, h, n, dh](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        TensorT<T> ga({B, n, h * dh});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t hd = 0; hd < h; ++hd)
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < dh; ++j)
                        ga.at(b, i, hd * dh + j) = g.at(b * h + hd, i, j);
        t.accum(ai, ga);
    });
}

// (B*h, n, dh) -> (B, n, h*dh)
template <typename T>
VarT<T> merge_heads(VarT<T> a, int64_t h) {
    if (a.val().rank() != 3 || a.val().dim(0) % h != 0) throw DimensionError("merge_heads: bad shape");
    const int64_t B = a.val().dim(0) / h, n = a.val().dim(1), dh = a.val().dim(2);
    TensorT<T> out({B, n, h * dh});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t hd = 0; hd < h; ++hd)
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < dh; ++j)
                    out.at(b, i, hd * dh + j) = a.val().at(b * h + hd, i, j);
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai, B, h, n, dh](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        TensorT<T> ga({B * h, n, dh});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t hd = 0; hd < h; ++hd)
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < dh; ++j)
                        ga.at(b * h + hd, i, j) = g.at(b, i, hd * dh + j);
        t.accum(ai, ga);
    });
}

// out (..., len) = a[..., from : from+len]
template <typename T>
VarT<T> slice_last(VarT<T> a, int64_t from, int64_t len) {
    const int64_t d = a.val().shape().back();
    if (from < 0 || len < 1 || from + len > d) throw DimensionError("slice_last: out of range");
    const int64_t R = a.val().numel() / d;
    Shape os = a.val().shape();
    os.back() = len;
    TensorT<T> out(os);
    for (int64_t r = 0; r < R; ++r)
        for (int64_t j = 0; j < len; ++j) out[r * len + j] = a.val()[r * d + from + j];
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai, from, len, d, R](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        TensorT<T> ga = TensorT<T>::zeros(t.value(ai).shape());
        for (int64_t r = 0; r < R; ++r)
            for (int64_t j = 0; j < len; ++j) ga[r * d + from + j] = g[r * len + j];
        t.accum(ai, ga);
    });
}

// rows of a (N, rest...) gathered by idx -> (K, rest...); idx may repeat
template <typename T>
VarT<T> gather_rows(VarT<T> a, std::vector<int64_t> idx) {
    if (a.val().rank() < 1) throw DimensionError("gather_rows: need rank >= 1");
    const int64_t N = a.val().dim(0);
    const int64_t row = a.val().numel() / N;
    for (int64_t i : idx)
        if (i < 0 || i >= N) throw DimensionError("gather_rows: index out of range");
    Shape os = a.val().shape();
    os[0] = static_cast<int64_t>(idx.size());
    TensorT<T> out(os);
    for (size_t r = 0; r < idx.size(); ++r)
        for (int64_t j = 0; j < row; ++j) out[static_cast<int64_t>(r) * row + j] = a.val()[idx[r] * row + j];
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai, idx = std::move(idx), row](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        TensorT<T> ga = TensorT<T>::zeros(t.value(ai).shape());
        for (size_t r = 0; r < idx.size(); ++r)
            for (int64_t j = 0; j < row; ++j) ga[idx[r] * row + j] += g[static_cast<int64_t>(r) * row + j];
        t.accum(ai, ga);
    });
}

// out = copy(base); out.flat[idx[i]] = vals.flat[i]. idx entries must be unique.
template <typename T>
VarT<T> overwrite_scatter(VarT<T> base, VarT<T> vals, std::vector<int64_t> idx) {
    if (static_cast<int64_t>(idx.size()) != vals.val().numel())
        throw DimensionError("overwrite_scatter: idx size != vals numel");
    TensorT<T> out = base.val();
    const int64_t N = out.numel();
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= N) throw DimensionError("overwrite_scatter: index out of range");
        out[idx[i]] = vals.val()[static_cast<int64_t>(i)];
    }
    int bi = base.id, vi = vals.id;
    return base.tape->make(std::move(out), {bi, vi}, [bi, vi, idx = std::move(idx)](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.wants_grad(bi)) {
            TensorT<T> gb = g;
            for (int64_t i : idx) gb[i] = T(0);
            t.accum(bi, gb);
        }
        if (t.wants_grad(vi)) {
            TensorT<T> gv(t.value(vi).shape());
            for (size_t i = 0; i < idx.size(); ++i) gv[static_cast<int64_t>(i)] = g[idx[i]];
            t.accum(vi, gv);
        }
    });
}

// pick elements a.flat[idx[i]] into out of the given shape
template <typename T>
VarT<T> gather_flat(VarT<T> a, std::vector<int64_t> idx, Shape out_shape) {
    if (numel_of(out_shape) != static_cast<int64_t>(idx.size()))
        throw DimensionError("gather_flat: idx size != out shape");
    const int64_t N = a.val().numel();
    TensorT<T> out(out_shape);
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= N) throw DimensionError("gather_flat: index out of range");
        out[static_cast<int64_t>(i)] = a.val()[idx[i]];
    }
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai, idx = std::move(idx)](TapeT<T>& t, int self) {
        const auto& g = t.node(self).grad;
        TensorT<T> ga = TensorT<T>::zeros(t.value(ai).shape());
        for (size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[static_cast<int64_t>(i)];
        t.accum(ai, ga);
    });
}

template <typename T>
VarT<T> sum_all(VarT<T> a) {
    T s = T(0);
    for (int64_t i = 0; i < a.val().numel(); ++i) s += a.val()[i];
    TensorT<T> out({1});
    out[0] = s;
    int ai = a.id;
    return a.tape->make(std::move(out), {ai}, [ai](TapeT<T>& t, int self) {
        const T g = t.node(self).grad[0];
        TensorT<T> ga(t.value(ai).shape(), g);
        t.accum(ai, ga);
    });
}

template <typename T>
VarT<T> mean_all(VarT<T> a) {
    return affine(sum_all(a), T(1) / static_cast<T>(a.val().numel()));
}

// mean((a-b)^2) over every entry
template <typename T>
VarT<T> mse(VarT<T> a, VarT<T> b) {
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

} // namespace ad

// Central-difference gradient checker. `build` reconstructs the scalar loss
// from leaf parameter tensors each time it is called; analytic gradients come
// from one backward sweep, finite differences from re-running `build` on
// perturbed copies. Checks up to `coords_per_tensor` sampled coordinates per
// parameter (all coordinates if <= 0). Returns the max relative error
// |analytic - fd| / max(|analytic|, |fd|, 1e-8).
template <typename T>
double grad_check(const std::function<VarT<T>(TapeT<T>&, std::vector<VarT<T>>&)>& build,
                  std::vector<TensorT<T>> params, double eps,
                  int coords_per_tensor = -1, uint64_t seed = 0) {
    if (eps <= 0) throw ConfigError("grad_check: eps must be > 0");
    auto eval = [&](const std::vector<TensorT<T>>& p, std::vector<TensorT<T>>* grads) {
        TapeT<T> tape;
        std::vector<VarT<T>> vars;
        vars.reserve(p.size());
        for (const auto& t : p) vars.push_back(tape.leaf(t, grads != nullptr));
        VarT<T> loss = build(tape, vars);
        if (loss.val().numel() != 1) throw DimensionError("grad_check: loss must be scalar");
        const double lv = static_cast<double>(loss.val()[0]);
        if (!std::isfinite(lv)) throw NumericError("grad_check: non-finite loss");
        if (grads) {
            tape.backward(loss);
            grads->clear();
            for (auto& v : vars) grads->push_back(tape.grad(v));
        }
        return lv;
    };

    std::vector<TensorT<T>> analytic;
    eval(params, &analytic);

    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const int64_t n = params[pi].numel();
        std::vector<int64_t> coords;
        if (coords_per_tensor <= 0 || coords_per_tensor >= n) {
            coords.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            for (int c = 0; c < coords_per_tensor; ++c)
                coords.push_back(rng_uniform_int(seed, Stream::generic, static_cast<uint64_t>(pi),
                                                 static_cast<uint64_t>(c), 0, n - 1));
        }
        for (int64_t ci : coords) {
            const T orig = params[pi][ci];
            params[pi][ci] = orig + static_cast<T>(eps);
            const double lp = eval(params, nullptr);
            params[pi][ci] = orig - static_cast<T>(eps);
            const double lm = eval(params, nullptr);
            params[pi][ci] = orig;
            const double fd = (lp - lm) / (2.0 * eps);
            const double an = static_cast<double>(analytic[pi][ci]);
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

} // namespace qdm
