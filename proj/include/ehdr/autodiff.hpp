#pragma once

#include "ehdr/tensor.hpp"

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

namespace ehdr {

// Reverse-mode autodiff over Tensor<T>. The graph is built per forward pass
// (define-by-run). Gradients live in an external Grads map rather than inside
// nodes so independent samples of a batch can run backward concurrently
// against shared parameter nodes.

template <typename T> struct Node;
template <typename T> using NodePtr = std::shared_ptr<Node<T>>;
template <typename T> class Grads;

template <typename T>
struct Node {
    Tensor<T> val;
    bool needs_grad = false;
    std::vector<NodePtr<T>> parents;
    std::function<void(const Tensor<T>&, Grads<T>&)> back;
    std::string name; // set for parameters only

    const std::vector<int>& shape() const { return val.shape(); }
};

template <typename T>
class Grads {
public:
    Tensor<T>& acc(const Node<T>* n) {
        auto it = m_.find(n);
        if (it == m_.end()) it = m_.emplace(n, Tensor<T>(n->val.shape())).first;
        return it->second;
    }

    const Tensor<T>* find(const Node<T>* n) const {
        auto it = m_.find(n);
        return it == m_.end() ? nullptr : &it->second;
    }

    void clear() { m_.clear(); }

    // Merge another gradient map into this one (deterministic caller-chosen order).
    void add(const Grads<T>& o) {
        for (const auto& [node, g] : o.m_) {
            auto it = m_.find(node);
            if (it == m_.end()) {
                m_.emplace(node, g);
            } else {
                Tensor<T>& dst = it->second;
                for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += g[i];
            }
        }
    }

private:
    std::unordered_map<const Node<T>*, Tensor<T>> m_;
};

template <typename T>
NodePtr<T> make_node(Tensor<T> val, std::vector<NodePtr<T>> parents,
                     std::function<void(const Tensor<T>&, Grads<T>&)> back) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(val);
    for (const auto& p : parents) {
        if (p->needs_grad) {
            n->needs_grad = true;
            break;
        }
    }
    if (n->needs_grad) {
        n->parents = std::move(parents);
        n->back = std::move(back);
    }
    return n;
}

template <typename T>
NodePtr<T> constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(v);
    n->needs_grad = false;
    return n;
}

template <typename T>
NodePtr<T> leaf(Tensor<T> v, std::string name = {}) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(v);
    n->needs_grad = true;
    n->name = std::move(name);
    return n;
}

template <typename T>
NodePtr<T> detach(const NodePtr<T>& x) {
    return constant(x->val);
}

// Runs reverse-mode accumulation from a scalar root. Consumers are processed
// before producers (reverse post-order over the needs-grad subgraph), so each
// node's gradient is complete when its closure fires.
template <typename T>
void backward(const NodePtr<T>& root, Grads<T>& gs) {
    if (root->val.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    if (!root->needs_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    struct Frame {
        Node<T>* n;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node<T>* p = f.n->parents[f.next++].get();
            if (p->needs_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    gs.acc(root.get()).fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->back) continue;
        const Tensor<T>* g = gs.find(n);
        if (g) n->back(*g, gs);
    }
}

// ---------------------------------------------------------------------------
// elementwise ops

namespace detail {

template <typename T>
void check_same_shape(const NodePtr<T>& a, const NodePtr<T>& b, const char* op) {
    if (!a->val.same_shape(b->val))
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

} // namespace detail

template <typename T, class F, class DF>
NodePtr<T> map_unary(const NodePtr<T>& x, F f, DF dfdx) {
    Tensor<T> out(x->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(x->val[i]);
    Node<T>* xp = x.get();
    return make_node<T>(std::move(out), {x}, [xp, dfdx](const Tensor<T>& g, Grads<T>& gs) {
        Tensor<T>& gx = gs.acc(xp);
        for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * dfdx(xp->val[i]);
    });
}

template <typename T>
NodePtr<T> operator+(const NodePtr<T>& a, const NodePtr<T>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> out(a->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + b->val[i];
    Node<T>* ap = a.get();
    Node<T>* bp = b.get();
    return make_node<T>(std::move(out), {a, b}, [ap, bp](const Tensor<T>& g, Grads<T>& gs) {
        if (ap->needs_grad) {
            Tensor<T>& ga = gs.acc(ap);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (bp->needs_grad) {
            Tensor<T>& gb = gs.acc(bp);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    });
}

template <typename T>
NodePtr<T> operator-(const NodePtr<T>& a, const NodePtr<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out(a->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] - b->val[i];
    Node<T>* ap = a.get();
    Node<T>* bp = b.get();
    return make_node<T>(std::move(out), {a, b}, [ap, bp](const Tensor<T>& g, Grads<T>& gs) {
        if (ap->needs_grad) {
            Tensor<T>& ga = gs.acc(ap);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (bp->needs_grad) {
            Tensor<T>& gb = gs.acc(bp);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
NodePtr<T> operator*(const NodePtr<T>& a, const NodePtr<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out(a->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * b->val[i];
    Node<T>* ap = a.get();
    Node<T>* bp = b.get();
    return make_node<T>(std::move(out), {a, b}, [ap, bp](const Tensor<T>& g, Grads<T>& gs) {
        if (ap->needs_grad) {
            Tensor<T>& ga = gs.acc(ap);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bp->val[i];
        }
        if (bp->needs_grad) {
            Tensor<T>& gb = gs.acc(bp);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * ap->val[i];
        }
    });
}

template <typename T>
NodePtr<T> scale(const NodePtr<T>& x, T c) {
    return map_unary(x, [c](T v) { return v * c; }, [c](T) { return c; });
}

template <typename T>
NodePtr<T> add_scalar(const NodePtr<T>& x, T c) {
    return map_unary(x, [c](T v) { return v + c; }, [](T) { return T(1); });
}

template <typename T>
NodePtr<T> relu(const NodePtr<T>& x) {
    return map_unary(x, [](T v) { return v > T(0) ? v : T(0); },
                     [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
NodePtr<T> leaky_relu(const NodePtr<T>& x, T slope = T(0.2)) {
    return map_unary(x, [slope](T v) { return v > T(0) ? v : slope * v; },
                     [slope](T v) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
NodePtr<T> sigmoid(const NodePtr<T>& x) {
    auto sig = [](T v) {
        return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    };
    return map_unary(x, sig, [sig](T v) {
        T s = sig(v);
        return s * (T(1) - s);
    });
}

template <typename T>
NodePtr<T> softplus(const NodePtr<T>& x) {
    auto sp = [](T v) { return v > T(30) ? v : std::log1p(std::exp(v)); };
    auto sig = [](T v) {
        return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    };
    return map_unary(x, sp, sig);
}

template <typename T>
NodePtr<T> abs_op(const NodePtr<T>& x) {
    return map_unary(x, [](T v) { return std::abs(v); },
                     [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
NodePtr<T> square(const NodePtr<T>& x) {
    return map_unary(x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

template <typename T>
NodePtr<T> log_op(const NodePtr<T>& x) {
    return map_unary(x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <typename T>
NodePtr<T> clamp01(const NodePtr<T>& x) {
    return map_unary(x, [](T v) { return v < T(0) ? T(0) : (v > T(1) ? T(1) : v); },
                     [](T v) { return (v > T(0) && v < T(1)) ? T(1) : T(0); });
}

// mu-law range compression, T(x) = log(1 + mu*x) / log(1 + mu). Smooth, used
// in the loss path; the metrics module has the canonical evaluation variant.
template <typename T>
NodePtr<T> mu_compress(const NodePtr<T>& x, T mu) {
    const T denom = std::log1p(mu);
    return map_unary(x, [mu, denom](T v) { return std::log1p(mu * std::max(v, T(0))) / denom; },
                     [mu, denom](T v) { return v >= T(0) ? mu / ((T(1) + mu * v) * denom) : T(0); });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
NodePtr<T> mean_all(const NodePtr<T>& x) {
    const int64_t n = x->val.numel();
    Tensor<T> out({1});
    out[0] = x->val.sum() / static_cast<T>(n);
    Node<T>* xp = x.get();
    return make_node<T>(std::move(out), {x}, [xp, n](const Tensor<T>& g, Grads<T>& gs) {
        Tensor<T>& gx = gs.acc(xp);
        const T gv = g[0] / static_cast<T>(n);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += gv;
    });
}

template <typename T>
NodePtr<T> sum_all(const NodePtr<T>& x) {
    Tensor<T> out({1});
    out[0] = x->val.sum();
    Node<T>* xp = x.get();
    return make_node<T>(std::move(out), {x}, [xp](const Tensor<T>& g, Grads<T>& gs) {
        Tensor<T>& gx = gs.acc(xp);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g[0];
    });
}

template <typename T>
NodePtr<T> mean_abs_diff(const NodePtr<T>& a, const NodePtr<T>& b) {
    return mean_all(abs_op(a - b));
}

// ---------------------------------------------------------------------------
// shape ops on (C,H,W)

template <typename T>
NodePtr<T> concat_ch(const std::vector<NodePtr<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_ch: empty");
    const int h = xs[0]->val.dim(1), w = xs[0]->val.dim(2);
    int ctot = 0;
    for (const auto& x : xs) {
        if (x->val.ndim() != 3 || x->val.dim(1) != h || x->val.dim(2) != w)
            throw std::invalid_argument("concat_ch: shape mismatch");
        ctot += x->val.dim(0);
    }
    Tensor<T> out({ctot, h, w});
    int64_t off = 0;
    for (const auto& x : xs) {
        std::copy(x->val.data(), x->val.data() + x->val.numel(), out.data() + off);
        off += x->val.numel();
    }
    std::vector<Node<T>*> raw;
    for (const auto& x : xs) raw.push_back(x.get());
    return make_node<T>(std::move(out), xs, [raw](const Tensor<T>& g, Grads<T>& gs) {
        int64_t off = 0;
        for (Node<T>* x : raw) {
            const int64_t n = x->val.numel();
            if (x->needs_grad) {
                Tensor<T>& gx = gs.acc(x);
                for (int64_t i = 0; i < n; ++i) gx[i] += g[off + i];
            }
            off += n;
        }
    });
}

template <typename T>
NodePtr<T> slice_ch(const NodePtr<T>& x, int c0, int len) {
    const int h = x->val.dim(1), w = x->val.dim(2);
    const int64_t plane = static_cast<int64_t>(h) * w;
    Tensor<T> out({len, h, w});
    std::copy(x->val.data() + c0 * plane, x->val.data() + (c0 + len) * plane, out.data());
    Node<T>* xp = x.get();
    return make_node<T>(std::move(out), {x}, [xp, c0, plane, len](const Tensor<T>& g, Grads<T>& gs) {
        Tensor<T>& gx = gs.acc(xp);
        for (int64_t i = 0; i < len * plane; ++i) gx[c0 * plane + i] += g[i];
    });
}

// y(c,p) = x(c,p) * m(0,p); gradient to both factors.
template <typename T>
NodePtr<T> mul_map(const NodePtr<T>& x, const NodePtr<T>& m) {
    const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    if (m->val.dim(0) != 1 || m->val.dim(1) != h || m->val.dim(2) != w)
        throw std::invalid_argument("mul_map: map must be (1,h,w)");
    const int64_t plane = static_cast<int64_t>(h) * w;
    Tensor<T> out({c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int64_t p = 0; p < plane; ++p)
            out[ci * plane + p] = x->val[ci * plane + p] * m->val[p];
    Node<T>* xp = x.get();
    Node<T>* mp = m.get();
    return make_node<T>(std::move(out), {x, m}, [xp, mp, c, plane](const Tensor<T>& g, Grads<T>& gs) {
        if (xp->needs_grad) {
            Tensor<T>& gx = gs.acc(xp);
            for (int ci = 0; ci < c; ++ci)
                for (int64_t p = 0; p < plane; ++p)
                    gx[ci * plane + p] += g[ci * plane + p] * mp->val[p];
        }
        if (mp->needs_grad) {
            Tensor<T>& gm = gs.acc(mp);
            for (int ci = 0; ci < c; ++ci)
                for (int64_t p = 0; p < plane; ++p)
                    gm[p] += g[ci * plane + p] * xp->val[ci * plane + p];
        }
    });
}

// softmax across the channel dimension at every pixel (shift-stabilized).
template <typename T>
NodePtr<T> softmax_ch(const NodePtr<T>& x) {
    const int k = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    const int64_t plane = static_cast<int64_t>(h) * w;
    Tensor<T> out({k, h, w});
    for (int64_t p = 0; p < plane; ++p) {
        T mx = x->val[p];
        for (int i = 1; i < k; ++i) mx = std::max(mx, x->val[i * plane + p]);
        T s = T(0);
        for (int i = 0; i < k; ++i) {
            const T e = std::exp(x->val[i * plane + p] - mx);
            out[i * plane + p] = e;
            s += e;
        }
        for (int i = 0; i < k; ++i) out[i * plane + p] /= s;
    }
    Node<T>* xp = x.get();
    Tensor<T> yv = out; // softmax output needed by the backward formula
    return make_node<T>(std::move(out), {x},
                        [xp, yv = std::move(yv), k, plane](const Tensor<T>& g, Grads<T>& gs) {
        Tensor<T>& gx = gs.acc(xp);
        for (int64_t p = 0; p < plane; ++p) {
            T dot = T(0);
            for (int i = 0; i < k; ++i) dot += g[i * plane + p] * yv[i * plane + p];
            for (int i = 0; i < k; ++i)
                gx[i * plane + p] += yv[i * plane + p] * (g[i * plane + p] - dot);
        }
    });
}

template <typename T>
NodePtr<T> upsample2x(const NodePtr<T>& x) {
    const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    Tensor<T> out({c, 2 * h, 2 * w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out.at(ci, y, xx) = x->val.at(ci, y / 2, xx / 2);
    Node<T>* xp = x.get();
    return make_node<T>(std::move(out), {x}, [xp, c, h, w](const Tensor<T>& g, Grads<T>& gs) {
        Tensor<T>& gx = gs.acc(xp);
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    gx.at(ci, y / 2, xx / 2) += g.at(ci, y, xx);
    });
}

// ---------------------------------------------------------------------------
// conv2d, im2col + GEMM

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, std::vector<T>& col,
            int ho, int wo) {
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int ck = cin * kh * kw;
    const int64_t n = static_cast<int64_t>(ho) * wo;
    col.assign(static_cast<size_t>(ck) * n, T(0));
    for (int64_t out_idx = 0; out_idx < n; ++out_idx) {
        const int oy = static_cast<int>(out_idx) / wo;
        const int ox = static_cast<int>(out_idx) % wo;
        const int iy0 = oy * stride - pad;
        const int ix0 = ox * stride - pad;
        T* dst = col.data() + out_idx * ck;
        int r = 0;
        for (int ci = 0; ci < cin; ++ci) {
            for (int ky = 0; ky < kh; ++ky) {
                const int yy = iy0 + ky;
                for (int kx = 0; kx < kw; ++kx, ++r) {
                    const int xx = ix0 + kx;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w) dst[r] = x.at(ci, yy, xx);
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const std::vector<T>& col, int cin, int h, int w, int kh, int kw, int stride,
                int pad, int ho, int wo, Tensor<T>& gx) {
    const int ck = cin * kh * kw;
    const int64_t n = static_cast<int64_t>(ho) * wo;
    for (int64_t out_idx = 0; out_idx < n; ++out_idx) {
        const int oy = static_cast<int>(out_idx) / wo;
        const int ox = static_cast<int>(out_idx) % wo;
        const int iy0 = oy * stride - pad;
        const int ix0 = ox * stride - pad;
        const T* src = col.data() + out_idx * ck;
        int r = 0;
        for (int ci = 0; ci < cin; ++ci) {
            for (int ky = 0; ky < kh; ++ky) {
                const int yy = iy0 + ky;
                for (int kx = 0; kx < kw; ++kx, ++r) {
                    const int xx = ix0 + kx;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w) gx.at(ci, yy, xx) += src[r];
                }
            }
        }
    }
}

} // namespace detail

// x: (Cin,H,W), w: (Cout,Cin,kh,kw), b: (Cout). "Same" padding for stride 1
// and odd kernels; stride 2 halves even spatial dims.
template <typename T>
NodePtr<T> conv2d(const NodePtr<T>& x, const NodePtr<T>& w, const NodePtr<T>& b, int stride = 1) {
    const int cin = x->val.dim(0), h = x->val.dim(1), wd = x->val.dim(2);
    const int cout = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
    if (w->val.dim(1) != cin) throw std::invalid_argument("conv2d: channel mismatch");
    const int pad = (kh - 1) / 2;
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wd + 2 * pad - kw) / stride + 1;
    const int ck = cin * kh * kw;
    const int64_t n = static_cast<int64_t>(ho) * wo;

    std::vector<T> col;
    detail::im2col(x->val, kh, kw, stride, pad, col, ho, wo);

    Tensor<T> out({cout, ho, wo});
    {
        Eigen::Map<const detail::MatCM<T>> colm(col.data(), ck, n);
        Eigen::Map<const detail::MatRM<T>> wm(w->val.data(), cout, ck);
        Eigen::Map<detail::MatRM<T>> om(out.data(), cout, n);
        om.noalias() = wm * colm;
        for (int c = 0; c < cout; ++c) om.row(c).array() += b->val[c];
    }

    Node<T>* xp = x.get();
    Node<T>* wp = w.get();
    Node<T>* bp = b.get();
    return make_node<T>(std::move(out), {x, w, b},
                        [xp, wp, bp, stride, pad, ho, wo](const Tensor<T>& g, Grads<T>& gs) {
        const int cin = xp->val.dim(0), h = xp->val.dim(1), wd = xp->val.dim(2);
        const int cout = wp->val.dim(0), kh = wp->val.dim(2), kw = wp->val.dim(3);
        const int ck = cin * kh * kw;
        const int64_t n = static_cast<int64_t>(ho) * wo;
        Eigen::Map<const detail::MatRM<T>> gm(g.data(), cout, n);

        std::vector<T> col;
        detail::im2col(xp->val, kh, kw, stride, pad, col, ho, wo);
        Eigen::Map<const detail::MatCM<T>> colm(col.data(), ck, n);

        if (wp->needs_grad) {
            Tensor<T>& gw = gs.acc(wp);
            Eigen::Map<detail::MatRM<T>> gwm(gw.data(), cout, ck);
            gwm.noalias() += gm * colm.transpose();
        }
        if (bp->needs_grad) {
            Tensor<T>& gb = gs.acc(bp);
            for (int c = 0; c < cout; ++c) gb[c] += gm.row(c).sum();
        }
        if (xp->needs_grad) {
            std::vector<T> colg(static_cast<size_t>(ck) * n);
            Eigen::Map<detail::MatCM<T>> cgm(colg.data(), ck, n);
            Eigen::Map<const detail::MatRM<T>> wm(wp->val.data(), cout, ck);
            cgm.noalias() = wm.transpose() * gm;
            Tensor<T>& gx = gs.acc(xp);
            detail::col2im_add(colg, cin, h, wd, kh, kw, stride, pad, ho, wo, gx);
        }
    });
}

// ---------------------------------------------------------------------------
// deformable conv (v2-style): per-tap learned offsets plus modulation masks.
// offs: (2K,H,W) with channels [2k]=dy, [2k+1]=dx; mask: (K,H,W) already in
// (0,1). Stride 1, same padding. Samples outside the image contribute zero.

namespace detail {

template <typename T>
struct BilinearTap {
    int y0, x0;
    T wy, wx; // fractional parts
    bool inside(int h, int w, int dy, int dx) const {
        const int yy = y0 + dy, xx = x0 + dx;
        return yy >= 0 && yy < h && xx >= 0 && xx < w;
    }
};

} // namespace detail

template <typename T>
NodePtr<T> deform_conv2d(const NodePtr<T>& x, const NodePtr<T>& offs, const NodePtr<T>& mask,
                         const NodePtr<T>& w, const NodePtr<T>& b) {
    const int cin = x->val.dim(0), h = x->val.dim(1), wd = x->val.dim(2);
    const int cout = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
    const int k = kh * kw;
    const int pad = (kh - 1) / 2;
    if (offs->val.dim(0) != 2 * k || mask->val.dim(0) != k)
        throw std::invalid_argument("deform_conv2d: offset/mask channel mismatch");
    const int ck = cin * k;
    const int64_t n = static_cast<int64_t>(h) * wd;

    // col(ci*k + j, p) = mask_j(p) * bilinear(x_ci, tap_j(p))
    auto build_col = [cin, h, wd, kh, kw, k, pad, ck, n](const Tensor<T>& xv, const Tensor<T>& ov,
                                                         const Tensor<T>& mv, std::vector<T>& col) {
        col.assign(static_cast<size_t>(ck) * n, T(0));
        for (int64_t p = 0; p < n; ++p) {
            const int oy = static_cast<int>(p) / wd;
            const int ox = static_cast<int>(p) % wd;
            T* dst = col.data() + p * ck;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const int j = ky * kw + kx;
                    const T py = oy + ky - pad + ov[(2 * j) * n + p];
                    const T px = ox + kx - pad + ov[(2 * j + 1) * n + p];
                    const T mj = mv[j * n + p];
                    const int y0 = static_cast<int>(std::floor(py));
                    const int x0 = static_cast<int>(std::floor(px));
                    const T ay = py - y0, ax = px - x0;
                    for (int ci = 0; ci < cin; ++ci) {
                        T s = T(0);
                        for (int dy = 0; dy < 2; ++dy) {
                            const int yy = y0 + dy;
                            if (yy < 0 || yy >= h) continue;
                            const T wy = dy ? ay : T(1) - ay;
                            for (int dx = 0; dx < 2; ++dx) {
                                const int xx = x0 + dx;
                                if (xx < 0 || xx >= wd) continue;
                                const T wx = dx ? ax : T(1) - ax;
                                s += wy * wx * xv.at(ci, yy, xx);
                            }
                        }
                        dst[ci * k + j] = mj * s;
                    }
                }
            }
        }
    };

    std::vector<T> col;
    build_col(x->val, offs->val, mask->val, col);

    Tensor<T> out({cout, h, wd});
    {
        Eigen::Map<const detail::MatCM<T>> colm(col.data(), ck, n);
        Eigen::Map<const detail::MatRM<T>> wm(w->val.data(), cout, ck);
        Eigen::Map<detail::MatRM<T>> om(out.data(), cout, n);
        om.noalias() = wm * colm;
        for (int c = 0; c < cout; ++c) om.row(c).array() += b->val[c];
    }

    Node<T>* xp = x.get();
    Node<T>* op = offs.get();
    Node<T>* mp = mask.get();
    Node<T>* wp = w.get();
    Node<T>* bp = b.get();
    return make_node<T>(
        std::move(out), {x, offs, mask, w, b},
        [xp, op, mp, wp, bp, build_col](const Tensor<T>& g, Grads<T>& gs) {
            const int cin = xp->val.dim(0), h = xp->val.dim(1), wd = xp->val.dim(2);
            const int cout = wp->val.dim(0), kh = wp->val.dim(2), kw = wp->val.dim(3);
            const int k = kh * kw;
            const int pad = (kh - 1) / 2;
            const int ck = cin * k;
            const int64_t n = static_cast<int64_t>(h) * wd;

            Eigen::Map<const detail::MatRM<T>> gm(g.data(), cout, n);

            std::vector<T> col;
            build_col(xp->val, op->val, mp->val, col);
            Eigen::Map<const detail::MatCM<T>> colm(col.data(), ck, n);

            if (wp->needs_grad) {
                Tensor<T>& gw = gs.acc(wp);
                Eigen::Map<detail::MatRM<T>> gwm(gw.data(), cout, ck);
                gwm.noalias() += gm * colm.transpose();
            }
            if (bp->needs_grad) {
                Tensor<T>& gb = gs.acc(bp);
                for (int c = 0; c < cout; ++c) gb[c] += gm.row(c).sum();
            }

            const bool need_x = xp->needs_grad, need_o = op->needs_grad, need_m = mp->needs_grad;
            if (!need_x && !need_o && !need_m) return;

            std::vector<T> colg(static_cast<size_t>(ck) * n);
            {
                Eigen::Map<detail::MatCM<T>> cgm(colg.data(), ck, n);
                Eigen::Map<const detail::MatRM<T>> wm(wp->val.data(), cout, ck);
                cgm.noalias() = wm.transpose() * gm;
            }

            Tensor<T>* gx = need_x ? &gs.acc(xp) : nullptr;
            Tensor<T>* go = need_o ? &gs.acc(op) : nullptr;
            Tensor<T>* gmk = need_m ? &gs.acc(mp) : nullptr;

            for (int64_t p = 0; p < n; ++p) {
                const int oy = static_cast<int>(p) / wd;
                const int ox = static_cast<int>(p) % wd;
                const T* cg = colg.data() + p * ck;
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        const int j = ky * kw + kx;
                        const T py = oy + ky - pad + op->val[(2 * j) * n + p];
                        const T px = ox + kx - pad + op->val[(2 * j + 1) * n + p];
                        const T mj = mp->val[j * n + p];
                        const int y0 = static_cast<int>(std::floor(py));
                        const int x0 = static_cast<int>(std::floor(px));
                        const T ay = py - y0, ax = px - x0;
                        T gsum_mask = T(0), gsum_dy = T(0), gsum_dx = T(0);
                        for (int ci = 0; ci < cin; ++ci) {
                            const T cgi = cg[ci * k + j];
                            if (cgi == T(0)) continue;
                            T sample = T(0), dsdy = T(0), dsdx = T(0);
                            for (int dy = 0; dy < 2; ++dy) {
                                const int yy = y0 + dy;
                                if (yy < 0 || yy >= h) continue;
                                const T wy = dy ? ay : T(1) - ay;
                                const T dwy = dy ? T(1) : T(-1);
                                for (int dx = 0; dx < 2; ++dx) {
                                    const int xx = x0 + dx;
                                    if (xx < 0 || xx >= wd) continue;
                                    const T wx = dx ? ax : T(1) - ax;
                                    const T dwx = dx ? T(1) : T(-1);
                                    const T v = xp->val.at(ci, yy, xx);
                                    sample += wy * wx * v;
                                    dsdy += dwy * wx * v;
                                    dsdx += wy * dwx * v;
                                    if (need_x) gx->at(ci, yy, xx) += cgi * mj * wy * wx;
                                }
                            }
                            gsum_mask += cgi * sample;
                            gsum_dy += cgi * dsdy;
                            gsum_dx += cgi * dsdx;
                        }
                        if (need_m) (*gmk)[j * n + p] += gsum_mask;
                        if (need_o) {
                            (*go)[(2 * j) * n + p] += mj * gsum_dy;
                            (*go)[(2 * j + 1) * n + p] += mj * gsum_dx;
                        }
                    }
                }
            }
        });
}

} // namespace ehdr
