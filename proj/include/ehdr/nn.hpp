#pragma once

#include "ehdr/autodiff.hpp"

#include <random>
#include <string>
#include <vector>

namespace ehdr {

// Named parameter store. Modules create their parameters here at
// construction; the optimizer and checkpoint code iterate it in insertion
// order, which keeps runs deterministic.
template <typename T>
class ParamRegistry {
public:
    NodePtr<T> create(const std::string& name, Tensor<T> init) {
        auto p = leaf<T>(std::move(init), name);
        items_.emplace_back(name, p);
        return p;
    }

    const std::vector<std::pair<std::string, NodePtr<T>>>& items() const { return items_; }

    NodePtr<T> find(const std::string& name) const {
        for (const auto& [n, p] : items_)
            if (n == name) return p;
        return nullptr;
    }

    int64_t total_scalars() const {
        int64_t n = 0;
        for (const auto& [name, p] : items_) n += p->val.numel();
        return n;
    }

private:
    std::vector<std::pair<std::string, NodePtr<T>>> items_;
};

namespace init {

template <typename T>
Tensor<T> he_normal(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(d(rng));
    return t;
}

template <typename T>
Tensor<T> normal(std::vector<int> shape, double sigma, std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> d(0.0, sigma);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(d(rng));
    return t;
}

template <typename T>
Tensor<T> zeros(std::vector<int> shape) {
    return Tensor<T>(std::move(shape));
}

} // namespace init

// ---------------------------------------------------------------------------

template <typename T>
struct Conv2d {
    NodePtr<T> w, b;
    int stride = 1;

    Conv2d() = default;
    Conv2d(ParamRegistry<T>& reg, const std::string& name, int cin, int cout, int k,
           std::mt19937_64& rng, int stride_ = 1)
        : stride(stride_) {
        w = reg.create(name + ".w", init::he_normal<T>({cout, cin, k, k}, cin * k * k, rng));
        b = reg.create(name + ".b", init::zeros<T>({cout}));
    }

    NodePtr<T> operator()(const NodePtr<T>& x) const { return conv2d(x, w, b, stride); }
};

// Offset/mask-predicting deformable conv. The predictor conv is initialized
// with small random weights rather than zeros so sampling positions are
// generically non-integer (bilinear interpolation is non-smooth exactly on
// the pixel grid, which would break finite-difference gradient checks).
template <typename T>
struct DeformConv2d {
    Conv2d<T> predictor; // emits 2K offset channels + K mask logits
    NodePtr<T> w, b;
    int k = 3;
    bool plain_fallback = false; // fidelity-reduced path: ordinary convolution

    DeformConv2d() = default;
    DeformConv2d(ParamRegistry<T>& reg, const std::string& name, int cin, int cout, int k_,
                 std::mt19937_64& rng, bool fallback = false)
        : k(k_), plain_fallback(fallback) {
        w = reg.create(name + ".w", init::he_normal<T>({cout, cin, k, k}, cin * k * k, rng));
        b = reg.create(name + ".b", init::zeros<T>({cout}));
        if (!plain_fallback) {
            const int taps = k * k;
            predictor.stride = 1;
            predictor.w = reg.create(name + ".pred.w",
                                     init::normal<T>({3 * taps, cin, k, k}, 0.01, rng));
            predictor.b = reg.create(name + ".pred.b", init::normal<T>({3 * taps}, 0.01, rng));
        }
    }

    NodePtr<T> operator()(const NodePtr<T>& x) const {
        if (plain_fallback) return conv2d(x, w, b, 1);
        const int taps = k * k;
        auto pred = predictor(x);
        auto offs = slice_ch(pred, 0, 2 * taps);
        auto mask = sigmoid(slice_ch(pred, 2 * taps, taps));
        return deform_conv2d(x, offs, mask, w, b);
    }
};

// ---------------------------------------------------------------------------
// building blocks

// conv + leaky relu
template <typename T>
struct ConvLReLU {
    Conv2d<T> conv;
    ConvLReLU() = default;
    ConvLReLU(ParamRegistry<T>& reg, const std::string& name, int cin, int cout, int k,
              std::mt19937_64& rng, int stride = 1)
        : conv(reg, name, cin, cout, k, rng, stride) {}
    NodePtr<T> operator()(const NodePtr<T>& x) const { return leaky_relu(conv(x), T(0.2)); }
};

// x + conv(lrelu(conv(x)))
template <typename T>
struct ResidualBlock {
    Conv2d<T> c1, c2;
    ResidualBlock() = default;
    ResidualBlock(ParamRegistry<T>& reg, const std::string& name, int c, int k,
                  std::mt19937_64& rng)
        : c1(reg, name + ".c1", c, c, k, rng), c2(reg, name + ".c2", c, c, k, rng) {}
    NodePtr<T> operator()(const NodePtr<T>& x) const {
        return x + c2(leaky_relu(c1(x), T(0.2)));
    }
};

// Residual dense block: densely connected conv layers with growth g,
// 1x1 local feature fusion, local residual.
template <typename T>
struct ResidualDenseBlock {
    std::vector<Conv2d<T>> layers;
    Conv2d<T> fuse;
    ResidualDenseBlock() = default;
    ResidualDenseBlock(ParamRegistry<T>& reg, const std::string& name, int c, int growth,
                       int nlayers, int k, std::mt19937_64& rng) {
        int ch = c;
        for (int i = 0; i < nlayers; ++i) {
            layers.emplace_back(reg, name + ".d" + std::to_string(i), ch, growth, k, rng);
            ch += growth;
        }
        fuse = Conv2d<T>(reg, name + ".fuse", ch, c, 1, rng);
    }
    NodePtr<T> operator()(const NodePtr<T>& x) const {
        std::vector<NodePtr<T>> feats{x};
        NodePtr<T> cur = x;
        for (const auto& l : layers) {
            feats.push_back(leaky_relu(l(cur), T(0.2)));
            cur = concat_ch(feats);
        }
        return x + fuse(cur);
    }
};

// ---------------------------------------------------------------------------

template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(std::vector<std::pair<std::string, NodePtr<T>>> params, double lr, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& [name, p] : params_) {
            m_.emplace_back(p->val.shape());
            v_.emplace_back(p->val.shape());
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int64_t step_count() const { return t_; }

    void step(const Grads<T>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            const Tensor<T>* g = grads.find(params_[i].second.get());
            if (!g) continue;
            Tensor<T>& p = params_[i].second->val;
            Tensor<T>& m = m_[i];
            Tensor<T>& v = v_[i];
            for (int64_t j = 0; j < p.numel(); ++j) {
                const double gj = static_cast<double>((*g)[j]);
                m[j] = static_cast<T>(beta1_ * m[j] + (1.0 - beta1_) * gj);
                v[j] = static_cast<T>(beta2_ * v[j] + (1.0 - beta2_) * gj * gj);
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                p[j] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    // checkpoint access
    const std::vector<std::pair<std::string, NodePtr<T>>>& params() const { return params_; }
    std::vector<Tensor<T>>& moment1() { return m_; }
    std::vector<Tensor<T>>& moment2() { return v_; }
    void set_step_count(int64_t t) { t_ = t; }

private:
    std::vector<std::pair<std::string, NodePtr<T>>> params_;
    std::vector<Tensor<T>> m_, v_;
    double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
};

} // namespace ehdr
