#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ehdr/autodiff.hpp"
#include "ehdr/nn.hpp"

#include <random>

using namespace ehdr;

namespace {

using D = double;

Tensor<D> randt(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<D> t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
    return t;
}

// Central finite differences of a scalar graph output with respect to every
// element of one leaf, compared against the analytic gradient.
template <class BuildFn>
void check_grad(BuildFn build, std::vector<NodePtr<D>> leaves, double tol = 1e-6,
                double h = 1e-6) {
    Grads<D> gs;
    auto out = build();
    backward(out, gs);
    for (auto& leafn : leaves) {
        const Tensor<D>* g = gs.find(leafn.get());
        REQUIRE(g != nullptr);
        for (int64_t i = 0; i < leafn->val.numel(); ++i) {
            const double orig = leafn->val[i];
            leafn->val[i] = orig + h;
            const double fp = build()->val[0];
            leafn->val[i] = orig - h;
            const double fm = build()->val[0];
            leafn->val[i] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double an = (*g)[i];
            const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
            INFO("leaf elem ", i, " fd=", fd, " analytic=", an);
            CHECK(err < tol);
        }
    }
}

} // namespace

TEST_CASE("elementwise ops match finite differences") {
    std::mt19937_64 rng(7);
    auto a = leaf(randt({2, 3, 3}, rng));
    auto b = leaf(randt({2, 3, 3}, rng));

    check_grad([&] { return mean_all(a + b); }, {a, b});
    check_grad([&] { return mean_all((a - b) * a); }, {a, b});
    check_grad([&] { return mean_all(square(sigmoid(a))); }, {a});
    check_grad([&] { return mean_all(softplus(scale(a, 3.0))); }, {a});
    check_grad([&] { return sum_all(leaky_relu(a, 0.2)); }, {a}, 1e-5);
    check_grad([&] { return mean_all(mu_compress(softplus(a), 5000.0)); }, {a});
    check_grad([&] { return mean_abs_diff(a, b); }, {a, b}, 1e-5);
}

TEST_CASE("shape ops match finite differences") {
    std::mt19937_64 rng(11);
    auto a = leaf(randt({2, 4, 4}, rng));
    auto b = leaf(randt({3, 4, 4}, rng));
    auto m = leaf(randt({1, 4, 4}, rng, 0.1, 0.9));

    check_grad([&] { return mean_all(concat_ch<D>({a, b})); }, {a, b});
    check_grad([&] { return mean_all(square(slice_ch(b, 1, 2))); }, {b});
    check_grad([&] { return mean_all(mul_map(a, m)); }, {a, m});
    check_grad([&] { return mean_all(square(softmax_ch(b))); }, {b}, 1e-5);
    check_grad([&] { return mean_all(square(upsample2x(a))); }, {a});
}

TEST_CASE("conv2d matches finite differences") {
    std::mt19937_64 rng(13);
    auto x = leaf(randt({2, 6, 6}, rng));
    auto w = leaf(randt({3, 2, 3, 3}, rng, -0.5, 0.5));
    auto b = leaf(randt({3}, rng, -0.1, 0.1));

    check_grad([&] { return mean_all(square(conv2d(x, w, b, 1))); }, {x, w, b}, 1e-5);
    check_grad([&] { return mean_all(square(conv2d(x, w, b, 2))); }, {x, w, b}, 1e-5);
}

TEST_CASE("conv2d shapes") {
    std::mt19937_64 rng(17);
    auto x = constant(randt({4, 8, 8}, rng));
    auto w = constant(randt({6, 4, 5, 5}, rng));
    auto b = constant(Tensor<D>({6}));
    auto y1 = conv2d(x, w, b, 1);
    CHECK(y1->val.shape() == std::vector<int>{6, 8, 8});
    auto y2 = conv2d(x, w, b, 2);
    CHECK(y2->val.shape() == std::vector<int>{6, 4, 4});
}

TEST_CASE("deform_conv2d matches finite differences") {
    std::mt19937_64 rng(19);
    auto x = leaf(randt({2, 5, 5}, rng));
    // keep offsets away from exact integers: bilinear kernels kink there
    auto offs = leaf(randt({18, 5, 5}, rng, -0.73, 0.81));
    auto mask = leaf(randt({9, 5, 5}, rng, 0.2, 0.8));
    auto w = leaf(randt({2, 2, 3, 3}, rng, -0.5, 0.5));
    auto b = leaf(randt({2}, rng, -0.1, 0.1));

    check_grad([&] { return mean_all(square(deform_conv2d(x, offs, mask, w, b))); },
               {x, offs, mask, w, b}, 2e-5);
}

TEST_CASE("deform_conv2d with zero offsets and unit mask equals conv2d") {
    std::mt19937_64 rng(23);
    auto x = constant(randt({3, 6, 6}, rng));
    auto offs = constant(Tensor<D>({18, 6, 6}));
    auto mask = constant(Tensor<D>({9, 6, 6}, 1.0));
    auto w = constant(randt({4, 3, 3, 3}, rng));
    auto b = constant(randt({4}, rng));

    auto yd = deform_conv2d(x, offs, mask, w, b);
    auto yc = conv2d(x, w, b, 1);
    for (int64_t i = 0; i < yd->val.numel(); ++i)
        CHECK(yd->val[i] == doctest::Approx(yc->val[i]).epsilon(1e-12));
}

TEST_CASE("detach blocks gradients") {
    std::mt19937_64 rng(29);
    auto a = leaf(randt({1, 2, 2}, rng));
    auto out = mean_all(detach(a) * a);
    Grads<D> gs;
    backward(out, gs);
    const Tensor<D>* g = gs.find(a.get());
    REQUIRE(g != nullptr);
    // gradient flows only through the non-detached factor
    for (int64_t i = 0; i < a->val.numel(); ++i)
        CHECK((*g)[i] == doctest::Approx(a->val[i] / 4.0));
}

TEST_CASE("needs_grad pruning keeps constant subgraphs out") {
    std::mt19937_64 rng(31);
    auto c1 = constant(randt({1, 2, 2}, rng));
    auto c2 = constant(randt({1, 2, 2}, rng));
    auto y = c1 * c2 + c1;
    CHECK_FALSE(y->needs_grad);
    CHECK(y->parents.empty());
}

TEST_CASE("grads merge accumulates") {
    std::mt19937_64 rng(37);
    auto a = leaf(randt({2, 2, 2}, rng));
    Grads<D> g1, g2;
    backward(mean_all(square(a)), g1);
    backward(mean_all(square(a)), g2);
    g1.add(g2);
    const Tensor<D>* g = g1.find(a.get());
    REQUIRE(g != nullptr);
    for (int64_t i = 0; i < a->val.numel(); ++i)
        CHECK((*g)[i] == doctest::Approx(2.0 * 2.0 * a->val[i] / 8.0));
}

TEST_CASE("adam reduces a quadratic") {
    std::mt19937_64 rng(41);
    ParamRegistry<D> reg;
    auto p = reg.create("p", randt({4}, rng, 2.0, 3.0));
    Adam<D> opt(reg.items(), 0.1);
    for (int it = 0; it < 200; ++it) {
        Grads<D> gs;
        backward(mean_all(square(p)), gs);
        opt.step(gs);
    }
    for (int64_t i = 0; i < p->val.numel(); ++i) CHECK(std::abs(p->val[i]) < 0.05);
}
