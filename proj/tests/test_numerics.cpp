#include <doctest.h>

#include "qdm/autodiff.hpp"
#include "qdm/tensor.hpp"
#include "test_util.hpp"

using namespace qdm;

TEST_SUITE("numerics") {

TEST_CASE("max_pool identity at k=1") {
    auto x = test::random_image(2, 3, 4, 4, 1);
    CHECK(test::bit_equal(max_pool(x, 1), x));
}

TEST_CASE("max_pool 2x2 block") {
    auto x = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = max_pool(x, 2);
    CHECK(y.numel() == 1);
    CHECK(y[0] == 4.0f);
}

TEST_CASE("max_pool matches the nested-loop oracle") {
    auto x = test::random_image(1, 1, 8, 8, 2);
    auto y = max_pool(x, 4);
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j) {
            float m = -2.0f;
            for (int64_t di = 0; di < 4; ++di)
                for (int64_t dj = 0; dj < 4; ++dj) m = std::max(m, x.at(0, 0, 4 * i + di, 4 * j + dj));
            CHECK(y.at(0, 0, i, j) == m);
        }
}

TEST_CASE("max_pool dominates its block and attains it") {
    auto x = test::random_image(1, 2, 16, 16, 3);
    auto y = max_pool(x, 4);
    for (int64_t c = 0; c < 2; ++c)
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t j = 0; j < 4; ++j) {
                bool attained = false;
                for (int64_t di = 0; di < 4; ++di)
                    for (int64_t dj = 0; dj < 4; ++dj) {
                        CHECK(y.at(0, c, i, j) >= x.at(0, c, 4 * i + di, 4 * j + dj));
                        attained = attained || y.at(0, c, i, j) == x.at(0, c, 4 * i + di, 4 * j + dj);
                    }
                CHECK(attained);
            }
}

TEST_CASE("per-block range equals max_pool(x) + max_pool(-x), loop oracle") {
    for (uint64_t rep = 0; rep < 5; ++rep) {
        auto x = test::random_image(1, 1, 16, 16, 4, rep);
        Tensor neg = x;
        for (int64_t i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
        auto vp = max_pool(x, 4);
        auto vm = max_pool(neg, 4);
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t j = 0; j < 4; ++j) {
                float mx = -2.0f, mn = 2.0f;
                for (int64_t di = 0; di < 4; ++di)
                    for (int64_t dj = 0; dj < 4; ++dj) {
                        mx = std::max(mx, x.at(0, 0, 4 * i + di, 4 * j + dj));
                        mn = std::min(mn, x.at(0, 0, 4 * i + di, 4 * j + dj));
                    }
                CHECK(vp.at(0, 0, i, j) + vm.at(0, 0, i, j) == mx - mn);
            }
    }
}

TEST_CASE("max_pool rejects non-divisible input") {
    auto x = test::random_image(1, 1, 6, 8, 5);
    CHECK_THROWS_AS(max_pool(x, 4), DimensionError);
}

TEST_CASE("resize_nearest is the identity at equal size") {
    auto x = test::random_image(1, 2, 8, 8, 6);
    CHECK(test::bit_equal(resize_nearest(x, 8, 8), x));
}

TEST_CASE("resize_nearest from 1x1 fills with the constant") {
    auto x = Tensor::from_values({1, 1, 1, 1}, {0.37f});
    auto y = resize_nearest(x, 5, 3);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.37f);
}

TEST_CASE("resize_nearest 2x2 -> 4x4 replicates blocks per the index formula") {
    auto x = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = resize_nearest(x, 4, 4);
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 4; ++j) {
            const int64_t si = static_cast<int64_t>(std::floor((i + 0.5) * 2.0 / 4.0));
            const int64_t sj = static_cast<int64_t>(std::floor((j + 0.5) * 2.0 / 4.0));
            CHECK(y.at(0, 0, i, j) == x.at(0, 0, si, sj));
        }
}

TEST_CASE("grad_check on w^2 at w=3") {
    auto build = [](DTape& tape, std::vector<VarT<double>>& p) {
        (void)tape;
        return ad::mul(p[0], p[0]);
    };
    DTensor w({1}, 3.0);
    CHECK(grad_check<double>(build, {w}, 1e-4) < 1e-6);
}

TEST_CASE("gradient of a constant is exactly zero") {
    DTape tape;
    auto c = tape.constant(DTensor({3}, 2.0));
    auto w = tape.leaf(DTensor({3}, 1.5), true);
    auto loss = ad::sum_all(ad::add(w, c));
    tape.backward(loss);
    // constant contributes no gradient buffer; w sees exactly 1 per entry
    const auto& g = tape.grad(w);
    for (int64_t i = 0; i < 3; ++i) CHECK(g[i] == 1.0);
    CHECK_FALSE(tape.node(c.id).requires_grad);
}

TEST_CASE("gradients accumulate additively across fan-out") {
    DTape tape;
    auto w = tape.leaf(DTensor({1}, 0.7), true);
    auto loss = ad::sum_all(ad::add(w, w));
    tape.backward(loss);
    CHECK(tape.grad(w)[0] == 2.0);
}

TEST_CASE("two-layer network gradients match central differences") {
    auto build = [](DTape& tape, std::vector<VarT<double>>& p) {
        DTensor xin({4, 3});
        fill_uniform(xin, 21, Stream::generic, 0, -1.0, 1.0);
        auto x = tape.constant(xin);
        auto h = ad::gelu(ad::linear(x, p[0], p[1]));
        auto y = ad::linear(h, p[2], p[3]);
        DTensor target({4, 2});
        fill_uniform(target, 21, Stream::generic, 1, -1.0, 1.0);
        return ad::mse(y, tape.constant(target));
    };
    DTensor w1({3, 8}), b1({8}), w2({8, 2}), b2({2});
    fill_uniform(w1, 22, Stream::generic, 0, -0.6, 0.6);
    fill_uniform(b1, 22, Stream::generic, 1, -0.1, 0.1);
    fill_uniform(w2, 22, Stream::generic, 2, -0.6, 0.6);
    fill_uniform(b2, 22, Stream::generic, 3, -0.1, 0.1);
    CHECK(grad_check<double>(build, {w1, b1, w2, b2}, 1e-5) < 1e-4);
}

// every differentiable primitive against finite differences
TEST_CASE("primitive gradients") {
    auto check_unary = [](auto opfn, double span = 0.9) {
        auto build = [&](DTape& tape, std::vector<VarT<double>>& p) {
            DTensor probe({2, 3, 4});
            fill_uniform(probe, 31, Stream::generic, 77, -1.0, 1.0);
            return ad::mse(opfn(tape, p[0]), tape.constant(probe));
        };
        DTensor x({2, 3, 4});
        fill_uniform(x, 30, Stream::generic, 0, -span, span);
        return grad_check<double>(build, {x}, 1e-5);
    };

    CHECK(check_unary([](DTape&, VarT<double> v) { return ad::gelu(v); }) < 1e-6);
    CHECK(check_unary([](DTape&, VarT<double> v) { return ad::silu(v); }) < 1e-6);
    CHECK(check_unary([](DTape&, VarT<double> v) { return ad::softmax_last(v); }) < 1e-6);
    CHECK(check_unary([](DTape&, VarT<double> v) { return ad::layer_norm_last(v); }) < 1e-5);
    CHECK(check_unary([](DTape&, VarT<double> v) { return ad::transpose12(v); }) < 1e-6);
    CHECK(check_unary([](DTape&, VarT<double> v) { return ad::reshape(v, {6, 4}); }) < 1e-6);
    CHECK(check_unary([](DTape&, VarT<double> v) { return ad::split_heads(v, 2); }) < 1e-6);
    CHECK(check_unary([](DTape&, VarT<double> v) { return ad::merge_heads(v, 2); }) < 1e-6);
    CHECK(check_unary([](DTape&, VarT<double> v) { return ad::slice_last(v, 1, 2); }) < 1e-6);
    CHECK(check_unary([](DTape&, VarT<double> v) { return ad::affine(v, 1.7, -0.3); }) < 1e-6);
    CHECK(check_unary([](DTape&, VarT<double> v) { return ad::gather_rows(v, {1, 0, 1}); }) < 1e-6);
    CHECK(check_unary([](DTape&, VarT<double> v) {
        return ad::gather_flat(v, {5, 1, 2, 3, 0, 7, 11, 23, 9, 10, 2, 12}, {3, 4});
    }) < 1e-6);

    auto check_binary = [](auto opfn, Shape sa, Shape sb) {
        auto build = [&](DTape& tape, std::vector<VarT<double>>& p) {
            return ad::mean_all(opfn(tape, p[0], p[1]));
        };
        DTensor a(sa), b(sb);
        fill_uniform(a, 33, Stream::generic, 0, -0.8, 0.8);
        fill_uniform(b, 33, Stream::generic, 1, -0.8, 0.8);
        return grad_check<double>(build, {a, b}, 1e-5);
    };
    CHECK(check_binary([](DTape&, auto a, auto b) { return ad::add(a, b); }, {2, 3, 4}, {2, 3, 4}) < 1e-6);
    CHECK(check_binary([](DTape&, auto a, auto b) { return ad::sub(a, b); }, {2, 3, 4}, {2, 3, 4}) < 1e-6);
    CHECK(check_binary([](DTape&, auto a, auto b) { return ad::mul(a, b); }, {2, 3, 4}, {2, 3, 4}) < 1e-6);
    CHECK(check_binary([](DTape&, auto a, auto b) { return ad::add_bcast(a, b); }, {2, 3, 4}, {3, 4}) < 1e-6);
    CHECK(check_binary([](DTape&, auto a, auto b) { return ad::mul_rows(a, b); }, {2, 3, 4}, {2, 4}) < 1e-6);
    CHECK(check_binary([](DTape&, auto a, auto b) { return ad::add_rows(a, b); }, {2, 3, 4}, {2, 4}) < 1e-6);
    CHECK(check_binary([](DTape&, auto a, auto b) { return ad::bmm(a, b); }, {2, 3, 4}, {2, 4, 5}) < 1e-6);
    CHECK(check_binary([](DTape&, auto a, auto b) { return ad::linear_nobias(a, b); }, {2, 3, 4}, {4, 5}) < 1e-6);
    CHECK(check_binary([](DTape&, auto a, auto b) {
        return ad::overwrite_scatter(a, b, {1, 5, 9, 13, 17, 21});
    }, {24}, {6}) < 1e-6);

    auto build3 = [](DTape& tape, std::vector<VarT<double>>& p) {
        return ad::mean_all(ad::linear(p[0], p[1], p[2]));
    };
    DTensor x({3, 4}), w({4, 5}), b({5});
    fill_uniform(x, 34, Stream::generic, 0, -0.8, 0.8);
    fill_uniform(w, 34, Stream::generic, 1, -0.8, 0.8);
    fill_uniform(b, 34, Stream::generic, 2, -0.8, 0.8);
    CHECK(grad_check<double>(build3, {x, w, b}, 1e-5) < 1e-6);
}

TEST_CASE("grad_check rejects non-finite losses") {
    auto build = [](DTape& tape, std::vector<VarT<double>>& p) {
        (void)tape;
        auto huge = ad::affine(p[0], 1e308, 0.0);
        return ad::mul(huge, huge); // overflows to inf
    };
    DTensor w({1}, 1e10);
    CHECK_THROWS_AS(grad_check<double>(build, {w}, 1e-4), NumericError);
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor({1, 0, 2}), DimensionError);
    auto x = test::random_image(1, 1, 4, 4, 9);
    CHECK(x.all_finite());
    x[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(x.all_finite());
    CHECK_THROWS_AS(require_finite(x, "test"), NumericError);
}

} // TEST_SUITE
