#include <cmath>
#include <random>

#include "bioatt/autodiff.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bioatt;

namespace {

template <typename T>
Tensor<T> run_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    Tape<T> tape;
    return tape.value(conv2d(tape, tape.leaf(x), tape.leaf(w), tape.leaf(b)));
}

}  // namespace

TEST_CASE("conv2d identity kernel") {
    Tensor<float> x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<float> w({1, 1, 1, 1}, {1});
    Tensor<float> b({1}, {0});
    CHECK(run_conv(x, w, b) == x);
}

TEST_CASE("conv2d all-ones sum") {
    Tensor<float> x({1, 1, 3, 3}, 1.0f);
    Tensor<float> w({1, 1, 3, 3}, 1.0f);
    Tensor<float> b({1}, 0.0f);
    const auto out = run_conv(x, w, b);
    CHECK(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out[0] == 9.0f);
}

TEST_CASE("conv2d matches direct summation") {
    std::mt19937_64 rng(11);
    const auto x = oracle::random_tensor<float>({1, 2, 5, 5}, rng);
    const auto w = oracle::random_tensor<float>({3, 2, 3, 3}, rng);
    const auto b = oracle::random_tensor<float>({3}, rng);
    CHECK(max_abs_diff(run_conv(x, w, b), oracle::direct_conv2d(x, w, b)) <= 1e-6f);

    SUBCASE("same padding") {
        const auto w7 = oracle::random_tensor<double>({4, 2, 7, 7}, rng);
        const auto b7 = oracle::random_tensor<double>({4}, rng);
        const auto xd = oracle::random_tensor<double>({2, 2, 6, 9}, rng);
        const auto out = kernels::conv2d(xd, w7, b7, Padding::Same);
        CHECK(out.shape() == Shape{2, 4, 6, 9});
        CHECK(max_abs_diff(out, oracle::direct_conv2d(xd, w7, b7, 3)) <= 1e-12);
    }
}

TEST_CASE("conv2d errors") {
    Tensor<float> x({1, 2, 5, 5});
    Tensor<float> w({1, 3, 3, 3});
    Tensor<float> b({1});
    CHECK_THROWS_AS(kernels::conv2d(x, w, b, Padding::Valid), UsageError);
    Tensor<float> w_even({1, 2, 4, 4});
    CHECK_THROWS_AS(kernels::conv2d(x, w_even, b, Padding::Same), UsageError);
    Tape<float> tape;
    Tensor<float> w_ok({1, 2, 3, 3});
    CHECK_THROWS_AS(conv2d(tape, tape.leaf(x), tape.leaf(w_ok), tape.leaf(b), Padding::Valid, 2), UsageError);
}

TEST_CASE("conv_transpose2d single pixel spreads the kernel") {
    std::mt19937_64 rng(3);
    Tensor<float> x({1, 1, 1, 1}, 1.0f);
    const auto w = oracle::random_tensor<float>({1, 1, 5, 5}, rng);
    Tensor<float> b({1}, 0.0f);
    const auto out = kernels::conv_transpose2d(x, w, b);
    CHECK(out.shape() == Shape{1, 1, 5, 5});
    CHECK(out.storage() == w.storage());
}

TEST_CASE("conv then transposed conv restores extent 55") {
    Tensor<float> x({1, 1, 55, 55}, 0.5f);
    Tensor<float> w({4, 1, 5, 5}, 0.01f);
    Tensor<float> b({4}, 0.0f);
    const auto mid = kernels::conv2d(x, w, b, Padding::Valid);
    CHECK(mid.shape() == Shape{1, 4, 51, 51});
    Tensor<float> bt({1}, 0.0f);
    CHECK(kernels::conv_transpose2d(mid, w, bt).shape() == Shape{1, 1, 55, 55});
}

TEST_CASE("conv adjoint identity") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const auto x = oracle::random_tensor<double>({2, 3, 9, 8}, rng);
        const auto w = oracle::random_tensor<double>({4, 3, 3, 3}, rng);
        const auto y = oracle::random_tensor<double>({2, 4, 7, 6}, rng);
        const Tensor<double> zf({4}), zc({3});
        const double lhs = oracle::inner(kernels::conv2d(x, w, zf, Padding::Valid), y);
        const double rhs = oracle::inner(x, kernels::conv_transpose2d(y, w, zc));
        CHECK(std::abs(lhs - rhs) <= 1e-5 * std::max(1.0, std::abs(lhs)));
    }
}

TEST_CASE("pointwise ops") {
    Tape<double> tape;
    const auto r = tape.value(relu(tape, tape.leaf(Tensor<double>({3}, {-1, 0, 2}))));
    CHECK(r.storage() == std::vector<double>{0, 0, 2});
    CHECK(tape.value(sigmoid(tape, tape.leaf(Tensor<double>::scalar(0)))).item() == 0.5);

    const auto p = tape.value(softmax_1d(tape, tape.leaf(Tensor<double>({17}, 3.0))));
    for (double v : p.storage()) CHECK(v == doctest::Approx(1.0 / 17).epsilon(1e-12));

    Tensor<double> a({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
    Tensor<double> b({1, 3, 2, 1}, {1, 10, 100, 1000, 1e4, 1e5});
    const auto s = tape.value(add(tape, tape.leaf(a), tape.leaf(b)));
    CHECK(s.shape() == Shape{2, 3, 2, 1});
    CHECK(s.at(1, 2, 1, 0) == 6 + 1e5);
    CHECK_THROWS_AS(add(tape, tape.leaf(Tensor<double>({2, 3})), tape.leaf(Tensor<double>({3, 2}))), UsageError);
    CHECK_THROWS_AS(softmax_1d(tape, tape.leaf(Tensor<double>({0}))), UsageError);
}

TEST_CASE("softmax is positive and normalized for extreme inputs") {
    std::mt19937_64 rng(9);
    // Spreads stay below ~700 so exp() of the gap cannot underflow to zero.
    std::uniform_real_distribution<double> dist(-300, 300);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> s(1 + trial % 20);
        for (auto& v : s) v = dist(rng);
        const auto p = kernels::softmax<double>(s);
        double total = 0;
        for (double v : p) {
            CHECK(v > 0);
            total += v;
        }
        CHECK(std::abs(total - 1) <= 1e-9);
    }
}

TEST_CASE("channel_max routes the gradient to the first maximum") {
    Tape<double> tape;
    Var x = tape.leaf(Tensor<double>({1, 3, 1, 1}, {2, 5, 5}), true);
    tape.backward(sum(tape, channel_max(tape, x)));
    CHECK(tape.grad(x).storage() == std::vector<double>{0, 1, 0});
}

TEST_CASE("backward contract") {
    SUBCASE("sum gives ones") {
        Tape<double> tape;
        Var x = tape.leaf(Tensor<double>({2, 3, 4}, 0.3), true);
        tape.backward(sum(tape, x));
        const auto grad = tape.grad(x);
        for (double g : grad.storage()) CHECK(g == 1.0);
    }
    SUBCASE("mse of identical inputs gives zeros") {
        Tape<double> tape;
        Var x = tape.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}), true);
        tape.backward(mse_loss(tape, x, x));
        const auto grad = tape.grad(x);
        for (double g : grad.storage()) CHECK(g == 0.0);
    }
    SUBCASE("non-scalar and repeated backward are errors") {
        Tape<double> tape;
        Var x = tape.leaf(Tensor<double>({2}, {1, 2}), true);
        CHECK_THROWS_AS(tape.backward(relu(tape, x)), UsageError);
        Var loss = sum(tape, x);
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), UsageError);
    }
    SUBCASE("non-finite forward raises") {
        Tape<float> tape;
        Var x = tape.leaf(Tensor<float>({1}, {3e38f}));
        CHECK_THROWS_AS(scale(tape, x, 10.0f), InvariantError);
    }
}

TEST_CASE("finite differences over random shapes") {
    std::mt19937_64 rng(1234);
    std::uniform_int_distribution<std::size_t> small(1, 4), plane(3, 8);
    for (int trial = 0; trial < 12; ++trial) {
        const std::size_t B = small(rng), C = small(rng), H = plane(rng), W = plane(rng);
        auto x = oracle::random_tensor<double>({B, C, H, W}, rng);
        // Keep relu inputs and channel maxima away from kinks.
        for (auto& v : x.storage()) v = v < 0 ? v - 0.05 : v + 0.05;
        const auto target = oracle::random_tensor<double>({B, C, H, W}, rng);
        const auto gate = oracle::random_tensor<double>({B, 1, H, W}, rng);
        const std::size_t k = std::min<std::size_t>({3, H, W});
        const auto w = oracle::random_tensor<double>({2, C, k, k}, rng);
        const auto bias = oracle::random_tensor<double>({2}, rng);

        auto check = [&](const char* name, std::vector<Tensor<double>> inputs, auto build) {
            const auto r = oracle::gradient_check(std::move(inputs), build);
            INFO(name << " B=" << B << " C=" << C << " H=" << H << " W=" << W);
            CHECK(r.max_rel_err < 1e-4);
        };
        check("relu", {x}, [&](Tape<double>& t, const std::vector<Var>& v) {
            return mse_loss(t, relu(t, v[0]), t.leaf(target));
        });
        check("sigmoid*gate", {x, gate}, [&](Tape<double>& t, const std::vector<Var>& v) {
            return mse_loss(t, mul(t, sigmoid(t, v[0]), v[1]), t.leaf(target));
        });
        check("add broadcast", {x, gate}, [&](Tape<double>& t, const std::vector<Var>& v) {
            return mse_loss(t, add(t, v[0], v[1]), t.leaf(target));
        });
        check("channel pooling", {x}, [&](Tape<double>& t, const std::vector<Var>& v) {
            Var pooled = concat_channels(t, channel_mean(t, v[0]), channel_max(t, v[0]));
            return sum(t, mul(t, pooled, pooled));
        });
        check("axis sums", {x}, [&](Tape<double>& t, const std::vector<Var>& v) {
            Var s = sum_over_axis(t, v[0], 1);
            return sum(t, mul(t, s, spatial_mean(t, mul(t, s, s))));
        });
        check("conv2d", {x, w, bias}, [&](Tape<double>& t, const std::vector<Var>& v) {
            Var y = conv2d(t, v[0], v[1], v[2]);
            return sum(t, mul(t, y, y));
        });
        check("conv2d same", {x, oracle::random_tensor<double>({2, C, 3, 3}, rng), bias},
              [&](Tape<double>& t, const std::vector<Var>& v) {
                  Var y = conv2d(t, v[0], v[1], v[2], Padding::Same);
                  return sum(t, mul(t, y, y));
              });
        const auto wt = oracle::random_tensor<double>({C, 2, 3, 3}, rng);
        check("conv_transpose2d", {x, wt, bias}, [&](Tape<double>& t, const std::vector<Var>& v) {
            Var y = conv_transpose2d(t, v[0], v[1], v[2]);
            return sum(t, mul(t, y, y));
        });
        const auto scores = oracle::random_tensor<double>({C + 1}, rng);
        const auto weights = oracle::random_tensor<double>({C + 1}, rng);
        check("softmax", {scores}, [&](Tape<double>& t, const std::vector<Var>& v) {
            return sum(t, mul(t, softmax_1d(t, v[0]), t.leaf(weights)));
        });
    }
}

TEST_CASE("batch helpers") {
    Tensor<float> t({3, 2}, {1, 2, 3, 4, 5, 6});
    const auto mid = batch_slice(t, 1, 3);
    CHECK(mid.storage() == std::vector<float>{3, 4, 5, 6});
    const std::vector<Tensor<float>> parts{batch_slice(t, 0, 1), mid};
    CHECK(batch_concat<float>(parts) == t);
}
