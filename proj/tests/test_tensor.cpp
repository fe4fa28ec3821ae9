#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "vg/rng.hpp"
#include "vg/tensor.hpp"

using vg::Tape;
using vg::Tensor;

namespace {

std::vector<double> random_values(std::size_t n, vg::Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// Reference product, deliberately the naive triple loop.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, int m,
                                 int k, int n) {
    std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p)
                c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

// Analytic gradient of `build`'s scalar output w.r.t. x, checked against
// central differences. `build` must reconstruct the graph from x's current
// values on each call.
template <typename BuildFn>
double check_grad(Tensor<double>& x, BuildFn build, double h = 1e-4) {
    Tape<double> tape;
    auto loss = build(tape);
    x.zero_grad();
    tape.backward(loss);
    auto analytic = x.grad();
    auto f = [&]() {
        Tape<double> t;
        t.set_grad_enabled(false);
        return build(t).item();
    };
    return vg::finite_difference_check(f, x, analytic, h);
}

}  // namespace

TEST_CASE("matmul identity and zero") {
    vg::Rng rng(1);
    auto a = Tensor<double>::leaf({3, 4}, random_values(12, rng));
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    auto I = Tensor<double>::leaf({4, 4}, eye);
    auto z = Tensor<double>::zeros({4, 2});

    Tape<double> tp;
    auto ai = vg::matmul(tp, a, I);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(ai.value(i) == a.value(i));

    auto az = vg::matmul(tp, a, z);
    for (std::size_t i = 0; i < az.size(); ++i) CHECK(az.value(i) == 0.0);
}

TEST_CASE("matmul matches the naive triple-loop reference") {
    vg::Rng rng(7);
    auto av = random_values(12, rng);
    auto bv = random_values(8, rng);
    auto expected = naive_matmul(av, bv, 3, 4, 2);

    Tape<double> tp;
    auto c = vg::matmul(tp, Tensor<double>::leaf({3, 4}, av), Tensor<double>::leaf({4, 2}, bv));
    REQUIRE(c.shape() == vg::Shape{3, 2});
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(c.value(i) == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = Tensor<double>::zeros({3, 4});
    auto b = Tensor<double>::zeros({5, 2});
    Tape<double> tp;
    CHECK_THROWS_WITH_AS(vg::matmul(tp, a, b), doctest::Contains("[3x4]"), vg::DimError);
    try {
        vg::matmul(tp, a, b);
    } catch (const vg::DimError& e) {
        CHECK(std::string(e.what()).find("[5x2]") != std::string::npos);
    }
}

TEST_CASE("relu and sigmoid point values") {
    Tape<double> tp;
    auto x = Tensor<double>::leaf({3}, {-1.0, 0.0, 2.0});
    auto y = vg::relu(tp, x);
    CHECK(y.value(0) == 0.0);
    CHECK(y.value(1) == 0.0);
    CHECK(y.value(2) == 2.0);

    auto s = vg::sigmoid(tp, Tensor<double>::scalar(0.0));
    CHECK(s.item() == 0.5);
}

TEST_CASE("exp gradient at x=1 equals e") {
    auto x = Tensor<double>::leaf({1}, {1.0}, true);
    const double err = check_grad(x, [&](Tape<double>& tp) { return vg::sum(tp, vg::exp_(tp, x)); }, 1e-6);
    CHECK(err <= 1e-6);

    Tape<double> tp;
    auto loss = vg::sum(tp, vg::exp_(tp, x));
    x.zero_grad();
    tp.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(std::exp(1.0)).epsilon(1e-12));
}

TEST_CASE("elementwise rejects non-broadcastable shapes") {
    Tape<double> tp;
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({3, 2});
    CHECK_THROWS_AS(vg::add(tp, a, b), vg::DimError);
}

TEST_CASE("softmax point values and stability") {
    Tape<double> tp;
    auto u = vg::softmax(tp, Tensor<double>::leaf({2}, {0.0, 0.0}));
    CHECK(u.value(0) == doctest::Approx(0.5));
    CHECK(u.value(1) == doctest::Approx(0.5));

    auto f = vg::softmax(tp, Tensor<double>::leaf({2}, {0.0, std::log(3.0)}));
    CHECK(f.value(0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(f.value(1) == doctest::Approx(0.75).epsilon(1e-12));

    auto big = vg::softmax(tp, Tensor<double>::leaf({2}, {1000.0, 1000.0}));
    CHECK(big.value(0) == 0.5);
    CHECK(big.value(1) == 0.5);
}

TEST_CASE("softmax slices sum to one for large-magnitude inputs") {
    vg::Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        auto x = Tensor<double>::leaf({4, 6}, random_values(24, rng, -1e4, 1e4));
        Tape<double> tp;
        auto y = vg::softmax(tp, x, -1);
        for (int r = 0; r < 4; ++r) {
            double s = 0;
            for (int c = 0; c < 6; ++c) s += y.value(r * 6 + c);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
        // strict positivity at spreads exp() can represent
        auto m = Tensor<double>::leaf({4, 6}, random_values(24, rng, -300.0, 300.0));
        auto ym = vg::softmax(tp, m, -1);
        for (std::size_t i = 0; i < ym.size(); ++i) CHECK(ym.value(i) > 0.0);
    }
}

TEST_CASE("layer_norm point values") {
    auto gamma = Tensor<double>::leaf({4}, {1.0, 1.0, 1.0, 1.0});
    auto beta = Tensor<double>::zeros({4});
    Tape<double> tp;

    auto c = vg::layer_norm(tp, Tensor<double>::leaf({1, 4}, {2.5, 2.5, 2.5, 2.5}), gamma, beta);
    for (int i = 0; i < 4; ++i) CHECK(c.value(i) == 0.0);

    auto g2 = Tensor<double>::leaf({2}, {1.0, 1.0});
    auto b2 = Tensor<double>::zeros({2});
    auto y = vg::layer_norm(tp, Tensor<double>::leaf({1, 2}, {1.0, -1.0}), g2, b2);
    CHECK(y.value(0) == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(y.value(1) == doctest::Approx(-1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm gradients match finite differences") {
    vg::Rng rng(11);
    auto x = Tensor<double>::leaf({4, 8}, random_values(32, rng), true);
    auto gamma = Tensor<double>::leaf({8}, random_values(8, rng, 0.5, 1.5), true);
    auto beta = Tensor<double>::leaf({8}, random_values(8, rng), true);
    auto w = Tensor<double>::leaf({4, 8}, random_values(32, rng));

    auto build = [&](Tape<double>& tp) {
        return vg::sum(tp, vg::mul(tp, vg::layer_norm(tp, x, gamma, beta), w));
    };
    CHECK(check_grad(x, build) <= 1e-4);
    CHECK(check_grad(gamma, build) <= 1e-4);
    CHECK(check_grad(beta, build) <= 1e-4);
}

TEST_CASE("l2_normalize point values and zero guard") {
    Tape<double> tp;
    auto y = vg::l2_normalize(tp, Tensor<double>::leaf({2}, {3.0, 4.0}));
    CHECK(y.value(0) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(y.value(1) == doctest::Approx(0.8).epsilon(1e-12));

    auto z = vg::l2_normalize(tp, Tensor<double>::zeros({3}));
    for (int i = 0; i < 3; ++i) CHECK(z.value(i) == 0.0);
}

TEST_CASE("l2_normalize gradient matches finite differences") {
    vg::Rng rng(13);
    auto x = Tensor<double>::leaf({8}, random_values(8, rng, 0.2, 1.0), true);
    auto w = Tensor<double>::leaf({8}, random_values(8, rng));
    const double err = check_grad(x, [&](Tape<double>& tp) {
        return vg::sum(tp, vg::mul(tp, vg::l2_normalize(tp, x), w));
    });
    CHECK(err <= 1e-4);
}

TEST_CASE("backward of x squared at x=3") {
    auto x = Tensor<double>::leaf({1}, {3.0}, true);
    Tape<double> tp;
    auto loss = vg::mul(tp, x, x);
    tp.backward(loss);
    CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("leaf disconnected from the loss keeps zero gradient") {
    auto x = Tensor<double>::leaf({1}, {3.0}, true);
    auto other = Tensor<double>::leaf({1}, {2.0}, true);
    Tape<double> tp;
    auto loss = vg::mul(tp, x, x);
    tp.backward(loss);
    CHECK(other.grad()[0] == 0.0);
}

TEST_CASE("backward rejects non-scalar and off-tape losses") {
    auto x = Tensor<double>::leaf({2}, {1.0, 2.0}, true);
    Tape<double> tp;
    auto y = vg::scale(tp, x, 2.0);
    CHECK_THROWS_AS(tp.backward(y), vg::ContractError);
    Tape<double> other;
    auto z = vg::sum(other, x);
    CHECK_THROWS_AS(tp.backward(z), vg::ContractError);
}

TEST_CASE("two backward passes accumulate exactly twice the gradient") {
    vg::Rng rng(5);
    auto x = Tensor<double>::leaf({3, 3}, random_values(9, rng), true);
    auto w = Tensor<double>::leaf({3, 3}, random_values(9, rng));
    Tape<double> tp;
    auto loss = vg::sum(tp, vg::mul(tp, vg::softmax(tp, vg::matmul(tp, x, x), -1), w));
    tp.backward(loss);
    const auto once = x.grad();
    tp.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(x.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("composite softmax(matmul) loss gradient matches finite differences") {
    vg::Rng rng(17);
    auto x = Tensor<double>::leaf({3, 4}, random_values(12, rng), true);
    auto b = Tensor<double>::leaf({4, 3}, random_values(12, rng));
    auto w = Tensor<double>::leaf({3, 3}, random_values(9, rng));
    const double err = check_grad(x, [&](Tape<double>& tp) {
        return vg::sum(tp, vg::mul(tp, vg::softmax(tp, vg::matmul(tp, x, b), -1), w));
    });
    CHECK(err <= 1e-4);
}

TEST_CASE("finite_difference_check on a linear function is near exact") {
    vg::Rng rng(19);
    auto x = Tensor<double>::leaf({6}, random_values(6, rng), true);
    auto w = Tensor<double>::leaf({6}, random_values(6, rng));
    const double err = check_grad(x, [&](Tape<double>& tp) { return vg::sum(tp, vg::mul(tp, x, w)); });
    CHECK(err <= 1e-9);
}

TEST_CASE("finite_difference_check on sum of squares") {
    vg::Rng rng(23);
    auto x = Tensor<double>::leaf({5}, random_values(5, rng, 0.5, 2.0), true);
    const double err = check_grad(x, [&](Tape<double>& tp) { return vg::sum(tp, vg::mul(tp, x, x)); });
    CHECK(err <= 1e-6);
}

TEST_CASE("every differentiable op passes a finite-difference check on 5 seeds") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        vg::Rng rng(100 + seed);
        // inputs kept away from relu/abs/min/max kinks
        auto x = Tensor<double>::leaf({4, 6}, random_values(24, rng, 0.2, 1.5), true);
        auto y = Tensor<double>::leaf({4, 6}, random_values(24, rng, 2.0, 3.0));
        auto w = Tensor<double>::leaf({4, 6}, random_values(24, rng));
        auto s1 = Tensor<double>::leaf({1}, {rng.uniform(0.5, 1.5)});
        auto wv = Tensor<double>::leaf({4}, random_values(4, rng));

        auto weighted = [&](Tape<double>& tp, const Tensor<double>& t) {
            return vg::sum(tp, vg::mul(tp, t, w));
        };

        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::add(tp, x, y)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::sub(tp, x, y)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::mul(tp, x, y)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::div(tp, x, y)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::minimum(tp, x, y)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::maximum(tp, x, y)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::mul(tp, x, s1)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::scale(tp, x, 1.7)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::add_scalar(tp, x, 0.3)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::relu(tp, x)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::sigmoid(tp, x)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::exp_(tp, x)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::abs_(tp, x)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::clamp_min(tp, x, 0.9)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::softmax(tp, x, -1)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return weighted(tp, vg::l2_normalize(tp, x, -1)); }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) {
            return vg::sum(tp, vg::mul(tp, vg::rowwise_dot(tp, x, y), wv));
        }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) {
            auto sv = vg::rowwise_dot(tp, x, y);  // [4]
            return weighted(tp, vg::scale_rows(tp, x, sv));
        }) <= 1e-4);
        CHECK(check_grad(x, [&](Tape<double>& tp) { return vg::select(tp, x, 5); }) <= 1e-4);

        auto a34 = Tensor<double>::leaf({3, 4}, random_values(12, rng), true);
        auto b45 = Tensor<double>::leaf({4, 5}, random_values(20, rng));
        auto w35 = Tensor<double>::leaf({3, 5}, random_values(15, rng));
        CHECK(check_grad(a34, [&](Tape<double>& tp) {
            return vg::sum(tp, vg::mul(tp, vg::matmul(tp, a34, b45), w35));
        }) <= 1e-4);
        auto b54 = Tensor<double>::leaf({5, 4}, random_values(20, rng), true);
        CHECK(check_grad(b54, [&](Tape<double>& tp) {
            return vg::sum(tp, vg::mul(tp, vg::matmul_nt(tp, a34, b54), w35));
        }) <= 1e-4);
        auto a43 = Tensor<double>::leaf({4, 3}, random_values(12, rng), true);
        CHECK(check_grad(a43, [&](Tape<double>& tp) {
            return vg::sum(tp, vg::mul(tp, vg::matmul_tn(tp, a43, b45), w35));
        }) <= 1e-4);

        auto p = Tensor<double>::leaf({2, 3, 4}, random_values(24, rng), true);
        auto q = Tensor<double>::leaf({2, 4, 3}, random_values(24, rng));
        auto wq = Tensor<double>::leaf({2, 3, 3}, random_values(18, rng));
        CHECK(check_grad(p, [&](Tape<double>& tp) {
            return vg::sum(tp, vg::mul(tp, vg::bmm(tp, p, q), wq));
        }) <= 1e-4);
        auto q2 = Tensor<double>::leaf({2, 3, 4}, random_values(24, rng), true);
        CHECK(check_grad(q2, [&](Tape<double>& tp) {
            return vg::sum(tp, vg::mul(tp, vg::bmm_nt(tp, p, q2), wq));
        }) <= 1e-4);

        auto table = Tensor<double>::leaf({5, 3}, random_values(15, rng), true);
        auto wg = Tensor<double>::leaf({4, 3}, random_values(12, rng));
        CHECK(check_grad(table, [&](Tape<double>& tp) {
            return vg::sum(tp, vg::mul(tp, vg::gather_rows(tp, table, {0, 2, 2, 4}), wg));
        }) <= 1e-4);
    }
}

TEST_CASE("ops are deterministic across repeated execution") {
    vg::Rng rng(29);
    auto x = Tensor<double>::leaf({8, 8}, random_values(64, rng), true);
    auto w = Tensor<double>::leaf({8, 8}, random_values(64, rng));
    auto run = [&] {
        Tape<double> tp;
        auto loss = vg::sum(tp, vg::mul(tp, vg::softmax(tp, vg::matmul(tp, x, w), -1), w));
        x.zero_grad();
        tp.backward(loss);
        auto g = x.grad();
        g.push_back(loss.item());
        return g;
    };
    const auto first = run();
    const auto second = run();
    CHECK(first == second);
}

TEST_CASE("cleared tape releases recorded steps") {
    auto x = Tensor<double>::leaf({2}, {1.0, 2.0}, true);
    Tape<double> tp;
    auto loss = vg::sum(tp, vg::mul(tp, x, x));
    CHECK(tp.num_steps() > 0);
    tp.clear();
    CHECK(tp.num_steps() == 0);
    (void)loss;
}

TEST_CASE("gradient accumulation across tapes is additive") {
    auto x = Tensor<double>::leaf({1}, {2.0}, true);
    for (int pass = 0; pass < 2; ++pass) {
        Tape<double> tp;
        auto loss = vg::mul(tp, x, x);
        tp.backward(loss);
    }
    CHECK(x.grad()[0] == 8.0);  // two passes, d(x^2)/dx = 4 each
}
