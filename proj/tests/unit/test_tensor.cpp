#include <doctest.h>

#include <cmath>
#include <limits>

#include "lcc/gradcheck.hpp"
#include "lcc/tensor.hpp"

using namespace lcc;

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();

// triple-loop reference product at extended precision
std::vector<double> matmul_oracle(const Tensor& a, const Tensor& b) {
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            long double acc = 0.0L;
            for (int p = 0; p < k; ++p)
                acc += static_cast<long double>(a.at2(i, p)) * b.at2(p, j);
            c[static_cast<size_t>(i) * n + j] = static_cast<double>(acc);
        }
    return c;
}
} // namespace

TEST_CASE("matmul 1x1") {
    Tensor a = Tensor::from({1, 1}, {2.0});
    Tensor b = Tensor::from({1, 1}, {3.0});
    CHECK(matmul(a, b).item() == 6.0);
}

TEST_CASE("matmul by identity") {
    RngState rng(1);
    Tensor a = Tensor::randn({4, 4}, rng, 1.0);
    Tensor eye = Tensor::zeros({4, 4});
    for (int i = 0; i < 4; ++i) eye.at2(i, i) = 1.0;
    Tensor out = matmul(a, eye);
    for (int64_t i = 0; i < a.size(); ++i) CHECK(out.at(i) == a.at(i));
}

TEST_CASE("matmul matches triple-loop oracle") {
    RngState rng(2);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0);
    Tensor b = Tensor::randn({4, 2}, rng, 1.0);
    Tensor c = matmul(a, b);
    const auto ref = matmul_oracle(a, b);
    for (int64_t i = 0; i < c.size(); ++i)
        CHECK(std::abs(c.at(i) - ref[static_cast<size_t>(i)]) < 1e-12);
}

TEST_CASE("matmul dimension error names both shapes") {
    Tensor a = Tensor::zeros({3, 4});
    Tensor b = Tensor::zeros({5, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("3 x 4") != std::string::npos);
        CHECK(msg.find("5 x 2") != std::string::npos);
    }
}

TEST_CASE("linear equals x times w transpose") {
    RngState rng(3);
    Tensor x = Tensor::randn({5, 3}, rng, 1.0);
    Tensor w = Tensor::randn({4, 3}, rng, 1.0);
    Tensor ref = matmul(x, transpose(w));
    Tensor out = linear(x, w);
    for (int64_t i = 0; i < out.size(); ++i) CHECK(out.at(i) == doctest::Approx(ref.at(i)).epsilon(1e-14));
}

TEST_CASE("softmax uniform row") {
    Tensor x = Tensor::from({3}, {0.0, 0.0, 0.0});
    Tensor y = softmax_rows(x);
    for (int i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("softmax shift invariance") {
    RngState rng(4);
    Tensor x = Tensor::randn({2, 6}, rng, 2.0);
    Tensor shifted = Tensor::zeros({2, 6});
    for (int64_t i = 0; i < x.size(); ++i) shifted.at(i) = x.at(i) + 7.25;
    Tensor a = softmax_rows(x);
    Tensor b = softmax_rows(shifted);
    for (int64_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.at(i) - b.at(i)) < 1e-12);
}

TEST_CASE("softmax matches extended-precision exp-normalize") {
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    Tensor y = softmax_rows(x);
    const long double e1 = expl(1.0L), e2 = expl(2.0L);
    CHECK(std::abs(y.at(0) - static_cast<double>(e1 / (e1 + e2))) < 1e-12);
    CHECK(std::abs(y.at(1) - static_cast<double>(e2 / (e1 + e2))) < 1e-12);
}

TEST_CASE("softmax -inf sentinel maps to exact zero") {
    Tensor x = Tensor::from({4}, {0.5, -kInf, 1.5, -kInf});
    Tensor y = softmax_rows(x);
    CHECK(y.at(1) == 0.0);
    CHECK(y.at(3) == 0.0);
    CHECK(y.at(0) + y.at(2) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax all -inf row raises MaskError") {
    Tensor x = Tensor::from({2, 2}, {1.0, 2.0, -kInf, -kInf});
    CHECK_THROWS_AS(softmax_rows(x), MaskError);
}

TEST_CASE("softmax rows sum to one even on f32-narrowed data") {
    RngState rng(5);
    Tensor x = Tensor::randn({8, 16}, rng, 3.0);
    for (double& v : x.data()) v = static_cast<double>(static_cast<float>(v));
    Tensor y = softmax_rows(x);
    for (int r = 0; r < 8; ++r) {
        double s = 0.0;
        for (int c = 0; c < 16; ++c) s += y.at2(r, c);
        CHECK(std::abs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("kl of identical distributions is zero") {
    RngState rng(6);
    Tensor q = Tensor::randn({3, 5}, rng, 1.5);
    Tensor p = softmax_rows(q);
    const double v = kl_divergence(p, q).item();
    CHECK(v <= 1e-12);
    CHECK(v >= -1e-12);
}

TEST_CASE("kl closed form ln 2") {
    Tensor p = Tensor::from({1, 2}, {1.0, 0.0});
    Tensor q = Tensor::from({1, 2}, {0.0, 0.0});
    CHECK(kl_divergence(p, q).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("kl matches direct-sum oracle") {
    RngState rng(7);
    Tensor p = softmax_rows(Tensor::randn({4, 6}, rng, 1.0));
    Tensor q = Tensor::randn({4, 6}, rng, 1.0);
    long double total = 0.0L;
    for (int r = 0; r < 4; ++r) {
        long double z = 0.0L;
        for (int c = 0; c < 6; ++c) z += expl(static_cast<long double>(q.at2(r, c)));
        const long double logz = logl(z);
        for (int c = 0; c < 6; ++c) {
            const long double pi = p.at2(r, c);
            if (pi > 0) total += pi * (logl(pi) - (static_cast<long double>(q.at2(r, c)) - logz));
        }
    }
    CHECK(std::abs(kl_divergence(p, q).item() - static_cast<double>(total / 4)) < 1e-10);
}

TEST_CASE("kl rejects rows that do not sum to one") {
    Tensor p = Tensor::from({1, 2}, {0.7, 0.2});
    Tensor q = Tensor::zeros({1, 2});
    CHECK_THROWS_AS(kl_divergence(p, q), DistributionError);
}

TEST_CASE("kl nonnegative and zero only at the matching distribution") {
    RngState rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor q = Tensor::randn({2, 5}, rng, 1.0);
        Tensor p = softmax_rows(Tensor::randn({2, 5}, rng, 1.0));
        const double v = kl_divergence(p, q).item();
        CHECK(v >= -1e-12);
    }
    Tensor q = Tensor::from({1, 3}, {0.3, -0.1, 0.8});
    Tensor p_wrong = Tensor::from({1, 3}, {0.5, 0.25, 0.25});
    CHECK(kl_divergence(p_wrong, q).item() > 1e-3);
}

TEST_CASE("grad_check on sum is near exact") {
    RngState rng(9);
    Tensor x = Tensor::randn({3, 3}, rng, 1.0, true);
    CHECK(grad_check([](const Tensor& t) { return sum(t); }, x, 1e-5) <= 1e-10);
}

TEST_CASE("grad_check quadratic closed form") {
    Tensor x = Tensor::from({3}, {1.0, 2.0, 3.0}, true);
    Tensor y = sum(mul(x, x));
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
    x.zero_grad();
    CHECK(grad_check([](const Tensor& t) { return sum(mul(t, t)); }, x, 1e-5) <= 1e-7);
}

TEST_CASE("grad_check eps outside range is rejected") {
    Tensor x = Tensor::from({1}, {1.0}, true);
    CHECK_THROWS_AS(grad_check([](const Tensor& t) { return sum(t); }, x, 1e-2), Error);
}

TEST_CASE("grad_check rejects non-finite objective") {
    Tensor x = Tensor::from({1}, {1.0}, true);
    CHECK_THROWS_AS(grad_check([](const Tensor& t) { return scale(t, kInf); }, x, 1e-5),
                    EvalError);
}

TEST_CASE("every kernel passes grad_check at 1e-4") {
    RngState rng(10);
    const double tol = 1e-4;
    const double eps = 1e-5;

    Tensor b = Tensor::randn({4, 3}, rng, 1.0);
    CHECK(grad_check([&](const Tensor& t) { return sum(matmul(t, b)); },
                     Tensor::randn({2, 4}, rng, 1.0, true), eps) <= tol);
    Tensor a2 = Tensor::randn({2, 4}, rng, 1.0);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(matmul(a2, t), matmul(a2, t))); },
                     Tensor::randn({4, 3}, rng, 1.0, true), eps) <= tol);
    Tensor w = Tensor::randn({3, 4}, rng, 1.0);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(linear(t, w), linear(t, w))); },
                     Tensor::randn({2, 4}, rng, 1.0, true), eps) <= tol);
    CHECK(grad_check([](const Tensor& t) { return sum(mul(transpose(t), transpose(t))); },
                     Tensor::randn({3, 2}, rng, 1.0, true), eps) <= tol);
    Tensor other = Tensor::randn({2, 3}, rng, 1.0);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(add(t, other), add(t, other))); },
                     Tensor::randn({2, 3}, rng, 1.0, true), eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(t, other)); },
                     Tensor::randn({2, 3}, rng, 1.0, true), eps) <= tol);
    CHECK(grad_check([](const Tensor& t) { return sum(scale(t, -2.5)); },
                     Tensor::randn({2, 3}, rng, 1.0, true), eps) <= tol);
    CHECK(grad_check([](const Tensor& t) { return sum(mul(row_scale(t, {0.5, -1.5}), t)); },
                     Tensor::randn({2, 3}, rng, 1.0, true), eps) <= tol);
    CHECK(grad_check([](const Tensor& t) { return sum(silu(t)); },
                     Tensor::randn({2, 5}, rng, 1.0, true), eps) <= tol);
    CHECK(grad_check([](const Tensor& t) { return sum(mul(softmax_rows(t), t)); },
                     Tensor::randn({3, 5}, rng, 1.0, true), eps) <= tol);
    Tensor p = softmax_rows(Tensor::randn({3, 5}, rng, 1.0));
    CHECK(grad_check([&](const Tensor& t) { return kl_divergence(p, t); },
                     Tensor::randn({3, 5}, rng, 1.0, true), eps) <= tol);
    Tensor target = Tensor::randn({3, 4}, rng, 1.0);
    CHECK(grad_check([&](const Tensor& t) { return mse_loss(target, t); },
                     Tensor::randn({3, 4}, rng, 1.0, true), eps) <= tol);
    const std::vector<int> ys = {2, 0, 5};
    CHECK(grad_check([&](const Tensor& t) { return cross_entropy(t, ys); },
                     Tensor::randn({3, 6}, rng, 1.0, true), eps) <= tol);
    Tensor gain = Tensor::randn({6}, rng, 1.0);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(rms_norm(t, gain), t)); },
                     Tensor::randn({3, 6}, rng, 1.0, true), eps) <= tol);
    Tensor xs = Tensor::randn({3, 6}, rng, 1.0);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(rms_norm(xs, t), xs)); },
                     Tensor::randn({6}, rng, 1.0, true), eps) <= tol);
    const std::vector<int> ids = {1, 3, 1, 0};
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(embedding_rows(t, ids), embedding_rows(t, ids))); },
                     Tensor::randn({4, 3}, rng, 1.0, true), eps) <= tol);
    const std::vector<int> pos = {0, 4, 9};
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(rotary(t, pos, 2, 4, 500.0), t)); },
                     Tensor::randn({3, 8}, rng, 1.0, true), eps) <= tol);
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(rotary(t, pos, 2, 4, 500.0, 2), t)); },
                     Tensor::randn({3, 8}, rng, 1.0, true), eps) <= tol);
    CHECK(grad_check([](const Tensor& t) { return sum(mul(slice_rows(t, 1, 3), slice_rows(t, 1, 3))); },
                     Tensor::randn({4, 3}, rng, 1.0, true), eps) <= tol);
    CHECK(grad_check([](const Tensor& t) { return sum(mul(slice_cols(t, 1, 3), slice_cols(t, 1, 3))); },
                     Tensor::randn({3, 4}, rng, 1.0, true), eps) <= tol);
    const std::vector<int> rows = {2, 0, 2};
    CHECK(grad_check([&](const Tensor& t) { return sum(mul(gather_rows(t, rows), gather_rows(t, rows))); },
                     Tensor::randn({3, 3}, rng, 1.0, true), eps) <= tol);
    Tensor part = Tensor::randn({2, 3}, rng, 1.0);
    CHECK(grad_check([&](const Tensor& t) {
                         Tensor cat = concat_rows({t, part});
                         return sum(mul(cat, cat));
                     },
                     Tensor::randn({2, 3}, rng, 1.0, true), eps) <= tol);
    Tensor part2 = Tensor::randn({2, 2}, rng, 1.0);
    CHECK(grad_check([&](const Tensor& t) {
                         Tensor cat = concat_cols({t, part2});
                         return sum(mul(cat, cat));
                     },
                     Tensor::randn({2, 3}, rng, 1.0, true), eps) <= tol);
}

TEST_CASE("gradient accumulation is additive over backward passes") {
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor y = sum(mul(x, x));
    y.backward();
    const double g0 = x.grad()[0];
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(2.0 * g0));

    // a node consumed twice in one graph also sums contributions
    x.zero_grad();
    Tensor z = add(sum(x), sum(x));
    z.backward();
    CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("rng replays identical sequences from identical state") {
    RngState a(42, 0), b(42, 0);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(a.counter == b.counter);

    RngState c(42, 50);
    RngState d(42, 0);
    for (int i = 0; i < 50; ++i) d.next_u64();
    CHECK(c.next_u64() == d.next_u64());

    RngState e(42, 0);
    for (int i = 0; i < 10; ++i) CHECK(std::isfinite(e.next_normal()));
    RngState f(42, 0);
    RngState g = f.derive(7);
    (void)g.next_u64();
    CHECK(f.counter == 0); // child streams never advance the parent
}

TEST_CASE("argmax ties break toward the lowest index") {
    const std::vector<double> row = {1.0, 3.0, 3.0, 2.0};
    CHECK(argmax_lowest(row) == 1);
}
