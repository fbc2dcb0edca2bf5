#include <cmath>
#include <limits>

#include "doctest.h"
#include "mudaf/errors.hpp"
#include "mudaf/gradcheck.hpp"
#include "mudaf/ops.hpp"
#include "mudaf/rng.hpp"
#include "test_util.hpp"

using namespace mudaf;
using testutil::random_tensor;

TEST_CASE("matmul hand cases") {
    auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    CHECK(matmul(eye, a).to_vector() == a.to_vector());

    auto b = Tensor::from_data({2, 1}, {0, 1});
    auto c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 1});
    CHECK(c.to_vector() == std::vector<double>{2, 4});
}

TEST_CASE("matmul rejects mismatched inner extents") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(matmul(a, b), Error);
    try {
        matmul(a, b);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::dimension);
    }
}

TEST_CASE("gradient of sum(A x B) wrt A is the row-broadcast of B's row sums") {
    Rng rng(3);
    auto a = random_tensor({3, 4}, rng, true);
    auto b = random_tensor({4, 5}, rng);
    sum(matmul(a, b)).backward();
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            double expect = 0;
            for (std::size_t j = 0; j < 5; ++j) expect += b.at(k, j);
            CHECK(a.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("softmax examples") {
    auto s = softmax(Tensor::from_data({3}, {0, 0, 0}));
    for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    auto big = softmax(Tensor::from_data({2}, {1000, 0}));
    CHECK(big.all_finite());
    CHECK(big.at(0) == doctest::Approx(1.0));
    CHECK(big.at(1) < 1e-300);

    auto nan = Tensor::from_data({2}, {std::numeric_limits<double>::quiet_NaN(), 0});
    try {
        softmax(nan);
        FAIL("expected numeric error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::numeric);
    }
}

TEST_CASE("softmax rows sum to one and stay inside (0,1)") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = random_tensor({4, 6}, rng, false, 5.0);
        auto p = softmax(x);
        for (std::size_t r = 0; r < 4; ++r) {
            double total = 0;
            for (std::size_t c = 0; c < 6; ++c) {
                double v = p.at(r, c);
                CHECK(v > 0.0);
                CHECK(v < 1.0);
                total += v;
            }
            CHECK(std::abs(total - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("softmax along axis 0") {
    auto x = Tensor::from_data({2, 2}, {0, 1, 0, 3});
    auto p = softmax(x, 0);
    CHECK(p.at(0, 0) == doctest::Approx(0.5));
    CHECK(p.at(0, 1) + p.at(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("cross entropy examples") {
    auto uniform = Tensor::zeros({1, 4});
    std::vector<TokenId> t{2};
    CHECK(cross_entropy_masked(uniform, t, {true}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));

    auto confident = Tensor::from_data({1, 3}, {0, 200, 0});
    std::vector<TokenId> t1{1};
    CHECK(cross_entropy_masked(confident, t1, {true}).item() < 1e-80);
}

TEST_CASE("cross entropy matches a scalar log-softmax oracle on a random 5x7 case") {
    Rng rng(5);
    auto logits = random_tensor({5, 7}, rng, false, 3.0);
    std::vector<TokenId> targets{0, 6, 3, 3, 1};
    std::vector<bool> mask{true, false, true, true, false};
    double total = 0;
    int n = 0;
    for (std::size_t r = 0; r < 5; ++r) {
        if (!mask[r]) continue;
        double m = -1e300;
        for (std::size_t c = 0; c < 7; ++c) m = std::max(m, logits.at(r, c));
        double z = 0;
        for (std::size_t c = 0; c < 7; ++c) z += std::exp(logits.at(r, c) - m);
        total += -(logits.at(r, targets[r]) - m - std::log(z));
        ++n;
    }
    CHECK(cross_entropy_masked(logits, targets, mask).item() == doctest::Approx(total / n).epsilon(1e-12));
}

TEST_CASE("cross entropy errors") {
    auto logits = Tensor::zeros({2, 3});
    std::vector<TokenId> t{0, 1};
    try {
        cross_entropy_masked(logits, t, {false, false});
        FAIL("expected empty-loss error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::empty_loss);
    }
    std::vector<TokenId> bad{0, 3};
    CHECK_THROWS_AS(cross_entropy_masked(logits, bad, {true, true}), Error);
}

TEST_CASE("cross entropy is invariant to a constant shift of one position's logits") {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        auto logits = random_tensor({3, 5}, rng, false, 2.0);
        auto shifted = logits.to_vector();
        double c = rng.normal() * 50.0;
        for (std::size_t j = 5; j < 10; ++j) shifted[j] += c;
        std::vector<TokenId> t{1, 4, 0};
        std::vector<bool> m{true, true, true};
        double a = cross_entropy_masked(logits, t, m).item();
        double b = cross_entropy_masked(Tensor::from_data({3, 5}, shifted), t, m).item();
        CHECK(std::abs(a - b) <= 1e-8);
    }
}

TEST_CASE("cosine similarity examples") {
    Rng rng(2);
    auto u = random_tensor({6}, rng);
    CHECK(cosine_similarity(u, u).item() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(cosine_similarity(scale(u, -1.0), u).item() == doctest::Approx(-1.0).epsilon(1e-14));
    CHECK(cosine_similarity(Tensor::from_data({2}, {1, 0}), Tensor::from_data({2}, {0, 1})).item() == 0.0);
    try {
        cosine_similarity(Tensor::zeros({2}), u.detach());
        FAIL("expected degenerate-input error");
    } catch (const Error& e) {
        CHECK((e.kind() == ErrorKind::degenerate_input || e.kind() == ErrorKind::dimension));
    }
    try {
        cosine_similarity(Tensor::zeros({3}), Tensor::from_data({3}, {1, 2, 3}));
        FAIL("expected degenerate-input error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::degenerate_input);
    }
}

TEST_CASE("backward basics") {
    auto x = Tensor::from_data({3}, {1, -2, 5}, true);
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);

    auto y = Tensor::scalar(3.0, true);
    mul(y, y).backward();
    CHECK(y.grad()[0] == 6.0);

    SUBCASE("repeated backward accumulates") {
        auto z = Tensor::from_data({2}, {1, 2}, true);
        sum(scale(z, 2.0)).backward();
        sum(scale(z, 2.0)).backward();
        CHECK(z.grad()[0] == 4.0);
    }
    SUBCASE("non-scalar root is a usage error") {
        auto z = Tensor::from_data({2}, {1, 2}, true);
        try {
            scale(z, 2.0).backward();
            FAIL("expected usage error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::usage);
        }
    }
}

TEST_CASE("no-grad guard suppresses tape recording") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y;
    {
        NoGradGuard guard;
        y = scale(x, 3.0);
    }
    CHECK_FALSE(y.requires_grad());
    CHECK(grad_mode_enabled());
}

TEST_CASE("check_gradients is at rounding level on a linear map") {
    Rng rng(4);
    auto w = random_tensor({4}, rng, true);
    auto c = random_tensor({4}, rng);
    auto r = check_gradients([&] { return sum(mul(w, c)); }, {w});
    CHECK(r.max_relative_error < 1e-8);
}

TEST_CASE("check_gradients passes on a softmax cross-entropy composite") {
    Rng rng(6);
    auto w = random_tensor({3, 5}, rng, true);
    auto x = random_tensor({4, 3}, rng);
    std::vector<TokenId> t{0, 4, 2, 1};
    auto r = check_gradients([&] { return cross_entropy_masked(matmul(x, w), t, {true, true, false, true}); }, {w});
    CHECK(r.max_relative_error <= 1e-4);
}

TEST_CASE("check_gradients detects a corrupted backward rule") {
    auto broken_square = [](const Tensor& a) {
        std::vector<double> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * a.at(i);
        std::vector<double> saved = a.to_vector();
        return record_op("broken_square", a.shape(), out, {a},
                         [saved](std::span<const double> g, std::span<const std::span<double>> in) {
                             if (in[0].empty()) return;
                             for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += 3.0 * saved[i] * g[i];
                         });
    };
    Rng rng(9);
    auto x = random_tensor({5}, rng, true);
    auto r = check_gradients([&] { return sum(broken_square(x)); }, {x});
    CHECK(r.max_relative_error > 1e-2);
}

TEST_CASE("every primitive passes the gradient oracle on random shapes") {
    Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 2 + rng.below(4);
        auto a = random_tensor({m, k}, rng, true);
        auto b = random_tensor({k, n}, rng, true);
        auto c = random_tensor({m, n}, rng, true);
        auto g = random_tensor({n}, rng, true, 0.5);
        auto weights = random_tensor({m, n}, rng);
        auto weighted = [&](const Tensor& t) { return sum(mul(t, weights)); };
        CAPTURE(trial);
        CHECK(check_gradients([&] { return weighted(matmul(a, b)); }, {a, b}).max_relative_error <= 1e-4);
        CHECK(check_gradients([&] { return weighted(add(c, c)); }, {c}).max_relative_error <= 1e-4);
        CHECK(check_gradients([&] { return weighted(mul(c, c)); }, {c}).max_relative_error <= 1e-4);
        CHECK(check_gradients([&] { return weighted(silu(c)); }, {c}).max_relative_error <= 1e-4);
        CHECK(check_gradients([&] { return weighted(softmax(c)); }, {c}).max_relative_error <= 1e-4);
        CHECK(check_gradients([&] { return sum(mul(softmax(c, 0), weights)); }, {c}).max_relative_error <= 1e-4);
        CHECK(check_gradients([&] { return weighted(rms_norm(c, g, 1e-5)); }, {c, g}).max_relative_error <= 1e-4);
        CHECK(check_gradients([&] { return sum(mul(row(c, m - 1), g)); }, {c, g}).max_relative_error <= 1e-4);
        CHECK(check_gradients([&] { return sum(mul(mean_rows(c, 0, m), g)); }, {c}).max_relative_error <= 1e-4);
        CHECK(check_gradients([&] { return cosine_similarity(row(c, 0), g); }, {c, g}).max_relative_error <= 1e-4);
        CHECK(check_gradients([&] { return sum(mul(slice_cols(c, 1, n - 1), slice_cols(weights, 0, n - 1))); }, {c})
                  .max_relative_error <= 1e-4);
        auto gw = concat({g.detach(), random_tensor({n}, rng)});
        CHECK(check_gradients([&] { return sum(mul(concat({g, g}), gw)); }, {g})
                  .max_relative_error <= 1e-4);
        CHECK(check_gradients([&] { return weighted(reshape(reshape(c, {m * n}), {m, n})); }, {c}).max_relative_error <= 1e-4);

        std::vector<TokenId> ids;
        for (std::size_t i = 0; i < m; ++i) ids.push_back(static_cast<TokenId>(rng.below(k)));
        auto table = random_tensor({k, n}, rng, true);
        CHECK(check_gradients([&] { return weighted(embedding(table, ids)); }, {table}).max_relative_error <= 1e-4);

        std::vector<TokenId> targets;
        for (std::size_t i = 0; i < m; ++i) targets.push_back(static_cast<TokenId>(rng.below(n)));
        std::vector<bool> mask(m, true);
        CHECK(check_gradients([&] { return cross_entropy_masked(c, targets, mask); }, {c}).max_relative_error <= 1e-4);

        const std::size_t dh = 4, heads = 2;
        auto rq = random_tensor({m + 1, heads * dh}, rng, true);
        auto rw = random_tensor({m + 1, heads * dh}, rng);
        CHECK(check_gradients([&] { return sum(mul(rope(rq, dh, 10000.0), rw)); }, {rq}).max_relative_error <= 1e-4);

        const std::size_t T = 2 + rng.below(4);
        auto q = random_tensor({T, 4 * dh}, rng, true);
        auto kk = random_tensor({T, 2 * dh}, rng, true);
        auto v = random_tensor({T, 2 * dh}, rng, true);
        auto ow = random_tensor({T, 4 * dh}, rng);
        AttentionGeometry geo{4, 2, dh};
        CHECK(check_gradients([&] { return sum(mul(causal_attention(q, kk, v, geo).context, ow)); }, {q, kk, v})
                  .max_relative_error <= 1e-4);
    }
}

TEST_CASE("backward is bit-reproducible") {
    auto run = [] {
        Rng rng(77);
        auto a = random_tensor({4, 6}, rng, true);
        auto b = random_tensor({6, 3}, rng, true);
        std::vector<TokenId> t{0, 2, 1, 1};
        cross_entropy_masked(matmul(silu(a), b), t, {true, true, true, true}).backward();
        auto ga = std::vector<double>(a.grad().begin(), a.grad().end());
        ga.insert(ga.end(), b.grad().begin(), b.grad().end());
        return ga;
    };
    CHECK(run() == run());
}

TEST_CASE("tensor validity check") {
    CHECK(Tensor::from_data({2}, {1, 2}).all_finite());
    CHECK_FALSE(Tensor::from_data({2}, {1, std::numeric_limits<double>::infinity()}).all_finite());
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), Error);
}
