#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "mudaf/errors.hpp"
#include "mudaf/rng.hpp"
#include "mudaf/selection.hpp"

using namespace mudaf;

namespace {

HeadScoreTable table_of(const std::vector<double>& f1, std::size_t n_heads) {
    HeadScoreTable t;
    t.n_heads = n_heads;
    t.n_layers = f1.size() / n_heads;
    std::vector<std::size_t> order(f1.size());
    for (std::size_t i = 0; i < f1.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return f1[a] > f1[b]; });
    t.rows.resize(f1.size());
    for (std::size_t i = 0; i < f1.size(); ++i) t.rows[i] = {{i / n_heads, i % n_heads}, f1[i], 0.0, 0};
    for (std::size_t r = 0; r < order.size(); ++r) t.rows[order[r]].rank = r + 1;
    return t;
}

}  // namespace

TEST_CASE("selection distribution examples") {
    auto eq = selection_distribution(table_of({0.3, 0.3, 0.3, 0.3}, 4), 0.05);
    for (double p : eq) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

    auto two = selection_distribution(table_of({0.8, 0.3}, 2), 0.05);
    const double e = std::exp(-10.0);
    CHECK(two[0] == doctest::Approx(1.0 / (1.0 + e)).epsilon(1e-12));
    CHECK(two[1] == doctest::Approx(e / (1.0 + e)).epsilon(1e-9));

    auto hot = selection_distribution(table_of({0.9, 0.1, 0.5}, 3), 1e6);
    for (double p : hot) CHECK(std::abs(p - 1.0 / 3.0) <= 1e-6);
}

TEST_CASE("selection distribution is positive and normalized") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> f(32);
        for (auto& x : f) x = rng.uniform();
        auto p = selection_distribution(table_of(f, 8), 0.05);
        double total = 0;
        for (double x : p) {
            CHECK(x > 0.0);
            total += x;
        }
        CHECK(std::abs(total - 1.0) <= 1e-9);
    }
}

TEST_CASE("sample_heads contracts") {
    Rng rng(8);
    std::vector<double> f(32);
    for (auto& x : f) x = rng.uniform();
    auto t = table_of(f, 8);

    SelectionConfig c;
    c.k = 8;
    c.seed = 5;
    auto a = sample_heads(t, c);
    CHECK(a.size() == 8);
    CHECK(std::set<HeadId>(a.begin(), a.end()).size() == 8);
    CHECK(sample_heads(t, c) == a);

    c.k = 32;
    auto all = sample_heads(t, c);
    CHECK(std::set<HeadId>(all.begin(), all.end()).size() == 32);

    c.k = 33;
    try {
        sample_heads(t, c);
        FAIL("expected config error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
    }

    SelectionConfig g;
    g.mode = SelectionMode::greedy;
    g.k = 4;
    CHECK(sample_heads(t, g) == t.top_k(4));
}

TEST_CASE("a dominant head is drawn first almost always") {
    std::vector<double> f(16, 0.1);
    f[11] = 0.9;
    auto t = table_of(f, 4);
    SelectionConfig c;
    c.temperature = 0.001;
    c.k = 1;
    int hits = 0;
    for (int s = 0; s < 10000; ++s) {
        c.seed = derive_seed(1, 2, s);
        hits += sample_heads(t, c)[0] == HeadId{2, 3};
    }
    CHECK(hits / 10000.0 > 0.999);
}

TEST_CASE("argmax of the distribution does not depend on temperature") {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> f(12);
        for (auto& x : f) x = rng.uniform();
        auto t = table_of(f, 4);
        const auto raw = std::max_element(f.begin(), f.end()) - f.begin();
        for (double tau : {1e-3, 0.05, 1.0, 100.0}) {
            auto p = selection_distribution(t, tau);
            CHECK(std::max_element(p.begin(), p.end()) - p.begin() == raw);
        }
    }
}

TEST_CASE("weak heads") {
    std::vector<double> f{0.05, 0.5, 0.02, 0.9, 0.0, 0.3};
    auto t = table_of(f, 3);
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto w = weak_heads(t, 3, s);
        std::set<HeadId> got(w.begin(), w.end());
        CHECK(got == std::set<HeadId>{{0, 0}, {0, 2}, {1, 1}});
    }
    auto two = weak_heads(t, 2, 4);
    for (const auto& h : two) CHECK(t.at(h).f1 < kWeakHeadBound);
    try {
        weak_heads(t, 4, 0);
        FAIL("expected selection error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::selection);
    }

    std::vector<double> zeros(8, 0.0);
    auto tz = table_of(zeros, 4);
    std::vector<int> freq(8, 0);
    for (std::uint64_t s = 0; s < 4000; ++s) ++freq[weak_heads(tz, 1, s)[0].layer * 4 + weak_heads(tz, 1, s)[0].head];
    for (int c : freq) CHECK(std::abs(c / 4000.0 - 0.125) < 0.03);
}

TEST_CASE("head list JSON round-trip") {
    std::vector<HeadId> h{{1, 2}, {0, 7}, {3, 3}};
    CHECK(heads_from_json(heads_to_json(h)) == h);
    CHECK_THROWS_AS(heads_from_json(nlohmann::json::parse(R"([{"layer":0,"head":1},{"layer":0,"head":1}])")), Error);
}
