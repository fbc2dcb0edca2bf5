#include <cmath>

#include "doctest.h"
#include "mudaf/checkpoint.hpp"
#include "mudaf/errors.hpp"
#include "mudaf/hashing.hpp"
#include "mudaf/model.hpp"
#include "mudaf/ops.hpp"
#include "test_util.hpp"

using namespace mudaf;

namespace {

ModelConfig small_config(std::size_t kv = 2) {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 4;
    c.n_kv_heads = kv;
    c.d_model = 16;
    c.d_head = 4;
    c.vocab_size = 11;
    c.max_seq_len = 32;
    c.init_std = 0.3;
    return c;
}

std::vector<TokenId> tokens(std::size_t n, std::uint64_t seed = 1) {
    Rng rng(seed);
    std::vector<TokenId> t(n);
    for (auto& x : t) x = static_cast<TokenId>(rng.below(11));
    return t;
}

// Replaces one parameter's values, keeping everything else.
Model with_param(const Model& m, const std::string& name, const std::function<void(std::span<double>, const Shape&)>& edit) {
    auto params = m.clone().parameters();
    for (auto& p : params)
        if (p.name == name) {
            auto data = p.tensor.to_vector();
            edit(data, p.tensor.shape());
            p.tensor = Tensor::from_data(p.tensor.shape(), data, true);
        }
    return Model(m.config(), params);
}

}  // namespace

TEST_CASE("config invariants") {
    auto c = small_config();
    CHECK_NOTHROW(c.validate());
    c.n_kv_heads = 3;
    CHECK_THROWS_AS(c.validate(), Error);
    c = small_config();
    c.d_head = 5;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("kv groups") {
    ModelConfig c = small_config(4);
    for (std::size_t h = 0; h < 4; ++h) CHECK(kv_group_of({0, h}, c) == h);
    ModelConfig g;
    g.n_heads = 8;
    g.n_kv_heads = 2;
    for (std::size_t h = 0; h < 8; ++h) CHECK(kv_group_of({1, h}, g) == (h < 4 ? 0u : 1u));
}

TEST_CASE("head ids") {
    auto c = small_config();
    CHECK(head_index({1, 2}, c) == 6);
    CHECK(head_from_index(6, c) == HeadId{1, 2});
    CHECK(all_heads(c).size() == 8);
    CHECK(HeadId{2, 5}.label() == "2-5");
}

TEST_CASE("forward errors") {
    Model m(small_config(), 3);
    std::vector<TokenId> bad{1, 2, 11};
    try {
        m.forward(bad);
        FAIL("expected input error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::input);
    }
    ForwardOptions o;
    o.traces.push_back({{2, 0}, 1});
    try {
        m.forward(tokens(4), o);
        FAIL("expected usage error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::usage);
    }
    auto too_long = tokens(33);
    CHECK_THROWS_AS(m.forward(too_long), Error);
}

TEST_CASE("tracing and empty masks leave logits bit-identical") {
    Model m(small_config(), 3);
    auto t = tokens(9);
    auto plain = m.forward(t).logits.to_vector();
    ForwardOptions o;
    for (const auto& h : all_heads(m.config())) o.traces.push_back({h, 8});
    auto traced = m.forward(t, o);
    CHECK(traced.logits.to_vector() == plain);
    CHECK(m.forward(t).logits.to_vector() == plain);
}

TEST_CASE("trace invariants") {
    Model m(small_config(), 5);
    auto t = tokens(10);
    ForwardOptions o;
    for (const auto& h : all_heads(m.config())) o.traces.push_back({h, 6});
    auto r = m.forward(t, o);
    REQUIRE(r.traces.size() == 8);
    for (const auto& tr : r.traces) {
        CHECK(tr.attn_row.size() == 10);
        double total = 0;
        for (std::size_t j = 0; j < tr.attn_row.size(); ++j) {
            if (j > 6) CHECK(tr.attn_row[j] == 0.0);
            total += tr.attn_row[j];
        }
        CHECK(std::abs(total - 1.0) <= 1e-6);
        CHECK(tr.key_count() == 7);
        // Re-derive the row from q and k.
        std::vector<double> s(7);
        double mx = -1e300;
        for (std::size_t j = 0; j < 7; ++j) {
            double d = 0;
            for (std::size_t i = 0; i < 4; ++i) d += tr.q_proj[i] * tr.key(j)[i];
            s[j] = d / 2.0;
            mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < 7; ++j) CHECK(std::abs(s[j] / z - tr.attn_row[j]) <= 1e-6);
    }
    // Heads of one KV group see identical keys.
    CHECK(r.traces[0].k_projs == r.traces[1].k_projs);
    CHECK(r.traces[2].k_projs == r.traces[3].k_projs);
    CHECK(r.traces[0].k_projs != r.traces[2].k_projs);
}

TEST_CASE("single token attends to itself") {
    Model m(small_config(), 5);
    ForwardOptions o;
    o.traces.push_back({{1, 3}, 0});
    auto r = m.forward(tokens(1), o);
    CHECK(r.traces[0].attn_row == std::vector<double>{1.0});
}

TEST_CASE("attention head hand case") {
    // 3 tokens, one head of width 2; q for the last token is [1, 0].
    auto q = Tensor::from_data({3, 2}, {0, 0, 0, 0, 1, 0});
    auto k = Tensor::from_data({3, 2}, {1, 0, 0, 1, 2, 0});
    auto v = Tensor::from_data({3, 2}, {1, 0, 0, 1, 3, 3});
    auto out = causal_attention(q, k, v, {1, 1, 2});
    const double s = std::sqrt(2.0);
    const double e0 = std::exp(1.0 / s), e1 = 1.0, e2 = std::exp(2.0 / s), z = e0 + e1 + e2;
    CHECK(out.probs->at(0, 2, 0) == doctest::Approx(e0 / z).epsilon(1e-12));
    CHECK(out.probs->at(0, 2, 1) == doctest::Approx(e1 / z).epsilon(1e-12));
    CHECK(out.probs->at(0, 2, 2) == doctest::Approx(e2 / z).epsilon(1e-12));
    CHECK(out.context.at(2, 0) == doctest::Approx((e0 + 3 * e2) / z).epsilon(1e-12));
    // Row 0 sees only itself; identical keys give uniform rows.
    CHECK(out.probs->at(0, 0, 0) == 1.0);
    CHECK(out.probs->at(0, 0, 1) == 0.0);
    auto same = causal_attention(q, Tensor::from_data({3, 2}, {1, 1, 1, 1, 1, 1}), v, {1, 1, 2});
    for (std::size_t j = 0; j < 3; ++j) CHECK(same.probs->at(0, 2, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("causality: later tokens never change earlier logits") {
    Model m(small_config(), 9);
    auto a = tokens(8, 1);
    auto b = a;
    b[6] = (b[6] + 1) % 11;
    b[7] = (b[7] + 3) % 11;
    auto la = m.forward(a).logits, lb = m.forward(b).logits;
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t v = 0; v < 11; ++v) CHECK(la.at(t, v) == lb.at(t, v));
}

TEST_CASE("masking a head with zero output weights changes nothing") {
    Model m(small_config(), 2);
    // Zero the rows of layer-0 wo fed by head 1 (context columns 4..7).
    auto z = with_param(m, "layers.0.wo", [](std::span<double> d, const Shape& s) {
        for (std::size_t r = 4; r < 8; ++r)
            for (std::size_t c = 0; c < s[1]; ++c) d[r * s[1] + c] = 0.0;
    });
    auto t = tokens(7);
    ForwardOptions o;
    o.masked_heads = {{0, 1}};
    CHECK(z.forward(t, o).logits.to_vector() == z.forward(t).logits.to_vector());
    CHECK(m.forward(t, o).logits.to_vector() != m.forward(t).logits.to_vector());
}

TEST_CASE("masking every head equals the attention-free path") {
    Model m(small_config(), 4);
    auto t = tokens(6);
    ForwardOptions all;
    for (const auto& h : all_heads(m.config())) all.masked_heads.insert(h);
    ForwardOptions skip;
    skip.skip_attention = true;
    auto a = m.forward(t, all).logits.to_vector(), b = m.forward(t, skip).logits.to_vector();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("forward is deterministic") {
    Model a(small_config(), 21), b(small_config(), 21);
    auto t = tokens(12);
    CHECK(a.forward(t).logits.to_vector() == b.forward(t).logits.to_vector());
}

TEST_CASE("checkpoint round-trip is bit-exact at storage precision") {
    testutil::TempDir dir("ckpt");
    Model m(small_config(), 6);
    auto ck = make_checkpoint(m, 17, "{\"draws\":3}");
    save_checkpoint(ck, dir.path() / "c");
    auto back = load_checkpoint(dir.path() / "c");
    CHECK(back.step == 17);
    CHECK(back.rng_state == ck.rng_state);
    CHECK(back.config == ck.config);
    auto rounded = round_to_storage_precision(m);
    for (std::size_t i = 0; i < back.weights.size(); ++i) {
        CHECK(back.weights[i].name == rounded.parameters()[i].name);
        CHECK(back.weights[i].tensor.to_vector() == rounded.parameters()[i].tensor.to_vector());
    }
    // Saving the reloaded checkpoint reproduces the same bytes.
    save_checkpoint(back, dir.path() / "d");
    CHECK(sha256_file(dir.path() / "c" / "weights.bin") == sha256_file(dir.path() / "d" / "weights.bin"));
    CHECK(sha256_file(dir.path() / "c" / "manifest.json") == sha256_file(dir.path() / "d" / "manifest.json"));

    SUBCASE("a corrupted blob is rejected") {
        auto blob = read_file(dir.path() / "c" / "weights.bin");
        blob[10] ^= 0x40;
        write_file_atomic(dir.path() / "c" / "weights.bin", blob);
        CHECK_THROWS_AS(load_checkpoint(dir.path() / "c"), Error);
    }
}

TEST_CASE("initialization scale") {
    ModelConfig c;
    c.vocab_size = 50;
    Model m(c, 1);
    auto sd = [](const Tensor& t) {
        double s = 0;
        for (double x : t.data()) s += x * x;
        return std::sqrt(s / t.numel());
    };
    CHECK(sd(m.parameter("layers.0.wq")) == doctest::Approx(0.02).epsilon(0.05));
    CHECK(sd(m.parameter("layers.0.wo")) == doctest::Approx(0.02 / std::sqrt(8.0)).epsilon(0.05));
    for (double g : m.parameter("layers.0.attn_norm").data()) CHECK(g == 1.0);
}
