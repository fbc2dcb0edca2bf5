#include <cmath>

#include "doctest.h"
#include "mudaf/checkpoint.hpp"
#include "mudaf/contrastive.hpp"
#include "mudaf/corpus.hpp"
#include "mudaf/errors.hpp"
#include "mudaf/gradcheck.hpp"
#include "mudaf/ops.hpp"
#include "mudaf/qa_eval.hpp"
#include "mudaf/trainer.hpp"
#include "test_util.hpp"

using namespace mudaf;
using testutil::random_tensor;

namespace {

CorpusConfig micro_corpus() {
    CorpusConfig c;
    c.n_passages = 3;
    c.n_entities = 12;
    c.attributes = {"city", "pet"};
    c.max_seq_len = 64;
    return c;
}

ModelConfig micro_model(const Corpus& corpus) {
    ModelConfig m;
    m.n_layers = 2;
    m.n_heads = 4;
    m.n_kv_heads = 2;
    m.d_model = 16;
    m.d_head = 4;
    m.vocab_size = corpus.vocab().size();
    m.max_seq_len = 64;
    m.init_std = 0.3;
    return m;
}

HeadFeatures single(const Tensor& q, std::vector<Tensor> keys) {
    HeadFeatures f;
    f.queries.push_back(q);
    f.keys.push_back(std::move(keys));
    return f;
}

}  // namespace

TEST_CASE("pooled passage keys") {
    AttentionTrace t;
    t.d_head = 2;
    t.query_token_index = 5;
    t.k_projs = {1, 0, 0, 1, 3, 3, 3, 3, 3, 3, 9, 9};
    PromptLayout L;
    L.tokens.assign(6, 0);
    L.passage_spans = {{0, 2}, {2, 5}};
    auto pooled = pooled_passage_keys(t, L);
    CHECK(pooled[0] == std::vector<double>{0.5, 0.5});
    CHECK(pooled[1] == std::vector<double>{3, 3});

    L.passage_spans = {{2, 2}};
    try {
        pooled_passage_keys(t, L);
        FAIL("expected usage error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::usage);
    }
}

TEST_CASE("pooled keys match a loop-summed mean") {
    Rng rng(3);
    AttentionTrace t;
    t.d_head = 4;
    t.query_token_index = 9;
    for (int i = 0; i < 40; ++i) t.k_projs.push_back(rng.normal());
    PromptLayout L;
    L.tokens.assign(10, 0);
    L.passage_spans = {{3, 8}};
    auto pooled = pooled_passage_keys(t, L)[0];
    for (std::size_t d = 0; d < 4; ++d) {
        double s = 0;
        for (std::size_t i = 3; i < 8; ++i) s += t.k_projs[i * 4 + d];
        CHECK(std::abs(pooled[d] - s / 5) <= 1e-12);
    }
}

TEST_CASE("head feature concatenation") {
    ContrastiveBatch b;
    b.heads = {{0, 1}, {1, 0}};
    b.queries = {Tensor::from_data({2}, {1, 2}), Tensor::from_data({2}, {3, 4})};
    b.keys = {{Tensor::from_data({2}, {5, 6}), Tensor::from_data({2}, {7, 8})},
              {Tensor::from_data({2}, {9, 10}), Tensor::from_data({2}, {11, 12})}};
    auto cat = concat_head_features(b, SimilarityMode::concatenated);
    REQUIRE(cat.queries.size() == 1);
    CHECK(cat.queries[0].to_vector() == std::vector<double>{1, 2, 3, 4});
    CHECK(cat.keys[0][1].to_vector() == std::vector<double>{7, 8, 11, 12});
    auto per = concat_head_features(b, SimilarityMode::per_head);
    CHECK(per.queries.size() == 2);

    ContrastiveBatch one;
    one.heads = {{0, 0}};
    one.queries = {b.queries[0]};
    one.keys = {b.keys[0]};
    auto c1 = concat_head_features(one, SimilarityMode::concatenated);
    CHECK(c1.queries[0].to_vector() == b.queries[0].to_vector());
    CHECK(c1.keys[0][0].to_vector() == b.keys[0][0].to_vector());
}

TEST_CASE("contrastive loss values") {
    for (std::size_t n = 2; n <= 16; ++n) {
        auto sims = Tensor::full({n}, 0.3);
        CHECK(std::abs(info_nce(sims, 0, 0.05).item() - std::log(double(n))) <= 1e-9);
    }
    auto sims = Tensor::from_data({3}, {0.9, 0.1, 0.1});
    const double expect = -std::log(std::exp(18.0) / (std::exp(18.0) + 2 * std::exp(2.0)));
    CHECK(info_nce(sims, 0, 0.05).item() == doctest::Approx(expect).epsilon(1e-6));
    CHECK(expect == doctest::Approx(2.25e-7).epsilon(0.01));
}

TEST_CASE("per-head loss with identical heads is a multiple of the single-head loss") {
    Rng rng(2);
    auto q = random_tensor({4}, rng);
    std::vector<Tensor> keys{random_tensor({4}, rng), random_tensor({4}, rng), random_tensor({4}, rng)};
    const double one = contrastive_loss(single(q, keys), 1, 0.1).item();
    HeadFeatures three;
    for (int i = 0; i < 3; ++i) {
        three.queries.push_back(q);
        three.keys.push_back(keys);
    }
    CHECK(contrastive_loss(three, 1, 0.1).item() == doctest::Approx(3 * one).epsilon(1e-12));
}

TEST_CASE("contrastive loss properties") {
    Rng rng(10);
    for (int trial = 0; trial < 50; ++trial) {
        auto q = random_tensor({6}, rng);
        std::vector<Tensor> keys;
        for (int p = 0; p < 5; ++p) keys.push_back(random_tensor({6}, rng));
        const std::size_t g = rng.below(5);
        const double base = contrastive_loss(single(q, keys), g, 0.05).item();
        CHECK(base >= 0.0);
        auto scaled = keys;
        scaled[(g + 1) % 5] = scale(keys[(g + 1) % 5], 7.5);
        CHECK(std::abs(contrastive_loss(single(scale(q, 0.3), scaled), g, 0.05).item() - base) <= 1e-8);

        auto s = random_tensor({5}, rng, true, 0.5);
        info_nce(s, g, 0.05).backward();
        for (std::size_t j = 0; j < 5; ++j) {
            if (j == g)
                CHECK(s.grad()[j] < 0.0);
            else
                CHECK(s.grad()[j] > 0.0);
        }
    }
    try {
        contrastive_loss(single(Tensor::zeros({3}), {Tensor::full({3}, 1.0), Tensor::full({3}, 2.0)}), 0, 0.05);
        FAIL("expected degenerate-input error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::degenerate_input);
    }
}

TEST_CASE("total loss") {
    CHECK(total_loss(2.0, 0.5, 1.0).total == 2.5);
    CHECK(total_loss(2.0, 0.5, 0.0).total == 2.0);
    CHECK(total_loss(1.25, 3.0, 0.1, 7).step == 7);
    CHECK_THROWS_AS(total_loss(std::nan(""), 0.5, 1.0), Error);
}

TEST_CASE("train config JSON round-trip and validation") {
    TrainConfig c;
    c.target_heads = {{1, 2}, {0, 3}};
    c.similarity_mode = SimilarityMode::per_head;
    c.lambda = 0.5;
    nlohmann::json j = c;
    CHECK(j.get<TrainConfig>() == c);
    c.target_heads = {{1, 2}, {1, 2}};
    CHECK_THROWS_AS(c.validate(), Error);
    TrainConfig neg;
    neg.lambda = -1;
    CHECK_THROWS_AS(neg.validate(), Error);
    auto bad = nlohmann::json(TrainConfig{});
    bad["no_such_key"] = 1;
    CHECK_THROWS_AS(bad.get<TrainConfig>(), Error);
    CHECK(kFinetuneLearningRate == 5e-6);
    CHECK(kFinetuneBeta1 == 0.9);
    CHECK(kFinetuneBeta2 == 0.999);
}

TEST_CASE("learning rate schedule") {
    TrainConfig c;
    c.learning_rate = 1e-3;
    c.steps = 100;
    c.warmup_steps = 10;
    c.min_lr_fraction = 0.1;
    CHECK(learning_rate_at(c, 0) == doctest::Approx(1e-4));
    CHECK(learning_rate_at(c, 9) == doctest::Approx(1e-3));
    CHECK(learning_rate_at(c, 99) >= 1e-4 - 1e-15);
    c.schedule = LrSchedule::constant;
    c.warmup_steps = 0;
    CHECK(learning_rate_at(c, 50) == 1e-3);
}

TEST_CASE("joint loss gradient passes the finite-difference oracle on a micro-model") {
    Corpus corpus(micro_corpus());
    Model model(micro_model(corpus), 11);
    auto sample = corpus.generate_sample(4);
    TrainConfig c;
    c.tau_con = 0.5;
    c.target_heads = {{0, 1}, {1, 2}, {1, 3}};
    std::vector<Tensor> params;
    for (const auto& p : model.parameters()) params.push_back(p.tensor);
    auto r = check_gradients([&] { return joint_loss(sample_loss(model, sample, c), c.lambda); }, params);
    CHECK(r.max_relative_error <= 1e-4);
}

TEST_CASE("backward through the joint loss reaches LM weights and target Q/K") {
    Corpus corpus(micro_corpus());
    Model model(micro_model(corpus), 12);
    TrainConfig c;
    c.target_heads = {{1, 0}};
    joint_loss(sample_loss(model, corpus.generate_sample(1), c), 1.0).backward();
    auto norm = [&](const std::string& n) {
        double s = 0;
        for (double g : model.parameter(n).grad()) s += g * g;
        return s;
    };
    CHECK(norm("lm_head") > 0);
    CHECK(norm("layers.1.wq") > 0);
    CHECK(norm("layers.1.wk") > 0);

    model.zero_grad();
    auto only_con = sample_loss(model, corpus.generate_sample(1), c);
    only_con.con.backward();
    CHECK(norm("lm_head") == 0);
    CHECK(norm("layers.1.wq") > 0);
}

TEST_CASE("training runs") {
    Corpus corpus(micro_corpus());
    Model model(micro_model(corpus), 13);
    auto data = corpus.generate_dataset(16, 3);
    TrainConfig c;
    c.steps = 3;
    c.batch_size = 2;
    c.master_seed = 9;
    c.learning_rate = 1e-2;

    SUBCASE("identical configs give identical checkpoints") {
        auto a = train_run(make_checkpoint(model), c, corpus, data);
        auto b = train_run(make_checkpoint(model), c, corpus, data);
        for (std::size_t i = 0; i < a.checkpoint.weights.size(); ++i)
            CHECK(a.checkpoint.weights[i].tensor.to_vector() == b.checkpoint.weights[i].tensor.to_vector());
        CHECK(a.checkpoint.step == 3);
        REQUIRE(a.metrics.size() == 3);
        for (const auto& m : a.metrics) CHECK(std::abs(m.loss.total - (m.loss.clm + c.lambda * m.loss.con)) <= 1e-9);
    }
    SUBCASE("lambda 0 equals a run without target heads") {
        auto a = c;
        a.lambda = 0.0;
        a.target_heads = {{0, 0}, {1, 1}};
        auto b = c;
        b.lambda = 0.0;
        auto ra = train_run(make_checkpoint(model), a, corpus, data);
        auto rb = train_run(make_checkpoint(model), b, corpus, data);
        for (std::size_t i = 0; i < ra.checkpoint.weights.size(); ++i)
            CHECK(ra.checkpoint.weights[i].tensor.to_vector() == rb.checkpoint.weights[i].tensor.to_vector());
    }
    SUBCASE("learning rate 0 keeps the weights") {
        auto z = c;
        z.learning_rate = 0.0;
        auto r = train_run(make_checkpoint(model), z, corpus, data);
        for (std::size_t i = 0; i < r.checkpoint.weights.size(); ++i)
            CHECK(r.checkpoint.weights[i].tensor.to_vector() == model.parameters()[i].tensor.to_vector());
    }
    SUBCASE("a non-finite loss aborts with a diagnostic dump") {
        testutil::TempDir dir("nan");
        auto params = model.clone().parameters();
        auto v = params[0].tensor.to_vector();
        for (auto& x : v) x = std::numeric_limits<double>::infinity();
        params[0].tensor = Tensor::from_data(params[0].tensor.shape(), v, true);
        Model broken(model.config(), params);
        TrainHooks hooks;
        hooks.diagnostic_dir = dir.path();
        try {
            train_run(make_checkpoint(broken), c, corpus, data, hooks);
            FAIL("expected numeric error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::numeric);
        }
        CHECK(std::filesystem::exists(dir.path() / "nonfinite_step_0.json"));
    }
}

TEST_CASE("metrics line format") {
    StepMetrics m;
    m.loss = total_loss(1.5, 0.25, 1.0, 4);
    m.lr = 3e-4;
    auto j = to_json_line(m);
    CHECK(j["step"] == 4);
    CHECK(j["clm"] == 1.5);
    CHECK(j["con"] == 0.25);
    CHECK(j["total"] == 1.75);
    CHECK(j["lr"] == 3e-4);
}

TEST_CASE("token F1 and QA evaluation") {
    std::vector<TokenId> a{1, 2, 3}, b{1, 2, 4}, empty;
    CHECK(token_f1(a, b) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(token_f1(empty, b) == 0.0);
    CHECK(token_f1(a, a) == 1.0);

    Corpus corpus(micro_corpus());
    Model model(micro_model(corpus), 2);
    auto data = corpus.generate_dataset(6, 1);
    const TokenId eos = corpus.vocab().id("</s>");
    QaOptions zero_len;
    zero_len.max_new_tokens = 0;
    auto none = evaluate_qa(model, data, eos, zero_len);
    CHECK(none.exact_match == 0.0);
    CHECK(none.token_f1 == 0.0);

    auto r = evaluate_qa(model, data, eos);
    CHECK(r.n == 6);
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto decoded = greedy_decode(model, data[i].layout.prompt(), eos);
        CHECK(decoded == r.predictions[i].tokens);
    }
}

TEST_CASE("a model that memorized its sample answers it exactly") {
    Corpus corpus(micro_corpus());
    Model model(micro_model(corpus), 3);
    auto data = corpus.generate_dataset(1, 5);
    TrainConfig c;
    c.steps = 150;
    c.batch_size = 1;
    c.learning_rate = 1e-2;
    c.shuffle_passages = false;
    c.schedule = LrSchedule::constant;
    auto trained = model_from_checkpoint(train_run(make_checkpoint(model), c, corpus, data).checkpoint);
    auto r = evaluate_qa(trained, data, corpus.vocab().id("</s>"));
    CHECK(r.exact_match == 1.0);
    CHECK(r.token_f1 == 1.0);
}
