#include "mudaf/retrieval.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "json_util.hpp"
#include "mudaf/checkpoint.hpp"
#include "mudaf/errors.hpp"
#include "mudaf/rng.hpp"

namespace mudaf {

namespace {

constexpr std::uint64_t kRandomMaskStream = 0x6d61736bULL;

std::string_view to_string(ScoreKind k) { return k == ScoreKind::mdqa ? "mdqa" : "copy-paste"; }

ScoreKind score_kind_from_string(std::string_view text) {
    if (text == "mdqa") return ScoreKind::mdqa;
    if (text == "copy-paste") return ScoreKind::copy_paste;
    fail(ErrorKind::config, "unknown score kind '" + std::string(text) + "'");
}

std::vector<TraceRequest> all_head_requests(const ModelConfig& config, std::size_t query) {
    std::vector<TraceRequest> requests;
    for (const HeadId& h : all_heads(config)) requests.push_back({h, query});
    return requests;
}

ForwardResult traced_prefix(const Model& model, const PromptLayout& layout, std::vector<TraceRequest> requests,
                            std::size_t query) {
    require(query < layout.tokens.size(), ErrorKind::usage, "attribution index past the end of the prompt");
    NoGradGuard no_grad;
    ForwardOptions options;
    options.traces = std::move(requests);
    // Causal attention makes the prefix up to the query position sufficient.
    return model.forward(std::span<const TokenId>(layout.tokens).first(query + 1), options);
}

}  // namespace

PassageAttention passage_attention_mass(const AttentionTrace& trace, const PromptLayout& layout) {
    const std::size_t visible = std::min(trace.attn_row.size(), trace.query_token_index + 1);
    PassageAttention pa;
    pa.head = trace.head;
    double total = 0.0;
    for (const Span& span : layout.passage_spans) {
        require(span.begin <= span.end && span.end <= visible, ErrorKind::usage,
                "passage span [" + std::to_string(span.begin) + ", " + std::to_string(span.end) +
                    ") lies outside the traced attention row");
        double w = 0.0;
        for (std::size_t t = span.begin; t < span.end; ++t) w += trace.attn_row[t];
        pa.weights.push_back(w);
        total += w;
    }
    pa.residual_mass = std::max(0.0, 1.0 - total);
    return pa;
}

std::vector<std::size_t> attended_set(const PassageAttention& pa, double epsilon) {
    require(epsilon >= 0.0, ErrorKind::usage, "epsilon must be non-negative");
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < pa.weights.size(); ++k) {
        if (pa.weights[k] > epsilon) out.push_back(k);
    }
    return out;
}

double f1_retrieval(const std::vector<std::size_t>& golden, const std::vector<std::size_t>& attended) {
    require(!golden.empty(), ErrorKind::usage, "f1_retrieval: empty golden set");
    const std::set<std::size_t> g(golden.begin(), golden.end()), a(attended.begin(), attended.end());
    std::size_t hits = 0;
    for (std::size_t k : a) hits += g.contains(k) ? 1 : 0;
    if (hits == 0) return 0.0;
    const double precision = static_cast<double>(hits) / static_cast<double>(a.size());
    const double recall = static_cast<double>(hits) / static_cast<double>(g.size());
    return 2.0 * precision * recall / (precision + recall);
}

int em_retrieval(const PassageAttention& pa, const std::vector<std::size_t>& golden) {
    const std::set<std::size_t> g(golden.begin(), golden.end());
    require(!g.empty() && g.size() <= pa.weights.size(), ErrorKind::usage,
            "em_retrieval: golden set must be nonempty and no larger than the passage count");
    std::vector<std::size_t> order(pa.weights.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pa.weights[a] > pa.weights[b]; });
    const std::set<std::size_t> top(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(g.size()));
    return top == g ? 1 : 0;
}

void to_json(nlohmann::json& j, const AnalysisConfig& c) {
    j = nlohmann::json{{"epsilon", c.epsilon},
                       {"attribution_token", to_string(c.token)},
                       {"eval_set_id", c.eval_set_id},
                       {"kind", to_string(c.kind)}};
}

void from_json(const nlohmann::json& j, AnalysisConfig& c) {
    detail::check_keys(j, {"epsilon", "attribution_token", "eval_set_id", "kind"}, "analysis config");
    detail::read_optional(j, "epsilon", c.epsilon);
    detail::read_optional(j, "eval_set_id", c.eval_set_id);
    std::string text;
    if (j.contains("attribution_token")) {
        detail::read_optional(j, "attribution_token", text);
        c.token = attribution_token_from_string(text);
    }
    if (j.contains("kind")) {
        detail::read_optional(j, "kind", text);
        c.kind = score_kind_from_string(text);
    }
    require(c.epsilon >= 0.0, ErrorKind::config, "epsilon must be non-negative");
}

const HeadScore& HeadScoreTable::at(const HeadId& head) const {
    for (const auto& r : rows) {
        if (r.head == head) return r;
    }
    fail(ErrorKind::usage, "head " + head.label() + " is not in the score table");
}

std::vector<HeadId> HeadScoreTable::ranked() const {
    std::vector<const HeadScore*> sorted;
    for (const auto& r : rows) sorted.push_back(&r);
    std::sort(sorted.begin(), sorted.end(), [](const HeadScore* a, const HeadScore* b) { return a->rank < b->rank; });
    std::vector<HeadId> out;
    for (const auto* r : sorted) out.push_back(r->head);
    return out;
}

std::vector<HeadId> HeadScoreTable::top_k(std::size_t k) const {
    require(k <= rows.size(), ErrorKind::usage, "top_k: k exceeds the number of heads");
    auto heads = ranked();
    heads.resize(k);
    return heads;
}

double HeadScoreTable::mean_f1(const std::vector<HeadId>& heads) const {
    require(!heads.empty(), ErrorKind::usage, "mean_f1: no heads");
    double s = 0.0;
    for (const auto& h : heads) s += at(h).f1;
    return s / static_cast<double>(heads.size());
}

void to_json(nlohmann::json& j, const HeadScoreTable& t) {
    j = nlohmann::json{{"analysis", t.analysis},
                       {"n_samples", t.n_samples},
                       {"n_layers", t.n_layers},
                       {"n_heads", t.n_heads},
                       {"heads", nlohmann::json::array()}};
    for (const auto& r : t.rows) {
        j["heads"].push_back({{"layer", r.head.layer}, {"head", r.head.head}, {"f1", r.f1}, {"em", r.em}, {"rank", r.rank}});
    }
}

void from_json(const nlohmann::json& j, HeadScoreTable& t) {
    detail::check_keys(j, {"analysis", "n_samples", "n_layers", "n_heads", "heads"}, "head score table");
    try {
        t.analysis = j.at("analysis").get<AnalysisConfig>();
        t.n_samples = j.at("n_samples").get<std::size_t>();
        t.n_layers = j.at("n_layers").get<std::size_t>();
        t.n_heads = j.at("n_heads").get<std::size_t>();
        t.rows.clear();
        for (const auto& r : j.at("heads")) {
            t.rows.push_back({{r.at("layer").get<std::size_t>(), r.at("head").get<std::size_t>()},
                              r.at("f1").get<double>(),
                              r.at("em").get<double>(),
                              r.at("rank").get<std::size_t>()});
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::input, std::string("malformed head score table: ") + e.what());
    }
    require(t.rows.size() == t.n_layers * t.n_heads, ErrorKind::input, "head score table row count mismatch");
}

std::string to_csv(const HeadScoreTable& t) {
    std::ostringstream out;
    out.precision(17);
    out << "layer,head,f1,em,rank\n";
    for (const auto& r : t.rows) out << r.head.layer << ',' << r.head.head << ',' << r.f1 << ',' << r.em << ',' << r.rank << '\n';
    return out.str();
}

HeadScoreTable aggregate_scores(const std::vector<SampleHeadScores>& samples, const ModelConfig& config,
                                const AnalysisConfig& analysis) {
    require(!samples.empty(), ErrorKind::usage, "aggregate_scores: empty evaluation set");
    const std::size_t H = config.total_heads();
    HeadScoreTable table;
    table.analysis = analysis;
    table.n_samples = samples.size();
    table.n_layers = config.n_layers;
    table.n_heads = config.n_heads;
    for (std::size_t i = 0; i < H; ++i) table.rows.push_back({head_from_index(i, config), 0.0, 0.0, 0});
    for (const auto& s : samples) {
        require(s.f1.size() == H && s.em.size() == H, ErrorKind::dimension, "aggregate_scores: per-sample head count mismatch");
        for (std::size_t i = 0; i < H; ++i) {
            table.rows[i].f1 += s.f1[i];
            table.rows[i].em += s.em[i];
        }
    }
    const double n = static_cast<double>(samples.size());
    for (auto& r : table.rows) {
        r.f1 /= n;
        r.em /= n;
    }
    std::vector<std::size_t> order(H);
    std::iota(order.begin(), order.end(), 0);
    // Rows are already in (layer, head) order, so a stable sort breaks ties.
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return table.rows[a].f1 > table.rows[b].f1; });
    for (std::size_t r = 0; r < H; ++r) table.rows[order[r]].rank = r + 1;
    return table;
}

SampleHeadScores score_sample(const Model& model, const MdqaSample& sample, const AnalysisConfig& analysis) {
    const ModelConfig& config = model.config();
    const std::size_t query = attribution_index(sample.layout, analysis.token);
    const ForwardResult fwd = traced_prefix(model, sample.layout, all_head_requests(config, query), query);
    SampleHeadScores scores;
    for (const auto& trace : fwd.traces) {
        const PassageAttention pa = passage_attention_mass(trace, sample.layout);
        scores.f1.push_back(f1_retrieval(sample.golden_indices, attended_set(pa, analysis.epsilon)));
        scores.em.push_back(em_retrieval(pa, sample.golden_indices));
    }
    return scores;
}

SampleHeadScores copy_paste_sample(const Model& model, const MdqaSample& sample) {
    require(sample.kind == SampleKind::needle && sample.golden_indices.size() == 1, ErrorKind::usage,
            "copy-paste scoring needs needle samples");
    const PromptLayout& layout = sample.layout;
    const std::size_t query = layout.prompt_last_token_index;
    const ForwardResult fwd = traced_prefix(model, layout, all_head_requests(model.config(), query), query);
    const Span needle = layout.passage_spans[sample.golden_indices.front()];
    const TokenId answer = sample.answer.front();
    SampleHeadScores scores;
    for (const auto& trace : fwd.traces) {
        const auto& row = trace.attn_row;
        const std::size_t top =
            static_cast<std::size_t>(std::max_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(query + 1)) -
                                     row.begin());
        const double hit = needle.contains(top) && layout.tokens[top] == answer ? 1.0 : 0.0;
        scores.f1.push_back(hit);
        scores.em.push_back(hit);
    }
    return scores;
}

HeadScoreTable score_heads(const Model& model, const std::vector<MdqaSample>& samples, const AnalysisConfig& analysis) {
    require(!samples.empty(), ErrorKind::usage, "score_heads: empty evaluation set");
    std::vector<SampleHeadScores> per_sample;
    per_sample.reserve(samples.size());
    for (const auto& s : samples) {
        per_sample.push_back(analysis.kind == ScoreKind::mdqa ? score_sample(model, s, analysis) : copy_paste_sample(model, s));
    }
    return aggregate_scores(per_sample, model.config(), analysis);
}

std::vector<PassageAttention> passage_attention(const Model& model, const MdqaSample& sample,
                                                const std::vector<HeadId>& heads, AttributionToken token) {
    const std::size_t query = attribution_index(sample.layout, token);
    std::vector<TraceRequest> requests;
    for (const auto& h : heads) requests.push_back({h, query});
    const ForwardResult fwd = traced_prefix(model, sample.layout, std::move(requests), query);
    std::vector<PassageAttention> out;
    for (const auto& trace : fwd.traces) out.push_back(passage_attention_mass(trace, sample.layout));
    return out;
}

std::string_view to_string(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::top: return "top";
        case MaskStrategy::random: return "random";
        case MaskStrategy::niah_proxy: return "niah-proxy";
    }
    return "top";
}

MaskStrategy mask_strategy_from_string(std::string_view text) {
    if (text == "top") return MaskStrategy::top;
    if (text == "random") return MaskStrategy::random;
    if (text == "niah-proxy") return MaskStrategy::niah_proxy;
    fail(ErrorKind::config, "unknown masking strategy '" + std::string(text) + "'");
}

double MaskingReport::mean_exact_match(MaskStrategy s) const {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
        if (r.strategy != s) continue;
        total += r.exact_match;
        ++n;
    }
    require(n > 0, ErrorKind::usage, "no masking rows for strategy " + std::string(to_string(s)));
    return total / static_cast<double>(n);
}

MaskingReport masking_experiment(const Model& model, const std::vector<MdqaSample>& eval, TokenId eos,
                                 const HeadScoreTable& mdqa_scores, const HeadScoreTable* copy_paste_scores,
                                 const MaskingConfig& config) {
    const ModelConfig& mc = model.config();
    require(config.k <= mc.total_heads(), ErrorKind::usage, "masking k exceeds the number of heads");
    MaskingReport report;
    report.k = config.k;
    const QaMetrics base = evaluate_qa(model, eval, eos, config.qa);
    report.baseline_exact_match = base.exact_match;
    report.baseline_token_f1 = base.token_f1;

    auto run = [&](MaskStrategy s, std::size_t repeat, std::uint64_t seed, std::vector<HeadId> heads) {
        QaOptions qa = config.qa;
        qa.masked_heads.insert(heads.begin(), heads.end());
        const QaMetrics m = evaluate_qa(model, eval, eos, qa);
        report.rows.push_back({s, repeat, seed, std::move(heads), m.exact_match, m.token_f1});
    };
    for (MaskStrategy s : config.strategies) {
        switch (s) {
            case MaskStrategy::top:
                run(s, 0, 0, mdqa_scores.top_k(config.k));
                break;
            case MaskStrategy::niah_proxy:
                require(copy_paste_scores != nullptr, ErrorKind::usage, "niah-proxy masking needs a copy-paste score table");
                run(s, 0, 0, copy_paste_scores->top_k(config.k));
                break;
            case MaskStrategy::random:
                for (std::size_t r = 0; r < config.repeats; ++r) {
                    const std::uint64_t seed = derive_seed(config.seed, kRandomMaskStream, r);
                    Rng rng(seed);
                    std::vector<HeadId> pool = all_heads(mc);
                    for (std::size_t i = 0; i < config.k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
                    pool.resize(config.k);
                    run(s, r, seed, std::move(pool));
                }
                break;
        }
    }
    return report;
}

void to_json(nlohmann::json& j, const MaskingReport& r) {
    j = nlohmann::json{{"k", r.k},
                       {"baseline", {{"exact_match", r.baseline_exact_match}, {"token_f1", r.baseline_token_f1}}},
                       {"rows", nlohmann::json::array()}};
    for (const auto& row : r.rows) {
        j["rows"].push_back({{"strategy", to_string(row.strategy)},
                             {"repeat", row.repeat},
                             {"seed", row.seed},
                             {"heads", row.heads},
                             {"exact_match", row.exact_match},
                             {"token_f1", row.token_f1}});
    }
}

std::string to_csv(const MaskingReport& r) {
    std::ostringstream out;
    out.precision(17);
    out << "strategy,repeat,seed,k,exact_match,token_f1,heads\n";
    out << "baseline,0,0,0," << r.baseline_exact_match << ',' << r.baseline_token_f1 << ",\n";
    for (const auto& row : r.rows) {
        out << to_string(row.strategy) << ',' << row.repeat << ',' << row.seed << ',' << row.heads.size() << ','
            << row.exact_match << ',' << row.token_f1 << ',';
        for (std::size_t i = 0; i < row.heads.size(); ++i) out << (i ? " " : "") << row.heads[i].label();
        out << '\n';
    }
    return out.str();
}

}  // namespace mudaf
