#include "protocol.hpp"

#include <chrono>
#include <cstdio>
#include <set>
#include <sstream>

#include "mudaf/checkpoint.hpp"
#include "mudaf/qa_eval.hpp"
#include "mudaf/rng.hpp"
#include "mudaf/selection.hpp"

using namespace mudaf;

namespace protocol {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

constexpr std::size_t kRandomMaskRepeats = 3;
constexpr double kMainF1Margin = 0.20;
constexpr double kMainEmMargin = 0.05;
constexpr double kMainBudgetSeconds = 30 * 60;
constexpr std::size_t kSeedsNeeded = 2;

struct Data {
    Corpus corpus;
    std::vector<MdqaSample> train, score, eval;
    TokenId eos = 0;
};

Data make_data(const Recipe& r, std::uint64_t seed) {
    Data d{Corpus(r.corpus), {}, {}, {}, 0};
    d.train = d.corpus.generate_dataset(r.n_train, derive_seed(seed, 1));
    d.score = d.corpus.generate_dataset(r.n_score, derive_seed(seed, 2));
    d.eval = d.corpus.generate_dataset(r.n_eval, derive_seed(seed, 3));
    d.eos = d.corpus.vocab().id("</s>");
    return d;
}

Checkpoint initial_checkpoint(const Recipe& r, const Data& d, std::uint64_t seed) {
    ModelConfig mc = r.model;
    mc.vocab_size = d.corpus.vocab().size();
    return make_checkpoint(Model(mc, derive_seed(seed, 4)));
}

Model train(const Checkpoint& init, const Recipe& r, const Data& d, std::uint64_t seed,
            const std::vector<HeadId>& heads, const std::string& tag) {
    TrainConfig tc = r.train;
    tc.master_seed = seed;
    tc.target_heads = heads;
    if (heads.empty()) tc.lambda = 0.0;
    TrainHooks hooks;
    hooks.on_step = [&](const StepMetrics& m) {
        if ((m.loss.step + 1) % 200 == 0 || m.loss.step + 1 == tc.steps) {
            std::fprintf(stderr, "  [%s seed %llu] step %zu clm %.4f con %.4f\n", tag.c_str(),
                         static_cast<unsigned long long>(seed), m.loss.step + 1, m.loss.clm, m.loss.con);
        }
    };
    return model_from_checkpoint(train_run(init, tc, d.corpus, d.train, hooks).checkpoint);
}

// Retrieval scores are read at the question's last token: the scored prompt
// ends with the question, so this is its last token and the MuDAF query.
AnalysisConfig analysis_config() {
    AnalysisConfig a;
    a.token = AttributionToken::question_last;
    return a;
}

std::string heads_label(const std::vector<HeadId>& heads) {
    std::string s;
    for (const auto& h : heads) s += (s.empty() ? "" : ",") + h.label();
    return s;
}

}  // namespace

Recipe default_recipe() {
    Recipe r;
    // Defaults: 10 passages with one golden, 4 layers x 8 heads, d_model 128.
    r.model.max_seq_len = 128;
    r.train.steps = 600;
    r.train.batch_size = 8;
    r.train.learning_rate = 1e-3;
    r.train.warmup_steps = 20;
    r.n_train = 4000;
    r.n_score = 100;
    r.n_eval = 200;
    r.seeds = {1, 2, 3};
    return r;
}

MainResults run_main_experiments(const std::filesystem::path&, bool with_weak) {
    const Recipe r = default_recipe();
    MainResults out;
    for (std::uint64_t seed : r.seeds) {
        SeedResult s;
        s.seed = seed;
        const Data d = make_data(r, seed);
        const Checkpoint init = initial_checkpoint(r, d, seed);

        auto t0 = Clock::now();
        const Model vanilla = train(init, r, d, seed, {}, "vanilla");
        const AnalysisConfig analysis = analysis_config();
        const HeadScoreTable vanilla_scores = score_heads(vanilla, d.score, analysis);
        SelectionConfig sel;
        sel.k = r.k;
        sel.temperature = r.selection_temperature;
        sel.seed = seed;
        s.targets = sample_heads(vanilla_scores, sel);
        const Model mudaf = train(init, r, d, seed, s.targets, "mudaf");

        const HeadScoreTable vanilla_eval = score_heads(vanilla, d.eval, analysis);
        const HeadScoreTable mudaf_eval = score_heads(mudaf, d.eval, analysis);
        s.vanilla_target_f1 = vanilla_eval.mean_f1(s.targets);
        s.mudaf_target_f1 = mudaf_eval.mean_f1(s.targets);
        s.vanilla_em = evaluate_qa(vanilla, d.eval, d.eos).exact_match;
        s.mudaf_em = evaluate_qa(mudaf, d.eval, d.eos).exact_match;
        out.main_seconds += seconds_since(t0);

        MaskingConfig mask;
        mask.strategies = {MaskStrategy::top, MaskStrategy::random};
        mask.k = r.k;
        mask.repeats = kRandomMaskRepeats;
        mask.seed = seed;
        const MaskingReport report = masking_experiment(mudaf, d.eval, d.eos, mudaf_eval, nullptr, mask);
        s.base_em = report.baseline_exact_match;
        s.top_masked_em = report.mean_exact_match(MaskStrategy::top);
        s.random_masked_em = report.mean_exact_match(MaskStrategy::random);

        if (with_weak) {
            t0 = Clock::now();
            s.weak = weak_heads(vanilla_scores, r.k, seed);
            const Model weak = train(init, r, d, seed, s.weak, "weak");
            s.vanilla_weak_f1 = vanilla_eval.mean_f1(s.weak);
            s.mudaf_weak_f1 = score_heads(weak, d.eval, analysis).mean_f1(s.weak);
            out.weak_seconds += seconds_since(t0);
        }
        out.seeds.push_back(s);
    }
    return out;
}

Outcome judge_main_effect(const MainResults& r) {
    std::ostringstream d;
    std::size_t ok = 0;
    for (const auto& s : r.seeds) {
        const double df1 = s.mudaf_target_f1 - s.vanilla_target_f1, dem = s.mudaf_em - s.vanilla_em;
        const bool pass = df1 >= kMainF1Margin && dem >= kMainEmMargin;
        ok += pass;
        d << "seed " << s.seed << ": target F1 " << s.vanilla_target_f1 << " -> " << s.mudaf_target_f1 << " (" << df1
          << "), EM " << s.vanilla_em << " -> " << s.mudaf_em << " (" << dem << ") " << (pass ? "ok" : "no")
          << " [heads " << heads_label(s.targets) << "]\n    ";
    }
    d << ok << "/" << r.seeds.size() << " seeds meet +" << kMainF1Margin << " F1 and +" << kMainEmMargin
      << " EM (need " << kSeedsNeeded << "); runtime " << r.main_seconds << " s (budget " << kMainBudgetSeconds << " s)";
    return {ok >= kSeedsNeeded && r.main_seconds <= kMainBudgetSeconds, true, d.str()};
}

Outcome judge_masking(const MainResults& r) {
    std::ostringstream d;
    std::size_t ok = 0;
    for (const auto& s : r.seeds) {
        const double drop_top = s.base_em - s.top_masked_em, drop_random = s.base_em - s.random_masked_em;
        const bool pass = drop_top > 0.0 && drop_top >= 2.0 * drop_random;
        ok += pass;
        d << "seed " << s.seed << ": EM " << s.base_em << ", top-8 masked " << s.top_masked_em << " (drop " << drop_top
          << "), random-8 masked " << s.random_masked_em << " (drop " << drop_random << ") " << (pass ? "ok" : "no")
          << "\n    ";
    }
    d << ok << "/" << r.seeds.size() << " seeds with drop_top > 0 and drop_top >= 2 x drop_random (need "
      << kSeedsNeeded << ")";
    return {ok >= kSeedsNeeded, true, d.str()};
}

Outcome judge_weak_heads(const MainResults& r) {
    std::ostringstream d;
    std::size_t ok = 0;
    for (const auto& s : r.seeds) {
        const bool pass = s.mudaf_weak_f1 > s.vanilla_weak_f1;
        ok += pass;
        d << "seed " << s.seed << ": weak heads " << heads_label(s.weak) << " F1 " << s.vanilla_weak_f1 << " -> "
          << s.mudaf_weak_f1 << " " << (pass ? "ok" : "no") << "\n    ";
    }
    d << ok << "/" << r.seeds.size() << " seeds raise the weak heads (need " << kSeedsNeeded << "); runtime "
      << r.weak_seconds << " s";
    return {ok >= kSeedsNeeded, true, d.str()};
}

Outcome gqa_propagation(const std::filesystem::path&) {
    Recipe r = default_recipe();
    r.model.n_kv_heads = 2;
    const std::uint64_t seed = r.seeds.front();
    const Data d = make_data(r, seed);
    const Checkpoint init = initial_checkpoint(r, d, seed);
    const Model vanilla = train(init, r, d, seed, {}, "gqa-vanilla");
    const AnalysisConfig analysis = analysis_config();
    SelectionConfig sel;
    sel.k = r.k;
    sel.seed = seed;
    const auto targets = sample_heads(score_heads(vanilla, d.score, analysis), sel);
    const Model mudaf = train(init, r, d, seed, targets, "gqa-mudaf");
    const HeadScoreTable before = score_heads(vanilla, d.eval, analysis), after = score_heads(mudaf, d.eval, analysis);

    const ModelConfig& mc = vanilla.config();
    const std::set<HeadId> selected(targets.begin(), targets.end());
    std::set<std::pair<std::size_t, std::size_t>> touched;
    for (const auto& h : targets) touched.insert({h.layer, kv_group_of(h, mc)});
    double shared = 0, untouched = 0;
    std::size_t n_shared = 0, n_untouched = 0;
    for (const auto& h : all_heads(mc)) {
        if (selected.contains(h)) continue;
        const double gain = after.at(h).f1 - before.at(h).f1;
        if (touched.contains({h.layer, kv_group_of(h, mc)})) {
            shared += gain;
            ++n_shared;
        } else {
            untouched += gain;
            ++n_untouched;
        }
    }
    std::ostringstream o;
    if (n_shared == 0 || n_untouched == 0) {
        o << "selected heads " << heads_label(targets) << " leave no comparison group (shared " << n_shared
          << ", untouched " << n_untouched << ")";
        return {false, false, o.str()};
    }
    shared /= n_shared;
    untouched /= n_untouched;
    o << "n_kv_heads 2, selected " << heads_label(targets) << "; mean F1 gain of unselected heads in selected groups "
      << shared << " (" << n_shared << " heads) vs untouched groups " << untouched << " (" << n_untouched << " heads)";
    return {shared > untouched, false, o.str()};
}

}  // namespace protocol
