#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mudaf/corpus.hpp"
#include "mudaf/model.hpp"
#include "mudaf/qa_eval.hpp"

namespace mudaf {

// Attention of one query token summed over each passage span.
struct PassageAttention {
    HeadId head;
    std::vector<double> weights;
    // Mass on instruction, delimiter, question and cue tokens.
    double residual_mass = 0.0;
};

PassageAttention passage_attention_mass(const AttentionTrace& trace, const PromptLayout& layout);

// Passages whose weight strictly exceeds epsilon, ascending.
std::vector<std::size_t> attended_set(const PassageAttention& pa, double epsilon);

// Harmonic mean of precision and recall of `attended` against `golden`;
// 0 when the intersection is empty.
double f1_retrieval(const std::vector<std::size_t>& golden, const std::vector<std::size_t>& attended);

// 1 when the |golden| heaviest passages are exactly the golden ones. Ties in
// weight rank the lower passage index first.
int em_retrieval(const PassageAttention& pa, const std::vector<std::size_t>& golden);

enum class ScoreKind { mdqa, copy_paste };

struct AnalysisConfig {
    double epsilon = 0.1;
    AttributionToken token = AttributionToken::prompt_last;
    std::string eval_set_id;
    ScoreKind kind = ScoreKind::mdqa;

    bool operator==(const AnalysisConfig&) const = default;
};

void to_json(nlohmann::json& j, const AnalysisConfig& c);
void from_json(const nlohmann::json& j, AnalysisConfig& c);

// Per-head scores of one sample, indexed by flat head index.
struct SampleHeadScores {
    std::vector<double> f1;
    std::vector<double> em;
};

struct HeadScore {
    HeadId head;
    double f1 = 0.0;
    double em = 0.0;
    std::size_t rank = 0;  // 1 = highest F1

    bool operator==(const HeadScore&) const = default;
};

struct HeadScoreTable {
    AnalysisConfig analysis;
    std::size_t n_samples = 0;
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    // One row per head in (layer, head) order.
    std::vector<HeadScore> rows;

    const HeadScore& at(const HeadId& head) const;
    // Heads sorted by rank.
    std::vector<HeadId> ranked() const;
    std::vector<HeadId> top_k(std::size_t k) const;
    double mean_f1(const std::vector<HeadId>& heads) const;

    bool operator==(const HeadScoreTable&) const = default;
};

void to_json(nlohmann::json& j, const HeadScoreTable& t);
void from_json(const nlohmann::json& j, HeadScoreTable& t);
std::string to_csv(const HeadScoreTable& t);

// Means per head over samples; ranks by descending F1, ties by (layer, head).
HeadScoreTable aggregate_scores(const std::vector<SampleHeadScores>& samples, const ModelConfig& config,
                                const AnalysisConfig& analysis);

// Attention-mass scores of every head on one sample.
SampleHeadScores score_sample(const Model& model, const MdqaSample& sample, const AnalysisConfig& analysis);

// Copy-paste scores on one needle sample: a head scores 1 when its strongest
// attention from the answer cue lands on the answer token inside the needle.
SampleHeadScores copy_paste_sample(const Model& model, const MdqaSample& sample);

// Scores every head over `samples` with the metric selected by analysis.kind.
HeadScoreTable score_heads(const Model& model, const std::vector<MdqaSample>& samples, const AnalysisConfig& analysis);

// Passage attention of the given heads on one sample, for heatmaps.
std::vector<PassageAttention> passage_attention(const Model& model, const MdqaSample& sample,
                                                const std::vector<HeadId>& heads, AttributionToken token);

enum class MaskStrategy { top, random, niah_proxy };
std::string_view to_string(MaskStrategy s);
MaskStrategy mask_strategy_from_string(std::string_view text);

struct MaskingConfig {
    std::vector<MaskStrategy> strategies = {MaskStrategy::top, MaskStrategy::random, MaskStrategy::niah_proxy};
    std::size_t k = 8;
    std::size_t repeats = 3;
    std::uint64_t seed = 0;
    QaOptions qa;
};

struct MaskingRow {
    MaskStrategy strategy = MaskStrategy::top;
    std::size_t repeat = 0;
    std::uint64_t seed = 0;
    std::vector<HeadId> heads;
    double exact_match = 0.0;
    double token_f1 = 0.0;
};

struct MaskingReport {
    std::size_t k = 0;
    double baseline_exact_match = 0.0;
    double baseline_token_f1 = 0.0;
    std::vector<MaskingRow> rows;

    // Mean exact match over the rows of one strategy.
    double mean_exact_match(MaskStrategy s) const;
};

// QA accuracy with k heads masked under each strategy: top-k by the MDQA
// table, k random heads (one row per repeat), top-k by the copy-paste table.
// The niah-proxy strategy requires `copy_paste_scores`.
MaskingReport masking_experiment(const Model& model, const std::vector<MdqaSample>& eval, TokenId eos,
                                 const HeadScoreTable& mdqa_scores, const HeadScoreTable* copy_paste_scores,
                                 const MaskingConfig& config);

void to_json(nlohmann::json& j, const MaskingReport& r);
std::string to_csv(const MaskingReport& r);

}  // namespace mudaf
