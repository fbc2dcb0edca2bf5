#include "mudaf/qa_eval.hpp"

#include <algorithm>
#include <map>

#include "mudaf/errors.hpp"
#include "mudaf/tensor.hpp"

namespace mudaf {

namespace {

TokenId argmax_row(const Tensor& logits, std::size_t r) {
    const std::size_t V = logits.cols();
    const auto row = logits.data().subspan(r * V, V);
    return static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
}

ForwardOptions masked(const QaOptions& options) {
    ForwardOptions fo;
    fo.masked_heads = options.masked_heads;
    return fo;
}

// Greedy continuation of `context`, which already holds `generated` as its
// tail; appends to `generated` until eos or the token cap.
void continue_greedy(const Model& model, std::vector<TokenId> context, std::vector<TokenId>& generated, TokenId eos,
                     const QaOptions& options) {
    const ForwardOptions fo = masked(options);
    while (generated.size() < options.max_new_tokens && context.size() < model.config().max_seq_len) {
        const Tensor logits = model.forward(context, fo).logits;
        const TokenId next = argmax_row(logits, context.size() - 1);
        if (next == eos) return;
        generated.push_back(next);
        context.push_back(next);
    }
}

}  // namespace

double token_f1(std::span<const TokenId> prediction, std::span<const TokenId> gold) {
    if (prediction.empty() || gold.empty()) return 0.0;
    std::map<TokenId, std::size_t> counts;
    for (TokenId t : gold) ++counts[t];
    std::size_t common = 0;
    for (TokenId t : prediction) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    if (common == 0) return 0.0;
    const double precision = static_cast<double>(common) / static_cast<double>(prediction.size());
    const double recall = static_cast<double>(common) / static_cast<double>(gold.size());
    return 2.0 * precision * recall / (precision + recall);
}

std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> prompt, TokenId eos,
                                   const QaOptions& options) {
    require(!prompt.empty(), ErrorKind::usage, "greedy_decode: empty prompt");
    NoGradGuard no_grad;
    std::vector<TokenId> generated;
    continue_greedy(model, std::vector<TokenId>(prompt.begin(), prompt.end()), generated, eos, options);
    return generated;
}

QaMetrics evaluate_qa(const Model& model, const std::vector<MdqaSample>& samples, TokenId eos,
                      const QaOptions& options) {
    require(!samples.empty(), ErrorKind::usage, "evaluate_qa: empty evaluation set");
    NoGradGuard no_grad;
    const ForwardOptions fo = masked(options);
    QaMetrics metrics;
    for (const MdqaSample& sample : samples) {
        const auto prompt = sample.layout.prompt();
        const std::vector<TokenId>& gold = sample.answer;
        // One teacher-forced pass scores the gold continuation; greedy decoding
        // agrees with it up to the first position where the argmax differs.
        std::vector<TokenId> forced(prompt.begin(), prompt.end());
        forced.insert(forced.end(), gold.begin(), gold.end());
        if (forced.size() > model.config().max_seq_len) forced.resize(model.config().max_seq_len);
        const Tensor logits = model.forward(forced, fo).logits;

        QaPrediction pred;
        bool finished = false;
        for (std::size_t i = 0; i <= gold.size() && !finished; ++i) {
            const std::size_t pos = prompt.size() - 1 + i;
            if (pos >= forced.size() || pred.tokens.size() >= options.max_new_tokens) {
                std::vector<TokenId> context(prompt.begin(), prompt.end());
                context.insert(context.end(), pred.tokens.begin(), pred.tokens.end());
                continue_greedy(model, std::move(context), pred.tokens, eos, options);
                finished = true;
                break;
            }
            const TokenId next = argmax_row(logits, pos);
            if (next == eos) {
                finished = true;
                break;
            }
            pred.tokens.push_back(next);
            if (i == gold.size() || next != gold[i]) {
                std::vector<TokenId> context(prompt.begin(), prompt.end());
                context.insert(context.end(), pred.tokens.begin(), pred.tokens.end());
                continue_greedy(model, std::move(context), pred.tokens, eos, options);
                finished = true;
            }
        }
        pred.exact = pred.tokens == gold;
        pred.f1 = token_f1(pred.tokens, gold);
        metrics.exact_match += pred.exact ? 1.0 : 0.0;
        metrics.token_f1 += pred.f1;
        metrics.predictions.push_back(std::move(pred));
    }
    metrics.n = samples.size();
    metrics.exact_match /= static_cast<double>(metrics.n);
    metrics.token_f1 /= static_cast<double>(metrics.n);
    return metrics;
}

}  // namespace mudaf
