#pragma once

#include <cstddef>
#include <set>
#include <span>
#include <vector>

#include "mudaf/corpus.hpp"
#include "mudaf/model.hpp"

namespace mudaf {

struct QaOptions {
    // Heads whose outputs are zeroed during decoding.
    std::set<HeadId> masked_heads;
    // Decoding stops after this many generated tokens if no end token appears.
    std::size_t max_new_tokens = 8;
};

struct QaPrediction {
    std::vector<TokenId> tokens;  // generated answer, end token excluded
    bool exact = false;
    double f1 = 0.0;
};

struct QaMetrics {
    double exact_match = 0.0;
    double token_f1 = 0.0;
    std::size_t n = 0;
    std::vector<QaPrediction> predictions;
};

// Token-overlap F1 between bags of tokens; 0 when either side is empty.
double token_f1(std::span<const TokenId> prediction, std::span<const TokenId> gold);

// Greedy continuation of `prompt` until `eos` or `max_new_tokens`.
std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> prompt, TokenId eos,
                                   const QaOptions& options = {});

// Greedy-decodes every sample from its answer cue and scores the answers.
QaMetrics evaluate_qa(const Model& model, const std::vector<MdqaSample>& samples, TokenId eos,
                      const QaOptions& options = {});

}  // namespace mudaf
