#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "mudaf/corpus.hpp"
#include "mudaf/model.hpp"
#include "mudaf/tensor.hpp"

namespace mudaf {

enum class SimilarityMode { concatenated, per_head };
std::string_view to_string(SimilarityMode mode);
SimilarityMode similarity_mode_from_string(std::string_view text);

// Mean key projection over each passage span, read from a trace. The trace
// must cover every passage.
std::vector<std::vector<double>> pooled_passage_keys(const AttentionTrace& trace, const PromptLayout& layout);

// Query and pooled passage keys of every target head for one sample, as live
// tensors so the contrastive loss can back-propagate into Q and K.
struct ContrastiveBatch {
    std::vector<HeadId> heads;
    std::vector<Tensor> queries;            // per head, [d_head]
    std::vector<std::vector<Tensor>> keys;  // per head, per passage, [d_head]
    std::size_t golden = 0;
};

// Builds the batch from projections captured during `forward` (every target
// head's layer must be in capture_layers). The sample must have exactly one
// golden passage.
ContrastiveBatch build_contrastive_batch(const ForwardResult& forward, const MdqaSample& sample,
                                         const std::vector<HeadId>& heads, const ModelConfig& config,
                                         std::size_t query_index);

// One query vector and its passage keys per feature group: a single group in
// concatenated mode, one group per head otherwise.
struct HeadFeatures {
    std::vector<Tensor> queries;
    std::vector<std::vector<Tensor>> keys;
};

HeadFeatures concat_head_features(const ContrastiveBatch& batch, SimilarityMode mode);

// InfoNCE over cosine similarities: -log softmax(sims / tau)[golden].
Tensor info_nce(const Tensor& sims, std::size_t golden, double tau);

// Sum over feature groups of the InfoNCE loss of that group's query against
// its passage keys.
Tensor contrastive_loss(const HeadFeatures& features, std::size_t golden, double tau);

struct LossBreakdown {
    std::size_t step = 0;
    double clm = 0.0;
    double con = 0.0;
    double total = 0.0;
};

LossBreakdown total_loss(double clm, double con, double lambda, std::size_t step = 0);

}  // namespace mudaf
