#include "mudaf/contrastive.hpp"

#include <cmath>
#include <string>

#include "mudaf/errors.hpp"
#include "mudaf/ops.hpp"

namespace mudaf {

std::string_view to_string(SimilarityMode mode) {
    return mode == SimilarityMode::concatenated ? "concatenated" : "per-head";
}

SimilarityMode similarity_mode_from_string(std::string_view text) {
    if (text == "concatenated") return SimilarityMode::concatenated;
    if (text == "per-head") return SimilarityMode::per_head;
    fail(ErrorKind::config, "unknown similarity mode '" + std::string(text) + "'");
}

std::vector<std::vector<double>> pooled_passage_keys(const AttentionTrace& trace, const PromptLayout& layout) {
    std::vector<std::vector<double>> pooled;
    pooled.reserve(layout.passage_spans.size());
    for (const Span& span : layout.passage_spans) {
        require(span.size() > 0, ErrorKind::usage, "pooled_passage_keys: empty passage span");
        require(span.end <= trace.key_count(), ErrorKind::usage, "pooled_passage_keys: passage span not covered by the trace");
        std::vector<double> mean(trace.d_head, 0.0);
        for (std::size_t t = span.begin; t < span.end; ++t) {
            const auto key = trace.key(t);
            for (std::size_t j = 0; j < trace.d_head; ++j) mean[j] += key[j];
        }
        for (double& v : mean) v /= static_cast<double>(span.size());
        pooled.push_back(std::move(mean));
    }
    return pooled;
}

ContrastiveBatch build_contrastive_batch(const ForwardResult& forward, const MdqaSample& sample,
                                         const std::vector<HeadId>& heads, const ModelConfig& config,
                                         std::size_t query_index) {
    require(!heads.empty(), ErrorKind::usage, "contrastive batch needs at least one target head");
    require(sample.golden_indices.size() == 1, ErrorKind::usage,
            "contrastive samples must have exactly one golden passage, got " +
                std::to_string(sample.golden_indices.size()));
    require(sample.layout.passage_spans.size() >= 2, ErrorKind::usage, "contrastive samples need at least two passages");
    const std::size_t dh = config.d_head;
    ContrastiveBatch batch;
    batch.heads = heads;
    batch.golden = sample.golden_indices.front();
    for (const HeadId& head : heads) {
        head_index(head, config);
        const LayerProjections& proj = forward.projections_for(head.layer);
        require(query_index < proj.q.rows(), ErrorKind::usage, "contrastive query index past the end of the sequence");
        batch.queries.push_back(slice_cols(reshape(row(proj.q, query_index), {1, proj.q.cols()}), head.head * dh, dh));
        batch.queries.back() = reshape(batch.queries.back(), {dh});
        const Tensor head_keys = slice_cols(proj.k, kv_group_of(head, config) * dh, dh);
        std::vector<Tensor> pooled;
        for (const Span& span : sample.layout.passage_spans) {
            require(span.size() > 0, ErrorKind::usage, "contrastive batch: empty passage span");
            pooled.push_back(mean_rows(head_keys, span.begin, span.end));
        }
        batch.keys.push_back(std::move(pooled));
    }
    return batch;
}

HeadFeatures concat_head_features(const ContrastiveBatch& batch, SimilarityMode mode) {
    require(!batch.queries.empty() && batch.queries.size() == batch.keys.size(), ErrorKind::usage,
            "concat_head_features: batch needs at least one head");
    HeadFeatures features;
    if (mode == SimilarityMode::per_head) {
        features.queries = batch.queries;
        features.keys = batch.keys;
        return features;
    }
    if (batch.queries.size() == 1) {
        features.queries = {batch.queries.front()};
        features.keys = {batch.keys.front()};
        return features;
    }
    features.queries.push_back(concat(batch.queries));
    const std::size_t n_passages = batch.keys.front().size();
    std::vector<Tensor> joined;
    for (std::size_t p = 0; p < n_passages; ++p) {
        std::vector<Tensor> parts;
        for (const auto& per_head : batch.keys) parts.push_back(per_head.at(p));
        joined.push_back(concat(parts));
    }
    features.keys.push_back(std::move(joined));
    return features;
}

Tensor info_nce(const Tensor& sims, std::size_t golden, double tau) {
    require(tau > 0.0, ErrorKind::config, "contrastive temperature must be positive");
    require(sims.rank() == 1 && sims.numel() >= 2, ErrorKind::usage, "info_nce needs at least two similarities");
    require(golden < sims.numel(), ErrorKind::usage, "info_nce: golden index out of range");
    const TokenId target = static_cast<TokenId>(golden);
    return cross_entropy_masked(reshape(scale(sims, 1.0 / tau), {1, sims.numel()}), std::span(&target, 1), {true});
}

Tensor contrastive_loss(const HeadFeatures& features, std::size_t golden, double tau) {
    require(!features.queries.empty() && features.queries.size() == features.keys.size(), ErrorKind::usage,
            "contrastive_loss: no feature groups");
    Tensor total;
    for (std::size_t g = 0; g < features.queries.size(); ++g) {
        std::vector<Tensor> sims;
        for (const Tensor& key : features.keys[g]) sims.push_back(cosine_similarity(features.queries[g], key));
        Tensor loss = info_nce(concat(sims), golden, tau);
        total = total.defined() ? add(total, loss) : loss;
    }
    return total;
}

LossBreakdown total_loss(double clm, double con, double lambda, std::size_t step) {
    require(std::isfinite(clm) && std::isfinite(con) && std::isfinite(lambda), ErrorKind::numeric,
            "total_loss: non-finite input");
    return {step, clm, con, clm + lambda * con};
}

}  // namespace mudaf
