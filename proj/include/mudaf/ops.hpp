#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "mudaf/tensor.hpp"

namespace mudaf {

using TokenId = std::uint32_t;

// [m x k] x [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
// Elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Numerically stable softmax along `axis` of a rank-1 or rank-2 tensor.
Tensor softmax(const Tensor& x, int axis = -1);

// Row-wise RMS normalization of [T x d] with a learned gain of shape [d].
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

// Gathers rows of a [V x d] table.
Tensor embedding(const Tensor& table, std::span<const TokenId> ids);

// Rotary position embedding applied independently to each d_head-wide block
// of the columns; row t is rotated by position t. Pairs are (i, i + d_head/2).
Tensor rope(const Tensor& x, std::size_t d_head, double base);

// Mean negative log-likelihood over rows whose mask entry is set.
Tensor cross_entropy_masked(const Tensor& logits, std::span<const TokenId> targets, const std::vector<bool>& mask);

// u.v / (|u||v|); both norms must exceed `norm_floor`.
Tensor cosine_similarity(const Tensor& u, const Tensor& v, double norm_floor = 1e-12);

// Columns [start, start + count) of a rank-2 tensor.
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
// One row of a rank-2 tensor as a rank-1 tensor.
Tensor row(const Tensor& x, std::size_t index);
// Mean over rows [begin, end) of a rank-2 tensor.
Tensor mean_rows(const Tensor& x, std::size_t begin, std::size_t end);
// Flattens and joins the inputs end to end.
Tensor concat(const std::vector<Tensor>& parts);

struct AttentionGeometry {
    std::size_t n_heads = 0;
    std::size_t n_kv_heads = 0;
    std::size_t d_head = 0;
};

// Row-major probabilities [head][query][key] produced by causal_attention.
struct AttentionProbs {
    std::size_t n_heads = 0;
    std::size_t seq_len = 0;
    std::vector<double> values;

    double at(std::size_t head, std::size_t query, std::size_t key) const {
        return values[(head * seq_len + query) * seq_len + key];
    }
    std::span<const double> row(std::size_t head, std::size_t query) const {
        return std::span<const double>(values).subspan((head * seq_len + query) * seq_len, seq_len);
    }
};

struct AttentionOutput {
    Tensor context;
    std::shared_ptr<const AttentionProbs> probs;
};

// Causal scaled-dot-product attention over all heads of one layer.
// q is [T x n_heads*d_head]; k and v are [T x n_kv_heads*d_head]; query head
// h reads key/value group h / (n_heads / n_kv_heads). Heads whose entry in
// `head_active` is false contribute a zero context block. An empty
// `head_active` keeps every head.
AttentionOutput causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionGeometry& geometry,
                                 const std::vector<bool>& head_active = {});

}  // namespace mudaf
