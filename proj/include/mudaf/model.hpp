#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mudaf/ops.hpp"
#include "mudaf/tensor.hpp"

namespace mudaf {

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 8;
    std::size_t n_kv_heads = 8;
    std::size_t d_model = 128;
    std::size_t d_head = 16;
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 512;
    std::size_t mlp_mult = 2;
    double rope_base = 10000.0;
    double norm_eps = 1e-5;
    double init_std = 0.02;

    std::size_t kv_dim() const { return n_kv_heads * d_head; }
    std::size_t mlp_hidden() const { return mlp_mult * d_model; }
    std::size_t total_heads() const { return n_layers * n_heads; }
    // Throws a config error when the architecture invariants do not hold.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

struct HeadId {
    std::size_t layer = 0;
    std::size_t head = 0;

    auto operator<=>(const HeadId&) const = default;
    // "layer-head", e.g. "2-5".
    std::string label() const;
};

// Flat index layer * n_heads + head.
std::size_t head_index(const HeadId& head, const ModelConfig& config);
HeadId head_from_index(std::size_t index, const ModelConfig& config);
std::vector<HeadId> all_heads(const ModelConfig& config);

// Key/value group shared by `head`: head / (n_heads / n_kv_heads).
std::size_t kv_group_of(const HeadId& head, const ModelConfig& config);

// What one head saw from one query position during a forward pass.
struct AttentionTrace {
    HeadId head;
    std::size_t query_token_index = 0;
    // One entry per sequence position; zero past the query position.
    std::vector<double> attn_row;
    // Post-rotary query projection of the query token, length d_head.
    std::vector<double> q_proj;
    // Post-rotary key projections of positions 0..query_token_index,
    // row-major [(query_token_index + 1) x d_head].
    std::vector<double> k_projs;
    std::size_t d_head = 0;

    std::span<const double> key(std::size_t position) const {
        return std::span<const double>(k_projs).subspan(position * d_head, d_head);
    }
    std::size_t key_count() const { return d_head ? k_projs.size() / d_head : 0; }
};

struct TraceRequest {
    HeadId head;
    std::size_t query_index = 0;
};

struct ForwardOptions {
    std::vector<TraceRequest> traces;
    std::set<HeadId> masked_heads;
    // Layers whose post-rotary Q and K projections are returned as live
    // tensors (for losses defined on them).
    std::set<std::size_t> capture_layers;
    // Removes every attention block; the attention-free reference path.
    bool skip_attention = false;
};

struct LayerProjections {
    std::size_t layer = 0;
    Tensor q;  // [T x n_heads*d_head]
    Tensor k;  // [T x n_kv_heads*d_head]
};

struct ForwardResult {
    Tensor logits;  // [T x vocab]
    std::vector<AttentionTrace> traces;
    std::vector<LayerProjections> projections;

    const LayerProjections& projections_for(std::size_t layer) const;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Pre-norm decoder-only transformer: RMSNorm, rotary attention with optional
// grouped key/value heads, SiLU-gated MLP, untied output head.
class Model {
public:
    // Scaled-normal initialization; residual output projections use
    // init_std / sqrt(2 * n_layers), norm gains start at 1.
    Model(ModelConfig config, std::uint64_t seed);
    // Adopts existing weights; names and shapes must match the config.
    Model(ModelConfig config, std::vector<NamedTensor> weights);

    const ModelConfig& config() const { return config_; }
    const std::vector<NamedTensor>& parameters() const { return params_; }
    const Tensor& parameter(const std::string& name) const;
    std::size_t parameter_count() const;

    ForwardResult forward(std::span<const TokenId> tokens, const ForwardOptions& options = {}) const;

    // Deep copy with fresh leaf tensors.
    Model clone() const;
    void zero_grad();

    static std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

private:
    struct Layer {
        Tensor attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down;
    };

    void bind();

    ModelConfig config_;
    std::vector<NamedTensor> params_;
    Tensor tok_emb_, final_norm_, lm_head_;
    std::vector<Layer> layers_;
};

}  // namespace mudaf
