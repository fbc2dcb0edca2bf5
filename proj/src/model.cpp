#include "mudaf/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mudaf/errors.hpp"
#include "mudaf/rng.hpp"

namespace mudaf {

void ModelConfig::validate() const {
    require(n_layers > 0 && n_heads > 0 && n_kv_heads > 0 && d_model > 0 && d_head > 0, ErrorKind::config,
            "model dimensions must be positive");
    require(n_heads * d_head == d_model, ErrorKind::config, "n_heads * d_head must equal d_model");
    require(n_heads % n_kv_heads == 0, ErrorKind::config, "n_kv_heads must divide n_heads");
    require(d_head % 2 == 0, ErrorKind::config, "d_head must be even for rotary embeddings");
    require(vocab_size > 0, ErrorKind::config, "vocab_size must be positive");
    require(max_seq_len > 0, ErrorKind::config, "max_seq_len must be positive");
    require(mlp_mult > 0, ErrorKind::config, "mlp_mult must be positive");
    require(rope_base > 1.0 && norm_eps > 0.0 && init_std > 0.0, ErrorKind::config,
            "rope_base, norm_eps and init_std must be positive");
}

std::string HeadId::label() const { return std::to_string(layer) + "-" + std::to_string(head); }

std::size_t head_index(const HeadId& head, const ModelConfig& config) {
    require(head.layer < config.n_layers && head.head < config.n_heads, ErrorKind::usage,
            "head " + head.label() + " out of range");
    return head.layer * config.n_heads + head.head;
}

HeadId head_from_index(std::size_t index, const ModelConfig& config) {
    require(index < config.total_heads(), ErrorKind::usage, "head index out of range");
    return {index / config.n_heads, index % config.n_heads};
}

std::vector<HeadId> all_heads(const ModelConfig& config) {
    std::vector<HeadId> heads;
    heads.reserve(config.total_heads());
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        for (std::size_t h = 0; h < config.n_heads; ++h) heads.push_back({l, h});
    }
    return heads;
}

std::size_t kv_group_of(const HeadId& head, const ModelConfig& config) {
    return head.head / (config.n_heads / config.n_kv_heads);
}

const LayerProjections& ForwardResult::projections_for(std::size_t layer) const {
    for (const auto& p : projections) {
        if (p.layer == layer) return p;
    }
    fail(ErrorKind::usage, "projections for layer " + std::to_string(layer) + " were not captured");
}

std::vector<std::pair<std::string, Shape>> Model::parameter_layout(const ModelConfig& c) {
    std::vector<std::pair<std::string, Shape>> layout;
    layout.emplace_back("tok_emb", Shape{c.vocab_size, c.d_model});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        layout.emplace_back(p + "attn_norm", Shape{c.d_model});
        layout.emplace_back(p + "wq", Shape{c.d_model, c.n_heads * c.d_head});
        layout.emplace_back(p + "wk", Shape{c.d_model, c.kv_dim()});
        layout.emplace_back(p + "wv", Shape{c.d_model, c.kv_dim()});
        layout.emplace_back(p + "wo", Shape{c.n_heads * c.d_head, c.d_model});
        layout.emplace_back(p + "mlp_norm", Shape{c.d_model});
        layout.emplace_back(p + "w_gate", Shape{c.d_model, c.mlp_hidden()});
        layout.emplace_back(p + "w_up", Shape{c.d_model, c.mlp_hidden()});
        layout.emplace_back(p + "w_down", Shape{c.mlp_hidden(), c.d_model});
    }
    layout.emplace_back("final_norm", Shape{c.d_model});
    layout.emplace_back("lm_head", Shape{c.d_model, c.vocab_size});
    return layout;
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const double residual_std = config_.init_std / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
    for (auto& [name, shape] : parameter_layout(config_)) {
        const std::size_t n = shape_numel(shape);
        std::vector<double> values(n);
        const bool is_norm = name.ends_with("norm");
        const bool is_residual = name.ends_with(".wo") || name.ends_with(".w_down");
        const double std = is_residual ? residual_std : config_.init_std;
        for (double& v : values) v = is_norm ? 1.0 : std * rng.normal();
        params_.push_back({name, Tensor::from_data(shape, std::move(values), true)});
    }
    bind();
}

Model::Model(ModelConfig config, std::vector<NamedTensor> weights) : config_(std::move(config)) {
    config_.validate();
    std::map<std::string, Tensor> by_name;
    for (auto& w : weights) by_name[w.name] = w.tensor;
    for (auto& [name, shape] : parameter_layout(config_)) {
        auto it = by_name.find(name);
        require(it != by_name.end(), ErrorKind::input, "missing weight tensor '" + name + "'");
        require(it->second.shape() == shape, ErrorKind::dimension,
                "weight '" + name + "' has shape " + shape_string(it->second.shape()) + ", expected " + shape_string(shape));
        params_.push_back({name, Tensor::from_data(shape, it->second.to_vector(), true)});
    }
    require(by_name.size() == params_.size(), ErrorKind::input, "unexpected extra weight tensors");
    bind();
}

void Model::bind() {
    std::size_t i = 0;
    tok_emb_ = params_[i++].tensor;
    layers_.clear();
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        Layer layer;
        layer.attn_norm = params_[i++].tensor;
        layer.wq = params_[i++].tensor;
        layer.wk = params_[i++].tensor;
        layer.wv = params_[i++].tensor;
        layer.wo = params_[i++].tensor;
        layer.mlp_norm = params_[i++].tensor;
        layer.w_gate = params_[i++].tensor;
        layer.w_up = params_[i++].tensor;
        layer.w_down = params_[i++].tensor;
        layers_.push_back(std::move(layer));
    }
    final_norm_ = params_[i++].tensor;
    lm_head_ = params_[i++].tensor;
}

const Tensor& Model::parameter(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return p.tensor;
    }
    fail(ErrorKind::usage, "no parameter named '" + name + "'");
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

Model Model::clone() const { return Model(config_, params_); }

void Model::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

ForwardResult Model::forward(std::span<const TokenId> tokens, const ForwardOptions& options) const {
    const std::size_t T = tokens.size();
    require(T > 0, ErrorKind::input, "forward: empty token sequence");
    require(T <= config_.max_seq_len, ErrorKind::input,
            "forward: sequence of " + std::to_string(T) + " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    for (const auto& req : options.traces) {
        head_index(req.head, config_);
        require(req.query_index < T, ErrorKind::usage, "trace request query index past the end of the sequence");
        require(!options.skip_attention, ErrorKind::usage, "cannot trace heads with attention skipped");
    }
    for (const auto& head : options.masked_heads) head_index(head, config_);

    const std::size_t dh = config_.d_head;
    const AttentionGeometry geometry{config_.n_heads, config_.n_kv_heads, dh};
    ForwardResult result;
    result.traces.resize(options.traces.size());

    Tensor x = embedding(tok_emb_, tokens);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const Layer& layer = layers_[l];
        if (!options.skip_attention) {
            Tensor h = rms_norm(x, layer.attn_norm, config_.norm_eps);
            Tensor q = rope(matmul(h, layer.wq), dh, config_.rope_base);
            Tensor k = rope(matmul(h, layer.wk), dh, config_.rope_base);
            Tensor v = matmul(h, layer.wv);
            std::vector<bool> active(config_.n_heads, true);
            for (const auto& head : options.masked_heads) {
                if (head.layer == l) active[head.head] = false;
            }
            AttentionOutput att = causal_attention(q, k, v, geometry, active);

            for (std::size_t r = 0; r < options.traces.size(); ++r) {
                const TraceRequest& req = options.traces[r];
                if (req.head.layer != l) continue;
                AttentionTrace& trace = result.traces[r];
                trace.head = req.head;
                trace.query_token_index = req.query_index;
                trace.d_head = dh;
                const auto row_values = att.probs->row(req.head.head, req.query_index);
                trace.attn_row.assign(row_values.begin(), row_values.end());
                const auto qd = q.data();
                const std::size_t qw = q.cols();
                trace.q_proj.assign(qd.begin() + req.query_index * qw + req.head.head * dh,
                                    qd.begin() + req.query_index * qw + (req.head.head + 1) * dh);
                const auto kd = k.data();
                const std::size_t kw = k.cols();
                const std::size_t group = kv_group_of(req.head, config_);
                trace.k_projs.resize((req.query_index + 1) * dh);
                for (std::size_t t = 0; t <= req.query_index; ++t) {
                    std::copy_n(kd.begin() + t * kw + group * dh, dh, trace.k_projs.begin() + t * dh);
                }
            }
            if (options.capture_layers.contains(l)) result.projections.push_back({l, q, k});
            x = add(x, matmul(att.context, layer.wo));
        }
        Tensor h2 = rms_norm(x, layer.mlp_norm, config_.norm_eps);
        Tensor gated = mul(silu(matmul(h2, layer.w_gate)), matmul(h2, layer.w_up));
        x = add(x, matmul(gated, layer.w_down));
    }
    result.logits = matmul(rms_norm(x, final_norm_, config_.norm_eps), lm_head_);
    return result;
}

}  // namespace mudaf
