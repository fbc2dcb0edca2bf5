#include "mudaf/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "json_util.hpp"
#include "mudaf/errors.hpp"
#include "mudaf/hashing.hpp"

namespace mudaf {

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads},
                       {"d_model", c.d_model},       {"d_head", c.d_head},         {"vocab_size", c.vocab_size},
                       {"max_seq_len", c.max_seq_len}, {"mlp_mult", c.mlp_mult},   {"rope_base", c.rope_base},
                       {"norm_eps", c.norm_eps},     {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    detail::check_keys(j,
                       {"n_layers", "n_heads", "n_kv_heads", "d_model", "d_head", "vocab_size", "max_seq_len", "mlp_mult",
                        "rope_base", "norm_eps", "init_std"},
                       "model config");
    detail::read_optional(j, "n_layers", c.n_layers);
    detail::read_optional(j, "n_heads", c.n_heads);
    detail::read_optional(j, "n_kv_heads", c.n_kv_heads);
    detail::read_optional(j, "d_model", c.d_model);
    detail::read_optional(j, "d_head", c.d_head);
    detail::read_optional(j, "vocab_size", c.vocab_size);
    detail::read_optional(j, "max_seq_len", c.max_seq_len);
    detail::read_optional(j, "mlp_mult", c.mlp_mult);
    detail::read_optional(j, "rope_base", c.rope_base);
    detail::read_optional(j, "norm_eps", c.norm_eps);
    detail::read_optional(j, "init_std", c.init_std);
}

void to_json(nlohmann::json& j, const HeadId& h) { j = nlohmann::json{{"layer", h.layer}, {"head", h.head}}; }

void from_json(const nlohmann::json& j, HeadId& h) {
    detail::check_keys(j, {"layer", "head"}, "head id");
    require(j.contains("layer") && j.contains("head"), ErrorKind::input, "head id needs 'layer' and 'head'");
    h.layer = j.at("layer").get<std::size_t>();
    h.head = j.at("head").get<std::size_t>();
}

Checkpoint make_checkpoint(const Model& model, std::uint64_t step, std::string rng_state) {
    Checkpoint ckpt;
    ckpt.config = model.config();
    for (const auto& p : model.parameters()) ckpt.weights.push_back({p.name, p.tensor.detach()});
    ckpt.step = step;
    ckpt.rng_state = std::move(rng_state);
    return ckpt;
}

Model model_from_checkpoint(const Checkpoint& checkpoint) { return Model(checkpoint.config, checkpoint.weights); }

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir) {
    std::string blob;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& w : checkpoint.weights) {
        const std::size_t offset = blob.size();
        for (double v : w.tensor.data()) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
        }
        tensors.push_back({{"name", w.name}, {"shape", w.tensor.shape()}, {"offset", offset}, {"count", w.tensor.numel()}});
    }
    nlohmann::json manifest{{"format", "mudaf-checkpoint-v1"},
                            {"config", checkpoint.config},
                            {"step", checkpoint.step},
                            {"rng_state", checkpoint.rng_state},
                            {"blob", "weights.bin"},
                            {"dtype", "float32-le"},
                            {"tensors", tensors},
                            {"checksum", "sha256:" + sha256_hex(blob)}};
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / "weights.bin", blob);
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const nlohmann::json manifest = detail::parse_json(read_file(dir / "manifest.json"), "checkpoint manifest");
    require(manifest.value("format", "") == "mudaf-checkpoint-v1", ErrorKind::input, "unsupported checkpoint format");
    const std::string blob = read_file(dir / manifest.at("blob").get<std::string>());
    require("sha256:" + sha256_hex(blob) == manifest.at("checksum").get<std::string>(), ErrorKind::input,
            "checkpoint blob checksum mismatch in " + dir.string());

    Checkpoint ckpt;
    ckpt.config = manifest.at("config").get<ModelConfig>();
    ckpt.step = manifest.at("step").get<std::uint64_t>();
    ckpt.rng_state = manifest.at("rng_state").get<std::string>();
    for (const auto& t : manifest.at("tensors")) {
        const Shape shape = t.at("shape").get<Shape>();
        const std::size_t offset = t.at("offset").get<std::size_t>();
        const std::size_t count = t.at("count").get<std::size_t>();
        require(count == shape_numel(shape) && offset + 4 * count <= blob.size(), ErrorKind::input,
                "checkpoint tensor '" + t.at("name").get<std::string>() + "' is inconsistent with the blob");
        std::vector<double> values(count);
        for (std::size_t i = 0; i < count; ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) {
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[offset + 4 * i + b])) << (8 * b);
            }
            values[i] = static_cast<double>(std::bit_cast<float>(bits));
        }
        ckpt.weights.push_back({t.at("name").get<std::string>(), Tensor::from_data(shape, std::move(values), true)});
    }
    // Shape validation against the config happens in the Model constructor.
    Model(ckpt.config, ckpt.weights);
    return ckpt;
}

Model round_to_storage_precision(const Model& model) {
    std::vector<NamedTensor> rounded;
    for (const auto& p : model.parameters()) {
        std::vector<double> values = p.tensor.to_vector();
        for (double& v : values) v = static_cast<double>(static_cast<float>(v));
        rounded.push_back({p.name, Tensor::from_data(p.tensor.shape(), std::move(values), true)});
    }
    return Model(model.config(), std::move(rounded));
}

}  // namespace mudaf
