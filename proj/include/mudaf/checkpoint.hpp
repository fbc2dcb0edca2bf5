#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mudaf/model.hpp"

namespace mudaf {

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const HeadId& h);
void from_json(const nlohmann::json& j, HeadId& h);

// Persisted model state. On disk a checkpoint is a directory holding
// manifest.json (config, tensor names, shapes, byte offsets, SHA-256 of the
// blob) and weights.bin (little-endian float32, tensors back to back).
struct Checkpoint {
    ModelConfig config;
    std::vector<NamedTensor> weights;
    std::uint64_t step = 0;
    std::string rng_state;
};

Checkpoint make_checkpoint(const Model& model, std::uint64_t step = 0, std::string rng_state = {});
Model model_from_checkpoint(const Checkpoint& checkpoint);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& dir);
// Verifies the blob checksum and every tensor shape against the config.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Values as they survive a save/load cycle (rounded through float32).
Model round_to_storage_precision(const Model& model);

}  // namespace mudaf
