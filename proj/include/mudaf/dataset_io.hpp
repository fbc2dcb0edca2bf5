#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mudaf/corpus.hpp"

namespace mudaf {

// One JSON object per sample: texts are space-joined tokens, spans are
// [begin, end) pairs against the rendered prompt.
nlohmann::json sample_to_json(const MdqaSample& sample, const Vocabulary& vocab);
// Re-encodes and re-renders the sample; stored spans must match the rendering.
MdqaSample sample_from_json(const nlohmann::json& j, const Corpus& corpus);

std::string dataset_to_jsonl(const std::vector<MdqaSample>& samples, const Vocabulary& vocab);
std::vector<MdqaSample> dataset_from_jsonl(std::string_view text, const Corpus& corpus);

void write_dataset(const std::filesystem::path& path, const std::vector<MdqaSample>& samples, const Vocabulary& vocab);
std::vector<MdqaSample> read_dataset(const std::filesystem::path& path, const Corpus& corpus);

}  // namespace mudaf
