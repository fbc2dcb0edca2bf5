#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mudaf/model.hpp"
#include "mudaf/retrieval.hpp"

namespace mudaf {

enum class SelectionMode { weighted, greedy, weak };
std::string_view to_string(SelectionMode mode);
SelectionMode selection_mode_from_string(std::string_view text);

// F1 bound below which a head counts as weak.
inline constexpr double kWeakHeadBound = 0.1;

struct SelectionConfig {
    double temperature = 0.05;
    std::size_t k = 8;
    SelectionMode mode = SelectionMode::weighted;
    std::uint64_t seed = 0;

    bool operator==(const SelectionConfig&) const = default;
};

void to_json(nlohmann::json& j, const SelectionConfig& c);
void from_json(const nlohmann::json& j, SelectionConfig& c);

// softmax(f1 / temperature) over the table rows, in row order.
std::vector<double> selection_distribution(const HeadScoreTable& scores, double temperature);

// k distinct heads: weighted mode draws sequentially from the selection
// distribution, renormalizing over the heads not yet drawn; greedy takes the
// top k by rank; weak delegates to weak_heads.
std::vector<HeadId> sample_heads(const HeadScoreTable& scores, const SelectionConfig& config);

// k heads drawn uniformly among those with f1 below kWeakHeadBound.
std::vector<HeadId> weak_heads(const HeadScoreTable& scores, std::size_t k, std::uint64_t seed);

nlohmann::json heads_to_json(const std::vector<HeadId>& heads);
std::vector<HeadId> heads_from_json(const nlohmann::json& j);

}  // namespace mudaf
