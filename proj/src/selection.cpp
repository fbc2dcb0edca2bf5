#include "mudaf/selection.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json_util.hpp"
#include "mudaf/checkpoint.hpp"
#include "mudaf/errors.hpp"
#include "mudaf/rng.hpp"

namespace mudaf {

std::string_view to_string(SelectionMode mode) {
    switch (mode) {
        case SelectionMode::weighted: return "weighted";
        case SelectionMode::greedy: return "greedy";
        case SelectionMode::weak: return "weak";
    }
    return "weighted";
}

SelectionMode selection_mode_from_string(std::string_view text) {
    if (text == "weighted") return SelectionMode::weighted;
    if (text == "greedy") return SelectionMode::greedy;
    if (text == "weak") return SelectionMode::weak;
    fail(ErrorKind::config, "unknown selection mode '" + std::string(text) + "'");
}

void to_json(nlohmann::json& j, const SelectionConfig& c) {
    j = nlohmann::json{{"temperature", c.temperature}, {"k", c.k}, {"mode", to_string(c.mode)}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SelectionConfig& c) {
    detail::check_keys(j, {"temperature", "k", "mode", "seed"}, "selection config");
    detail::read_optional(j, "temperature", c.temperature);
    detail::read_optional(j, "k", c.k);
    detail::read_optional(j, "seed", c.seed);
    if (j.contains("mode")) {
        std::string text;
        detail::read_optional(j, "mode", text);
        c.mode = selection_mode_from_string(text);
    }
    require(c.temperature > 0.0, ErrorKind::config, "selection temperature must be positive");
}

std::vector<double> selection_distribution(const HeadScoreTable& scores, double temperature) {
    require(temperature > 0.0, ErrorKind::config, "selection temperature must be positive");
    require(!scores.rows.empty(), ErrorKind::usage, "selection_distribution: empty score table");
    double peak = scores.rows.front().f1;
    for (const auto& r : scores.rows) peak = std::max(peak, r.f1);
    std::vector<double> p;
    double total = 0.0;
    for (const auto& r : scores.rows) {
        p.push_back(std::exp((r.f1 - peak) / temperature));
        total += p.back();
    }
    for (double& v : p) v /= total;
    return p;
}

std::vector<HeadId> weak_heads(const HeadScoreTable& scores, std::size_t k, std::uint64_t seed) {
    std::vector<HeadId> pool;
    for (const auto& r : scores.rows) {
        if (r.f1 < kWeakHeadBound) pool.push_back(r.head);
    }
    require(pool.size() >= k, ErrorKind::selection,
            "only " + std::to_string(pool.size()) + " heads have F1 below " + std::to_string(kWeakHeadBound) + ", " +
                std::to_string(k) + " requested");
    Rng rng(seed);
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    pool.resize(k);
    return pool;
}

std::vector<HeadId> sample_heads(const HeadScoreTable& scores, const SelectionConfig& config) {
    require(config.temperature > 0.0, ErrorKind::config, "selection temperature must be positive");
    require(config.k <= scores.rows.size(), ErrorKind::config,
            "cannot select " + std::to_string(config.k) + " heads from " + std::to_string(scores.rows.size()));
    if (config.mode == SelectionMode::greedy) return scores.top_k(config.k);
    if (config.mode == SelectionMode::weak) return weak_heads(scores, config.k, config.seed);

    std::vector<double> weights = selection_distribution(scores, config.temperature);
    std::vector<bool> taken(weights.size(), false);
    Rng rng(config.seed);
    std::vector<HeadId> picked;
    for (std::size_t draw = 0; draw < config.k; ++draw) {
        double total = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) total += taken[i] ? 0.0 : weights[i];
        const double u = rng.uniform() * total;
        double acc = 0.0;
        std::size_t choice = weights.size();
        std::size_t last_free = weights.size();
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (taken[i]) continue;
            last_free = i;
            acc += weights[i];
            if (u < acc) {
                choice = i;
                break;
            }
        }
        // Rounding can leave u just past the final cumulative sum.
        if (choice == weights.size()) choice = last_free;
        // Every remaining weight may underflow to zero at tiny temperatures.
        if (total == 0.0) {
            std::vector<std::size_t> free;
            for (std::size_t i = 0; i < weights.size(); ++i) {
                if (!taken[i]) free.push_back(i);
            }
            choice = free[rng.below(free.size())];
        }
        taken[choice] = true;
        picked.push_back(scores.rows[choice].head);
    }
    return picked;
}

nlohmann::json heads_to_json(const std::vector<HeadId>& heads) { return heads; }

std::vector<HeadId> heads_from_json(const nlohmann::json& j) {
    require(j.is_array(), ErrorKind::input, "head list must be a JSON array");
    std::vector<HeadId> heads;
    try {
        for (const auto& h : j) heads.push_back(h.get<HeadId>());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::input, std::string("malformed head list: ") + e.what());
    }
    require(std::set<HeadId>(heads.begin(), heads.end()).size() == heads.size(), ErrorKind::input,
            "head list contains duplicates");
    return heads;
}

}  // namespace mudaf
