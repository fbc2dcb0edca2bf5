#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mudaf/corpus.hpp"
#include "mudaf/model.hpp"
#include "mudaf/retrieval.hpp"

namespace mudaf {

// Passage-level attention of whole layers: cell (r, p) is the mean over the
// heads of layers[r] of their attention mass on passage p.
struct LayerHeatmap {
    std::vector<std::size_t> layers;
    std::size_t n_passages = 0;
    std::vector<std::size_t> golden;
    std::vector<std::vector<double>> cells;
};

LayerHeatmap layer_heatmap(const Model& model, const MdqaSample& sample, const std::vector<std::size_t>& layers,
                           AttributionToken token);
std::string heatmap_csv(const LayerHeatmap& map);
// One <rect class="cell"> per (layer, passage).
std::string heatmap_svg(const LayerHeatmap& map);

struct ScoreChange {
    HeadId head;
    double before = 0.0;
    double after = 0.0;
    double delta = 0.0;
    std::size_t old_rank = 0;
    std::size_t new_rank = 0;
};

// F1 of `heads` in two tables over the same model geometry.
std::vector<ScoreChange> score_changes(const HeadScoreTable& before, const HeadScoreTable& after,
                                       const std::vector<HeadId>& heads);
std::string score_changes_csv(const std::vector<ScoreChange>& changes);
// Paired bars (before, after) per head.
std::string score_changes_svg(const std::vector<ScoreChange>& changes);

// Heads in rank order with their F1 and EM.
std::string score_curve_csv(const HeadScoreTable& table);
std::string score_curve_svg(const HeadScoreTable& table);

}  // namespace mudaf
