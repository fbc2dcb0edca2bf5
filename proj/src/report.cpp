#include "mudaf/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "mudaf/errors.hpp"

namespace mudaf {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string num(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

// White to dark blue.
std::string shade(double v) {
    const double t = std::clamp(v, 0.0, 1.0);
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(255 - 225 * t), static_cast<int>(255 - 185 * t),
                  static_cast<int>(255 - 100 * t));
    return buf;
}

std::string svg_open(int w, int h) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" + std::to_string(h) +
           "\" font-family=\"sans-serif\" font-size=\"11\">\n";
}

}  // namespace

LayerHeatmap layer_heatmap(const Model& model, const MdqaSample& sample, const std::vector<std::size_t>& layers,
                           AttributionToken token) {
    require(!layers.empty(), ErrorKind::usage, "heatmap needs at least one layer");
    const ModelConfig& c = model.config();
    std::vector<HeadId> heads;
    for (std::size_t l : layers) {
        require(l < c.n_layers, ErrorKind::usage, "heatmap layer out of range");
        for (std::size_t h = 0; h < c.n_heads; ++h) heads.push_back({l, h});
    }
    const auto pas = passage_attention(model, sample, heads, token);
    LayerHeatmap map;
    map.layers = layers;
    map.n_passages = sample.passages.size();
    map.golden = sample.golden_indices;
    for (std::size_t r = 0; r < layers.size(); ++r) {
        std::vector<double> row(map.n_passages, 0.0);
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const auto& w = pas[r * c.n_heads + h].weights;
            for (std::size_t p = 0; p < map.n_passages; ++p) row[p] += w[p] / static_cast<double>(c.n_heads);
        }
        map.cells.push_back(std::move(row));
    }
    return map;
}

std::string heatmap_csv(const LayerHeatmap& map) {
    std::string out = "layer,passage,golden,weight\n";
    for (std::size_t r = 0; r < map.layers.size(); ++r) {
        for (std::size_t p = 0; p < map.n_passages; ++p) {
            const bool golden = std::find(map.golden.begin(), map.golden.end(), p) != map.golden.end();
            out += std::to_string(map.layers[r]) + "," + std::to_string(p) + "," + (golden ? "1" : "0") + "," +
                   num(map.cells[r][p]) + "\n";
        }
    }
    return out;
}

std::string heatmap_svg(const LayerHeatmap& map) {
    const int cell = 36, left = 70, top = 30;
    const int w = left + cell * static_cast<int>(map.n_passages) + 20;
    const int h = top + cell * static_cast<int>(map.layers.size()) + 20;
    std::string out = svg_open(w, h);
    out += "<text x=\"" + std::to_string(left) + "\" y=\"16\">passage attention by layer (golden outlined)</text>\n";
    for (std::size_t r = 0; r < map.layers.size(); ++r) {
        const int y = top + static_cast<int>(r) * cell;
        out += "<text x=\"4\" y=\"" + std::to_string(y + cell / 2 + 4) + "\">layer " + std::to_string(map.layers[r]) +
               "</text>\n";
        for (std::size_t p = 0; p < map.n_passages; ++p) {
            const int x = left + static_cast<int>(p) * cell;
            const bool golden = std::find(map.golden.begin(), map.golden.end(), p) != map.golden.end();
            out += "<rect class=\"cell\" x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
                   std::to_string(cell) + "\" height=\"" + std::to_string(cell) + "\" fill=\"" + shade(map.cells[r][p]) +
                   "\" stroke=\"" + (golden ? "#d62728" : "#cccccc") + "\" stroke-width=\"" + (golden ? "2" : "1") +
                   "\"><title>" + fmt(map.cells[r][p]) + "</title></rect>\n";
        }
    }
    return out + "</svg>\n";
}

std::vector<ScoreChange> score_changes(const HeadScoreTable& before, const HeadScoreTable& after,
                                       const std::vector<HeadId>& heads) {
    require(before.n_layers == after.n_layers && before.n_heads == after.n_heads, ErrorKind::usage,
            "score tables cover different model geometries");
    std::vector<ScoreChange> out;
    for (const auto& h : heads) {
        const HeadScore& b = before.at(h);
        const HeadScore& a = after.at(h);
        out.push_back({h, b.f1, a.f1, a.f1 - b.f1, b.rank, a.rank});
    }
    return out;
}

std::string score_changes_csv(const std::vector<ScoreChange>& changes) {
    std::string out = "layer,head,before,after,delta,old_rank,new_rank\n";
    for (const auto& c : changes) {
        out += std::to_string(c.head.layer) + "," + std::to_string(c.head.head) + "," + num(c.before) + "," + num(c.after) +
               "," + num(c.delta) + "," + std::to_string(c.old_rank) + "," + std::to_string(c.new_rank) + "\n";
    }
    return out;
}

std::string score_changes_svg(const std::vector<ScoreChange>& changes) {
    const int group = 44, left = 40, top = 30, plot_h = 200;
    const int w = left + group * static_cast<int>(changes.size()) + 20;
    std::string out = svg_open(w, top + plot_h + 40);
    out += "<text x=\"" + std::to_string(left) + "\" y=\"16\">retrieval F1 before (grey) and after (blue)</text>\n";
    out += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + std::to_string(top + plot_h) + "\" x2=\"" +
           std::to_string(w - 10) + "\" y2=\"" + std::to_string(top + plot_h) + "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < changes.size(); ++i) {
        const int x = left + static_cast<int>(i) * group + 4;
        const auto bar = [&](double v, int dx, const char* color) {
            const int hgt = static_cast<int>(std::clamp(v, 0.0, 1.0) * plot_h);
            return "<rect class=\"bar\" x=\"" + std::to_string(x + dx) + "\" y=\"" + std::to_string(top + plot_h - hgt) +
                   "\" width=\"16\" height=\"" + std::to_string(hgt) + "\" fill=\"" + color + "\"><title>" + fmt(v) +
                   "</title></rect>\n";
        };
        out += bar(changes[i].before, 0, "#999999");
        out += bar(changes[i].after, 18, "#1f77b4");
        out += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(top + plot_h + 16) + "\">" +
               changes[i].head.label() + "</text>\n";
    }
    return out + "</svg>\n";
}

std::string score_curve_csv(const HeadScoreTable& table) {
    std::string out = "rank,layer,head,f1,em\n";
    for (const auto& h : table.ranked()) {
        const HeadScore& s = table.at(h);
        out += std::to_string(s.rank) + "," + std::to_string(h.layer) + "," + std::to_string(h.head) + "," + num(s.f1) + "," +
               num(s.em) + "\n";
    }
    return out;
}

std::string score_curve_svg(const HeadScoreTable& table) {
    const auto ranked = table.ranked();
    const int left = 40, top = 30, plot_w = 480, plot_h = 200;
    std::string out = svg_open(left + plot_w + 20, top + plot_h + 40);
    out += "<text x=\"" + std::to_string(left) + "\" y=\"16\">head retrieval scores by rank: F1 (blue), EM (orange)</text>\n";
    out += "<rect x=\"" + std::to_string(left) + "\" y=\"" + std::to_string(top) + "\" width=\"" + std::to_string(plot_w) +
           "\" height=\"" + std::to_string(plot_h) + "\" fill=\"none\" stroke=\"black\"/>\n";
    const double step = ranked.size() > 1 ? static_cast<double>(plot_w) / static_cast<double>(ranked.size() - 1) : 0.0;
    for (int series = 0; series < 2; ++series) {
        std::string points;
        for (std::size_t i = 0; i < ranked.size(); ++i) {
            const HeadScore& s = table.at(ranked[i]);
            const double v = series == 0 ? s.f1 : s.em;
            points += fmt(left + step * static_cast<double>(i)) + "," + fmt(top + plot_h - std::clamp(v, 0.0, 1.0) * plot_h) + " ";
        }
        out += "<polyline fill=\"none\" stroke=\"" + std::string(series == 0 ? "#1f77b4" : "#ff7f0e") +
               "\" stroke-width=\"1.5\" points=\"" + points + "\"/>\n";
    }
    return out + "</svg>\n";
}

}  // namespace mudaf
