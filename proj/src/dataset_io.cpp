#include "mudaf/dataset_io.hpp"

#include <sstream>

#include "json_util.hpp"
#include "mudaf/errors.hpp"
#include "mudaf/hashing.hpp"

namespace mudaf {

namespace {

nlohmann::json span_json(const Span& s) { return nlohmann::json::array({s.begin, s.end}); }

Span span_from(const nlohmann::json& j) {
    require(j.is_array() && j.size() == 2, ErrorKind::input, "span must be a [begin, end] pair");
    return {j[0].get<std::size_t>(), j[1].get<std::size_t>()};
}

}  // namespace

nlohmann::json sample_to_json(const MdqaSample& sample, const Vocabulary& vocab) {
    nlohmann::json passages = nlohmann::json::array();
    for (const auto& p : sample.passages) {
        passages.push_back({{"text", vocab.decode(p.tokens)},
                            {"is_golden", p.is_golden},
                            {"entities", p.entities},
                            {"span", span_json(p.span)}});
    }
    const PromptLayout& l = sample.layout;
    nlohmann::json passage_spans = nlohmann::json::array();
    for (const auto& s : l.passage_spans) passage_spans.push_back(span_json(s));
    return {{"kind", sample.kind == SampleKind::mdqa ? "mdqa" : "needle"},
            {"seed", sample.seed},
            {"passages", passages},
            {"question", vocab.decode(sample.question)},
            {"answer", vocab.decode(sample.answer)},
            {"golden_indices", sample.golden_indices},
            {"layout",
             {{"length", l.tokens.size()},
              {"passage_spans", passage_spans},
              {"question_span", span_json(l.question_span)},
              {"question_last_token_index", l.question_last_token_index},
              {"answer_span", span_json(l.answer_span)},
              {"prompt_last_token_index", l.prompt_last_token_index}}}};
}

MdqaSample sample_from_json(const nlohmann::json& j, const Corpus& corpus) {
    detail::check_keys(j, {"kind", "seed", "passages", "question", "answer", "golden_indices", "layout"}, "dataset sample");
    const Vocabulary& vocab = corpus.vocab();
    MdqaSample s;
    try {
        const std::string kind = j.at("kind").get<std::string>();
        require(kind == "mdqa" || kind == "needle", ErrorKind::input, "unknown sample kind '" + kind + "'");
        s.kind = kind == "mdqa" ? SampleKind::mdqa : SampleKind::needle;
        s.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& p : j.at("passages")) {
            Passage passage;
            passage.tokens = vocab.encode(p.at("text").get<std::string>());
            passage.is_golden = p.at("is_golden").get<bool>();
            passage.entities = p.at("entities").get<std::vector<std::size_t>>();
            passage.span = span_from(p.at("span"));
            s.passages.push_back(std::move(passage));
        }
        s.question = vocab.encode(j.at("question").get<std::string>());
        s.answer = vocab.encode(j.at("answer").get<std::string>());
        s.golden_indices = j.at("golden_indices").get<std::vector<std::size_t>>();
        s.layout = corpus.render_prompt(s);
        const auto& l = j.at("layout");
        bool same = l.at("length").get<std::size_t>() == s.layout.tokens.size() &&
                    l.at("question_span") == span_json(s.layout.question_span) &&
                    l.at("answer_span") == span_json(s.layout.answer_span) &&
                    l.at("question_last_token_index").get<std::size_t>() == s.layout.question_last_token_index &&
                    l.at("prompt_last_token_index").get<std::size_t>() == s.layout.prompt_last_token_index &&
                    l.at("passage_spans").size() == s.layout.passage_spans.size();
        for (std::size_t i = 0; same && i < s.passages.size(); ++i) {
            same = l.at("passage_spans")[i] == span_json(s.layout.passage_spans[i]) &&
                   s.passages[i].span == s.layout.passage_spans[i];
        }
        require(same, ErrorKind::input, "stored spans disagree with the rendered prompt");
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::input, std::string("malformed dataset sample: ") + e.what());
    }
    std::vector<std::size_t> golden;
    for (std::size_t i = 0; i < s.passages.size(); ++i) {
        if (s.passages[i].is_golden) golden.push_back(i);
    }
    require(!golden.empty() && golden == s.golden_indices, ErrorKind::input,
            "golden_indices disagree with the passages' golden flags");
    return s;
}

std::string dataset_to_jsonl(const std::vector<MdqaSample>& samples, const Vocabulary& vocab) {
    std::string out;
    for (const auto& s : samples) out += sample_to_json(s, vocab).dump() + "\n";
    return out;
}

std::vector<MdqaSample> dataset_from_jsonl(std::string_view text, const Corpus& corpus) {
    std::vector<MdqaSample> samples;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            samples.push_back(sample_from_json(detail::parse_json(line, "dataset line"), corpus));
        } catch (const Error& e) {
            fail(e.kind(), "line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return samples;
}

void write_dataset(const std::filesystem::path& path, const std::vector<MdqaSample>& samples, const Vocabulary& vocab) {
    write_file_atomic(path, dataset_to_jsonl(samples, vocab));
}

std::vector<MdqaSample> read_dataset(const std::filesystem::path& path, const Corpus& corpus) {
    return dataset_from_jsonl(read_file(path), corpus);
}

}  // namespace mudaf
