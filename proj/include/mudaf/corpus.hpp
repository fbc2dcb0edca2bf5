#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "mudaf/ops.hpp"

namespace mudaf {

// Knobs of the synthetic multi-document QA generator.
struct CorpusConfig {
    std::size_t n_passages = 10;
    // 1 gives single-fact questions; n > 1 chains n - 1 "friend" links
    // before the queried fact, spreading the evidence over n passages.
    std::size_t n_golden = 1;
    std::size_t entities_per_passage = 1;
    std::size_t n_entities = 64;
    // Attribute schemas questions may ask about.
    std::vector<std::string> attributes = {"color", "city", "job", "pet"};
    std::size_t max_seq_len = 512;

    void validate() const;
    bool operator==(const CorpusConfig&) const = default;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

// Closed whitespace vocabulary; ids are assigned in grammar order.
class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> words);

    std::size_t size() const { return words_.size(); }
    TokenId id(std::string_view word) const;
    bool contains(std::string_view word) const;
    const std::string& word(TokenId id) const;
    const std::vector<std::string>& words() const { return words_; }

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, TokenId> index_;
};

Vocabulary build_vocab(const CorpusConfig& config);

// Special tokens of the prompt template.
inline constexpr std::string_view kEosToken = "</s>";
inline constexpr std::string_view kPassagesOpen = "<passages>";
inline constexpr std::string_view kPassagesClose = "</passages>";
inline constexpr std::string_view kQuestionCue = "question:";
inline constexpr std::string_view kAnswerCue = "answer:";

// Half-open token range.
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
    bool operator==(const Span&) const = default;
};

struct PromptLayout {
    std::vector<TokenId> tokens;
    std::vector<Span> passage_spans;
    Span question_span;
    // Final token of the question text; the contrastive query position.
    std::size_t question_last_token_index = 0;
    // Answer tokens only; the end-of-sequence token sits at answer_span.end.
    Span answer_span;
    // The answer cue, i.e. the last token before the answer; generation and
    // default head scoring start here.
    std::size_t prompt_last_token_index = 0;

    std::size_t eos_index() const { return answer_span.end; }
    // Tokens up to and including the answer cue.
    std::span<const TokenId> prompt() const {
        return std::span<const TokenId>(tokens).first(prompt_last_token_index + 1);
    }
    bool operator==(const PromptLayout&) const = default;
};

struct Passage {
    std::vector<TokenId> tokens;
    bool is_golden = false;
    std::vector<std::size_t> entities;
    Span span;

    bool operator==(const Passage&) const = default;
};

enum class SampleKind { mdqa, needle };

struct MdqaSample {
    SampleKind kind = SampleKind::mdqa;
    std::uint64_t seed = 0;
    std::vector<Passage> passages;
    std::vector<TokenId> question;
    std::vector<TokenId> answer;
    std::vector<std::size_t> golden_indices;
    PromptLayout layout;

    bool operator==(const MdqaSample&) const = default;
};

// Which token's attention row attributes retrieval to passages.
enum class AttributionToken { prompt_last, question_last };
std::string_view to_string(AttributionToken token);
AttributionToken attribution_token_from_string(std::string_view text);
std::size_t attribution_index(const PromptLayout& layout, AttributionToken token);

// Deterministic generator of multi-document QA samples over a fixed grammar:
// each passage states entity-attribute facts, golden passages hold the
// queried fact, distractors reuse the question's schema with other entities
// and never contain the answer.
class Corpus {
public:
    explicit Corpus(CorpusConfig config);

    const CorpusConfig& config() const { return config_; }
    const Vocabulary& vocab() const { return vocab_; }

    MdqaSample generate_sample(std::uint64_t seed) const;
    // Copy-paste probe: one passage holds "the secret code is X", the rest
    // are unrelated facts; the question asks for the code.
    MdqaSample generate_needle_sample(std::uint64_t seed) const;
    // Throws a length error when the prompt exceeds max_seq_len.
    PromptLayout render_prompt(const MdqaSample& sample) const;
    MdqaSample shuffle_passages(const MdqaSample& sample, std::uint64_t seed) const;
    // Applies an explicit permutation: new position i holds old passage order[i].
    MdqaSample permute_passages(const MdqaSample& sample, const std::vector<std::size_t>& order) const;

    // Sample i uses seed derive_seed(master_seed, stream, i).
    std::vector<MdqaSample> generate_dataset(std::size_t n, std::uint64_t master_seed,
                                             SampleKind kind = SampleKind::mdqa) const;

    // Longest prompt the grammar can render under this config.
    std::size_t max_rendered_length() const;

private:
    struct Schema {
        std::string name;
        std::vector<TokenId> fact_prefix;  // between the value and the entity
        std::vector<TokenId> question;     // before the entity
        std::vector<TokenId> values;
        TokenId terminator = 0;            // "."
    };

    std::vector<TokenId> fact_tokens(const Schema& schema, std::size_t entity, TokenId value) const;
    std::vector<TokenId> friend_tokens(std::size_t a, std::size_t b) const;
    TokenId entity_token(std::size_t entity) const;

    CorpusConfig config_;
    Vocabulary vocab_;
    std::vector<Schema> schemas_;  // only configured attributes
    std::vector<TokenId> instruction_;
    std::vector<TokenId> friend_link_;      // "is the friend of"
    std::vector<TokenId> friend_question_;  // "the friend of"
    std::vector<TokenId> needle_fact_;      // "the secret code is"
    std::vector<TokenId> needle_question_;  // "which code is secret"
    std::vector<TokenId> needle_values_;
    TokenId period_ = 0, eos_ = 0, open_ = 0, close_ = 0, question_cue_ = 0, answer_cue_ = 0;
};

}  // namespace mudaf
