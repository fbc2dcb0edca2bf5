#include "mudaf/corpus.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <sstream>

#include "json_util.hpp"
#include "mudaf/errors.hpp"
#include "mudaf/rng.hpp"

namespace mudaf {

namespace {

struct SchemaGrammar {
    const char* name;
    const char* fact;
    const char* question;
    std::array<const char*, 12> values;
};

constexpr std::array<SchemaGrammar, 4> kSchemas{{
    {"color", "is the color liked by", "which color is liked by",
     {"red", "blue", "green", "yellow", "purple", "orange", "white", "black", "gray", "pink", "brown", "gold"}},
    {"city", "is the city of", "which city is home to",
     {"paris", "rome", "oslo", "lima", "cairo", "tokyo", "delhi", "quito", "kyiv", "seoul", "dakar", "hanoi"}},
    {"job", "is the job of", "which job is done by",
     {"baker", "pilot", "nurse", "judge", "chef", "tailor", "miner", "poet", "smith", "farmer", "sailor", "clerk"}},
    {"pet", "is the pet of", "which pet is owned by",
     {"cat", "dog", "horse", "parrot", "snake", "rabbit", "turtle", "hamster", "goat", "lizard", "ferret", "mouse"}},
}};

constexpr const char* kInstruction = "based on the following passages , answer the question .";
constexpr const char* kFriendLink = "is the friend of";
constexpr const char* kFriendQuestion = "the friend of";
constexpr const char* kNeedleFact = "the secret code is";
constexpr const char* kNeedleQuestion = "which code is secret";
constexpr std::array<const char*, 12> kNeedleValues{"alpha", "bravo", "charlie", "delta", "echo", "foxtrot",
                                                    "golf", "hotel", "india", "juliet", "kilo", "zulu"};

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) words.push_back(w);
    return words;
}

std::uint64_t stream_for(SampleKind kind) { return kind == SampleKind::mdqa ? 0x6d647161ULL : 0x6e656564ULL; }

template <typename T>
void shuffle_in_place(std::vector<T>& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);
}

}  // namespace

void CorpusConfig::validate() const {
    require(n_passages >= 1, ErrorKind::config, "n_passages must be at least 1");
    require(n_golden >= 1, ErrorKind::config, "n_golden must be at least 1");
    require(n_golden <= n_passages, ErrorKind::config,
            "n_golden (" + std::to_string(n_golden) + ") exceeds n_passages (" + std::to_string(n_passages) + ")");
    require(entities_per_passage >= 1, ErrorKind::config, "entities_per_passage must be at least 1");
    require(!attributes.empty(), ErrorKind::config, "at least one attribute schema is required");
    for (const auto& a : attributes) {
        const bool known = std::any_of(kSchemas.begin(), kSchemas.end(), [&](const auto& s) { return a == s.name; });
        require(known, ErrorKind::config, "unknown attribute schema '" + a + "'");
    }
    // Worst case every fact is a friend link needing two fresh entities.
    const std::size_t needed = 2 * n_passages * entities_per_passage + n_golden + 1;
    require(n_entities >= needed, ErrorKind::config,
            "n_entities must be at least " + std::to_string(needed) + " for this passage layout");
    require(max_seq_len > 0, ErrorKind::config, "max_seq_len must be positive");
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
    j = nlohmann::json{{"n_passages", c.n_passages}, {"n_golden", c.n_golden},   {"entities_per_passage", c.entities_per_passage},
                       {"n_entities", c.n_entities}, {"attributes", c.attributes}, {"max_seq_len", c.max_seq_len}};
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
    detail::check_keys(j, {"n_passages", "n_golden", "entities_per_passage", "n_entities", "attributes", "max_seq_len"},
                       "corpus config");
    detail::read_optional(j, "n_passages", c.n_passages);
    detail::read_optional(j, "n_golden", c.n_golden);
    detail::read_optional(j, "entities_per_passage", c.entities_per_passage);
    detail::read_optional(j, "n_entities", c.n_entities);
    detail::read_optional(j, "attributes", c.attributes);
    detail::read_optional(j, "max_seq_len", c.max_seq_len);
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
        const bool inserted = index_.emplace(words_[i], static_cast<TokenId>(i)).second;
        require(inserted, ErrorKind::config, "duplicate vocabulary word '" + words_[i] + "'");
    }
}

TokenId Vocabulary::id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    require(it != index_.end(), ErrorKind::input, "word '" + std::string(word) + "' is not in the vocabulary");
    return it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.contains(std::string(word)); }

const std::string& Vocabulary::word(TokenId id) const {
    require(id < words_.size(), ErrorKind::input, "token id " + std::to_string(id) + " out of vocabulary range");
    return words_[id];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out.push_back(' ');
        out += word(ids[i]);
    }
    return out;
}

Vocabulary build_vocab(const CorpusConfig& config) {
    std::vector<std::string> words;
    auto add = [&](std::string_view text) {
        for (auto& w : split_words(text)) {
            if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(std::move(w));
        }
    };
    for (auto special : {kEosToken, kPassagesOpen, kPassagesClose, kQuestionCue, kAnswerCue}) add(special);
    add(kInstruction);
    add(kFriendLink);
    add(kFriendQuestion);
    add(kNeedleFact);
    add(kNeedleQuestion);
    for (const auto& s : kSchemas) {
        add(s.fact);
        add(s.question);
        for (const char* v : s.values) add(v);
    }
    for (const char* v : kNeedleValues) add(v);
    for (std::size_t e = 0; e < config.n_entities; ++e) add("e" + std::to_string(e));
    return Vocabulary(std::move(words));
}

std::string_view to_string(AttributionToken token) {
    return token == AttributionToken::prompt_last ? "prompt_last" : "question_last";
}

AttributionToken attribution_token_from_string(std::string_view text) {
    if (text == "prompt_last") return AttributionToken::prompt_last;
    if (text == "question_last") return AttributionToken::question_last;
    fail(ErrorKind::config, "unknown attribution token '" + std::string(text) + "'");
}

std::size_t attribution_index(const PromptLayout& layout, AttributionToken token) {
    return token == AttributionToken::prompt_last ? layout.prompt_last_token_index : layout.question_last_token_index;
}

Corpus::Corpus(CorpusConfig config) : config_(std::move(config)) {
    config_.validate();
    vocab_ = build_vocab(config_);
    for (const auto& name : config_.attributes) {
        const auto& g = *std::find_if(kSchemas.begin(), kSchemas.end(), [&](const auto& s) { return name == s.name; });
        Schema schema;
        schema.name = g.name;
        schema.fact_prefix = vocab_.encode(g.fact);
        schema.question = vocab_.encode(g.question);
        for (const char* v : g.values) schema.values.push_back(vocab_.id(v));
        schema.terminator = vocab_.id(".");
        schemas_.push_back(std::move(schema));
    }
    instruction_ = vocab_.encode(kInstruction);
    friend_link_ = vocab_.encode(kFriendLink);
    friend_question_ = vocab_.encode(kFriendQuestion);
    needle_fact_ = vocab_.encode(kNeedleFact);
    needle_question_ = vocab_.encode(kNeedleQuestion);
    for (const char* v : kNeedleValues) needle_values_.push_back(vocab_.id(v));
    period_ = vocab_.id(".");
    eos_ = vocab_.id(kEosToken);
    open_ = vocab_.id(kPassagesOpen);
    close_ = vocab_.id(kPassagesClose);
    question_cue_ = vocab_.id(kQuestionCue);
    answer_cue_ = vocab_.id(kAnswerCue);
}

TokenId Corpus::entity_token(std::size_t entity) const { return vocab_.id("e" + std::to_string(entity)); }

std::vector<TokenId> Corpus::fact_tokens(const Schema& schema, std::size_t entity, TokenId value) const {
    std::vector<TokenId> out{value};
    out.insert(out.end(), schema.fact_prefix.begin(), schema.fact_prefix.end());
    out.push_back(entity_token(entity));
    out.push_back(period_);
    return out;
}

std::vector<TokenId> Corpus::friend_tokens(std::size_t a, std::size_t b) const {
    std::vector<TokenId> out{entity_token(a)};
    out.insert(out.end(), friend_link_.begin(), friend_link_.end());
    out.push_back(entity_token(b));
    out.push_back(period_);
    return out;
}

MdqaSample Corpus::generate_sample(std::uint64_t seed) const {
    Rng rng(seed);
    const Schema& schema = schemas_[rng.below(schemas_.size())];
    const TokenId answer = schema.values[rng.below(schema.values.size())];

    std::vector<std::size_t> entity_pool(config_.n_entities);
    std::iota(entity_pool.begin(), entity_pool.end(), 0);
    shuffle_in_place(entity_pool, rng);
    std::size_t next_entity = 0;
    auto fresh = [&] { return entity_pool[next_entity++]; };

    auto other_value = [&](const Schema& s) {
        TokenId v = s.values[rng.below(s.values.size())];
        while (v == answer) v = s.values[rng.below(s.values.size())];
        return v;
    };
    struct Fact {
        std::vector<TokenId> tokens;
        std::vector<std::size_t> entities;
    };
    auto attribute_fact = [&](const Schema& s) {
        const std::size_t e = fresh();
        return Fact{fact_tokens(s, e, other_value(s)), {e}};
    };
    auto friend_fact = [&] {
        const std::size_t a = fresh(), b = fresh();
        return Fact{friend_tokens(a, b), {a, b}};
    };
    auto assemble = [&](std::vector<Fact> facts, bool golden) {
        shuffle_in_place(facts, rng);
        Passage p;
        p.is_golden = golden;
        for (auto& f : facts) {
            p.tokens.insert(p.tokens.end(), f.tokens.begin(), f.tokens.end());
            p.entities.insert(p.entities.end(), f.entities.begin(), f.entities.end());
        }
        return p;
    };

    const std::size_t hops = config_.n_golden;
    std::vector<std::size_t> chain(hops);
    for (auto& e : chain) e = fresh();

    std::vector<Passage> passages;
    for (std::size_t g = 0; g < hops; ++g) {
        std::vector<Fact> facts;
        if (g + 1 < hops) {
            facts.push_back({friend_tokens(chain[g + 1], chain[g]), {chain[g], chain[g + 1]}});
        } else {
            facts.push_back({fact_tokens(schema, chain[g], answer), {chain[g]}});
        }
        for (std::size_t extra = 1; extra < config_.entities_per_passage; ++extra) {
            facts.push_back(attribute_fact(schemas_[rng.below(schemas_.size())]));
        }
        passages.push_back(assemble(std::move(facts), true));
    }
    for (std::size_t d = hops; d < config_.n_passages; ++d) {
        std::vector<Fact> facts;
        for (std::size_t f = 0; f < config_.entities_per_passage; ++f) {
            // Hard negatives: single-hop distractors share the question's
            // schema; chained questions also get decoy friend links.
            if (hops > 1 && rng.below(2) == 0) {
                facts.push_back(friend_fact());
            } else {
                facts.push_back(attribute_fact(schema));
            }
        }
        passages.push_back(assemble(std::move(facts), false));
    }
    shuffle_in_place(passages, rng);

    MdqaSample sample;
    sample.kind = SampleKind::mdqa;
    sample.seed = seed;
    sample.question = schema.question;
    for (std::size_t h = 1; h < hops; ++h) {
        sample.question.insert(sample.question.end(), friend_question_.begin(), friend_question_.end());
    }
    sample.question.push_back(entity_token(chain.front()));
    sample.answer = {answer};
    sample.passages = std::move(passages);
    for (std::size_t i = 0; i < sample.passages.size(); ++i) {
        if (sample.passages[i].is_golden) sample.golden_indices.push_back(i);
    }
    sample.layout = render_prompt(sample);
    for (std::size_t i = 0; i < sample.passages.size(); ++i) sample.passages[i].span = sample.layout.passage_spans[i];
    return sample;
}

MdqaSample Corpus::generate_needle_sample(std::uint64_t seed) const {
    Rng rng(seed);
    const TokenId code = needle_values_[rng.below(needle_values_.size())];
    std::vector<std::size_t> entity_pool(config_.n_entities);
    std::iota(entity_pool.begin(), entity_pool.end(), 0);
    shuffle_in_place(entity_pool, rng);
    std::size_t next_entity = 0;

    std::vector<Passage> passages;
    Passage needle;
    needle.is_golden = true;
    needle.tokens = needle_fact_;
    needle.tokens.push_back(code);
    needle.tokens.push_back(period_);
    passages.push_back(std::move(needle));
    for (std::size_t d = 1; d < config_.n_passages; ++d) {
        Passage p;
        for (std::size_t f = 0; f < config_.entities_per_passage; ++f) {
            const Schema& s = schemas_[rng.below(schemas_.size())];
            const std::size_t e = entity_pool[next_entity++];
            const auto fact = fact_tokens(s, e, s.values[rng.below(s.values.size())]);
            p.tokens.insert(p.tokens.end(), fact.begin(), fact.end());
            p.entities.push_back(e);
        }
        passages.push_back(std::move(p));
    }
    shuffle_in_place(passages, rng);

    MdqaSample sample;
    sample.kind = SampleKind::needle;
    sample.seed = seed;
    sample.question = needle_question_;
    sample.answer = {code};
    sample.passages = std::move(passages);
    for (std::size_t i = 0; i < sample.passages.size(); ++i) {
        if (sample.passages[i].is_golden) sample.golden_indices.push_back(i);
    }
    sample.layout = render_prompt(sample);
    for (std::size_t i = 0; i < sample.passages.size(); ++i) sample.passages[i].span = sample.layout.passage_spans[i];
    return sample;
}

PromptLayout Corpus::render_prompt(const MdqaSample& sample) const {
    require(!sample.passages.empty() && !sample.question.empty() && !sample.answer.empty(), ErrorKind::usage,
            "render_prompt: sample needs passages, a question and an answer");
    PromptLayout layout;
    auto& t = layout.tokens;
    t = instruction_;
    t.push_back(open_);
    for (const auto& p : sample.passages) {
        require(!p.tokens.empty(), ErrorKind::usage, "render_prompt: empty passage");
        const std::size_t begin = t.size();
        t.insert(t.end(), p.tokens.begin(), p.tokens.end());
        layout.passage_spans.push_back({begin, t.size()});
    }
    t.push_back(close_);
    t.push_back(question_cue_);
    layout.question_span.begin = t.size();
    t.insert(t.end(), sample.question.begin(), sample.question.end());
    layout.question_span.end = t.size();
    layout.question_last_token_index = t.size() - 1;
    layout.prompt_last_token_index = t.size();
    t.push_back(answer_cue_);
    layout.answer_span.begin = t.size();
    t.insert(t.end(), sample.answer.begin(), sample.answer.end());
    layout.answer_span.end = t.size();
    t.push_back(eos_);
    require(t.size() <= config_.max_seq_len, ErrorKind::length,
            "rendered prompt has " + std::to_string(t.size()) + " tokens, max_seq_len is " +
                std::to_string(config_.max_seq_len));
    return layout;
}

MdqaSample Corpus::permute_passages(const MdqaSample& sample, const std::vector<std::size_t>& order) const {
    require(order.size() == sample.passages.size(), ErrorKind::usage, "permutation length mismatch");
    std::vector<bool> seen(order.size(), false);
    for (std::size_t i : order) {
        require(i < order.size() && !seen[i], ErrorKind::usage, "not a permutation");
        seen[i] = true;
    }
    MdqaSample out = sample;
    out.passages.clear();
    out.golden_indices.clear();
    for (std::size_t i = 0; i < order.size(); ++i) {
        out.passages.push_back(sample.passages[order[i]]);
        if (out.passages.back().is_golden) out.golden_indices.push_back(i);
    }
    out.layout = render_prompt(out);
    for (std::size_t i = 0; i < out.passages.size(); ++i) out.passages[i].span = out.layout.passage_spans[i];
    return out;
}

MdqaSample Corpus::shuffle_passages(const MdqaSample& sample, std::uint64_t seed) const {
    Rng rng(seed);
    std::vector<std::size_t> order(sample.passages.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle_in_place(order, rng);
    return permute_passages(sample, order);
}

std::vector<MdqaSample> Corpus::generate_dataset(std::size_t n, std::uint64_t master_seed, SampleKind kind) const {
    std::vector<MdqaSample> samples;
    samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t seed = derive_seed(master_seed, stream_for(kind), i);
        samples.push_back(kind == SampleKind::mdqa ? generate_sample(seed) : generate_needle_sample(seed));
    }
    return samples;
}

std::size_t Corpus::max_rendered_length() const {
    std::size_t longest_fact = friend_link_.size() + 3;
    std::size_t longest_question = needle_question_.size();
    for (const auto& s : schemas_) {
        longest_fact = std::max(longest_fact, s.fact_prefix.size() + 3);
        longest_question = std::max(longest_question, s.question.size() + 1 + (config_.n_golden - 1) * friend_question_.size());
    }
    longest_fact = std::max(longest_fact, needle_fact_.size() + 2);
    return instruction_.size() + 2 + config_.n_passages * config_.entities_per_passage * longest_fact + 1 +
           longest_question + 1 + 1 + 1;
}

}  // namespace mudaf
