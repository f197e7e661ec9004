#include "rlsf/cot_decode.hpp"

#include <cctype>
#include <fstream>
#include <ostream>

#include <json.hpp>

namespace rlsf {
namespace {

bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }
bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

// One character per token so that string offsets are token offsets.
std::string aligned_text(const Vocabulary& vocab, const TokenSeq& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) out += vocab.is_special(t) ? '\x01' : vocab.token(t)[0];
    return out;
}

TokenSeq strip_eos(const TokenSeq& seq, TokenId eos) {
    TokenSeq out = seq;
    if (!out.empty() && out.back() == eos) out.pop_back();
    return out;
}

}  // namespace

std::vector<std::pair<TokenId, double>> branch_first_tokens(const Policy& policy, const TokenSeq& prompt, int k) {
    if (k < 1 || k > policy.vocab.size()) throw ParameterError("K must lie in [1, vocabulary size]");
    const std::vector<double> p = next_token_distribution(policy, prompt, 1.0);
    std::vector<std::pair<TokenId, double>> out;
    for (TokenId id : top_k(p, static_cast<std::size_t>(k))) out.emplace_back(id, p[static_cast<std::size_t>(id)]);
    return out;
}

namespace {

Hypothesis continue_from(const Policy& policy, Transformer::Session session, TokenId first_token, int max_new_tokens) {
    Hypothesis h;
    h.first_token = first_token;
    h.tokens.push_back(first_token);
    if (first_token == policy.vocab.eos() || max_new_tokens <= 1 ||
        session.position() >= policy.model.config().context) {
        return h;
    }
    const RowVector logits = session.step(first_token);
    const TokenSeq rest = greedy_continue(policy, session, logits, max_new_tokens - 1);
    h.tokens.insert(h.tokens.end(), rest.begin(), rest.end());
    return h;
}

}  // namespace

Hypothesis continue_branch(const Policy& policy, const TokenSeq& prompt, TokenId first_token, int max_new_tokens) {
    if (first_token < 0 || first_token >= policy.vocab.size()) throw ParameterError("first token out of range");
    if (max_new_tokens < 1) throw ParameterError("max_new_tokens must be >= 1");
    Transformer::Session session(policy.model);
    prefill(session, prompt);
    return continue_from(policy, session, first_token, max_new_tokens);
}

std::string extract_answer_run(const std::string& continuation) {
    std::size_t i = 0;
    while (i < continuation.size() && std::isspace(static_cast<unsigned char>(continuation[i]))) ++i;
    const std::string s = continuation.substr(i);
    if (s.empty()) return {};
    std::size_t j = 0;
    if (s[0] == '-' || s[0] == '+') j = 1;
    const std::size_t digits_begin = j;
    while (j < s.size() && is_digit(s[j])) ++j;
    if (j > digits_begin) return s[0] == '+' ? s.substr(1, j - 1) : s.substr(0, j);
    if (s[0] >= 'A' && s[0] <= 'Z' && (s.size() == 1 || !is_alnum(s[1]))) return s.substr(0, 1);
    return {};
}

std::string probe_answer(const Policy& policy, const TokenSeq& prompt, const TokenSeq& hypothesis,
                         const CotOptions& options) {
    TokenSeq context = prompt;
    TokenSeq body = strip_eos(hypothesis, policy.vocab.eos());
    std::string separator = options.probe_separator;
    // A trace that already states its answer is probed at its own phrase.
    const std::size_t own = aligned_text(policy.vocab, body).rfind(kAnswerPhrase);
    if (own != std::string::npos) {
        body.resize(own);
        separator.clear();
    }
    context.insert(context.end(), body.begin(), body.end());
    const TokenSeq probe = policy.vocab.encode(separator + std::string(kAnswerPhrase));
    context.insert(context.end(), probe.begin(), probe.end());
    const int room = policy.model.config().context - static_cast<int>(context.size());
    if (room < 1) return {};
    const TokenSeq out = greedy_decode(policy, context, std::min(options.probe_tokens, room));
    return extract_answer_run(policy.vocab.decode(out, context.size(), out.size()));
}

std::optional<AnswerSpan> locate_answer_span(const std::string& text, const std::string& answer) {
    if (answer.empty() || answer.size() > text.size()) return std::nullopt;
    const bool signed_answer = answer[0] == '-';
    for (std::size_t pos = text.size() - answer.size() + 1; pos-- > 0;) {
        if (text.compare(pos, answer.size(), answer) != 0) continue;
        const std::size_t end = pos + answer.size();
        if (end < text.size() && is_alnum(text[end])) continue;
        if (pos > 0) {
            const char before = text[pos - 1];
            if (is_alnum(before)) continue;
            if (!signed_answer && before == '-') continue;  // "-3" is not the answer "3"
        }
        return AnswerSpan{pos, answer.size(), answer};
    }
    return std::nullopt;
}

std::optional<AnswerSpan> identify_answer_span(const Policy& policy, const TokenSeq& prompt,
                                               const TokenSeq& hypothesis, const CotOptions& options) {
    if (hypothesis.empty()) throw ParameterError("empty hypothesis");
    const std::string answer = probe_answer(policy, prompt, hypothesis, options);
    return locate_answer_span(aligned_text(policy.vocab, hypothesis), answer);
}

std::string_view to_string(ConfidenceAggregation a) {
    switch (a) {
        case ConfidenceAggregation::Product: return "product";
        case ConfidenceAggregation::Min: return "min";
        default: return "mean";
    }
}

ConfidenceAggregation confidence_aggregation_from_string(std::string_view s) {
    if (s == "mean") return ConfidenceAggregation::Mean;
    if (s == "product") return ConfidenceAggregation::Product;
    if (s == "min") return ConfidenceAggregation::Min;
    throw ParseError("unknown confidence aggregation '" + std::string(s) + "'");
}

double SpanStatistics::confidence(ConfidenceAggregation a) const {
    switch (a) {
        case ConfidenceAggregation::Product: return product_top_prob;
        case ConfidenceAggregation::Min: return min_top_prob;
        default: return mean_top_prob;
    }
}

SpanStatistics span_statistics(const Policy& policy, const TokenSeq& prompt, const TokenSeq& hypothesis,
                               const AnswerSpan& span) {
    if (span.length == 0 || span.start + span.length > hypothesis.size()) throw ParameterError("span out of bounds");
    TokenSeq full = prompt;
    full.insert(full.end(), hypothesis.begin(), hypothesis.begin() + static_cast<std::ptrdiff_t>(span.start + span.length));
    // Row r of the logits predicts token r + 1; only rows up to the last span token are needed.
    const std::span<const TokenId> inputs(full.data(), full.size() - 1);
    const RowMatrix logits = policy.model.logits(policy.model.forward(inputs));
    SpanStatistics stats;
    for (std::size_t i = 0; i < span.length; ++i) {
        const auto row = static_cast<Eigen::Index>(prompt.size() + span.start + i - 1);
        const std::vector<double> p = softmax(RowVector(logits.row(row)));
        const std::size_t best = static_cast<std::size_t>(argmax(p));
        double second = 0.0;
        for (std::size_t w = 0; w < p.size(); ++w) {
            if (w != best) second = std::max(second, p[w]);
        }
        stats.disparity += p[best] - second;
        stats.mean_top_prob += p[best];
        stats.product_top_prob *= p[best];
        stats.min_top_prob = std::min(stats.min_top_prob, p[best]);
    }
    stats.disparity /= static_cast<double>(span.length);
    stats.mean_top_prob /= static_cast<double>(span.length);
    return stats;
}

double disparity(const Policy& policy, const TokenSeq& prompt, const TokenSeq& hypothesis, const AnswerSpan& span) {
    return span_statistics(policy, prompt, hypothesis, span).disparity;
}

std::vector<ScoredHypothesis> cot_decode(const Policy& policy, const TokenSeq& prompt, int k,
                                         const CotOptions& options) {
    if (k < 1 || k > policy.vocab.size()) throw ParameterError("K must lie in [1, vocabulary size]");
    if (options.max_new_tokens < 1) throw ParameterError("max_new_tokens must be >= 1");
    Transformer::Session shared(policy.model);
    const std::vector<double> p = softmax(prefill(shared, prompt));
    const std::vector<TokenId> firsts = top_k(p, static_cast<std::size_t>(k));

    std::vector<ScoredHypothesis> out;
    out.reserve(firsts.size());
    for (std::size_t b = 0; b < firsts.size(); ++b) {
        ScoredHypothesis s;
        s.hypothesis = continue_from(policy, shared, firsts[b], options.max_new_tokens);
        s.hypothesis.branch_index = static_cast<int>(b);
        s.hypothesis.first_token_prob = p[static_cast<std::size_t>(firsts[b])];
        s.span = identify_answer_span(policy, prompt, s.hypothesis.tokens, options);
        if (s.span) s.confidence = disparity(policy, prompt, s.hypothesis.tokens, *s.span);
        out.push_back(std::move(s));
    }
    return out;
}

const ScoredHypothesis& select_max_confidence(const std::vector<ScoredHypothesis>& scored) {
    const ScoredHypothesis* best = nullptr;
    for (const auto& s : scored) {
        if (!s.confidence) continue;
        if (!best || *s.confidence > *best->confidence ||
            (*s.confidence == *best->confidence && s.hypothesis.branch_index < best->hypothesis.branch_index)) {
            best = &s;
        }
    }
    if (!best) throw ParameterError("no hypothesis has an answer span");
    return *best;
}

void append_decode_audit(std::ostream& out, std::uint64_t prompt_id, const Vocabulary& vocab,
                         const std::vector<ScoredHypothesis>& scored) {
    for (const auto& s : scored) {
        nlohmann::ordered_json j;
        j["prompt_id"] = prompt_id;
        j["k"] = s.hypothesis.branch_index;
        j["first_token_prob"] = s.hypothesis.first_token_prob;
        j["text"] = vocab.decode(s.hypothesis.tokens);
        j["span_start"] = s.span ? nlohmann::ordered_json(s.span->start) : nlohmann::ordered_json(nullptr);
        j["span_len"] = s.span ? nlohmann::ordered_json(s.span->length) : nlohmann::ordered_json(nullptr);
        j["confidence"] = s.confidence ? nlohmann::ordered_json(*s.confidence) : nlohmann::ordered_json(nullptr);
        j["tokens"] = s.hypothesis.tokens;
        out << j.dump() << '\n';
    }
}

std::vector<AuditedPrompt> read_decode_audit(const std::filesystem::path& path, const Vocabulary& vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open " + path.string());
    std::vector<AuditedPrompt> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            const auto id = j.at("prompt_id").get<std::uint64_t>();
            if (out.empty() || out.back().prompt_id != id) out.push_back({id, {}});
            ScoredHypothesis s;
            s.hypothesis.branch_index = j.at("k").get<int>();
            s.hypothesis.first_token_prob = j.at("first_token_prob").get<double>();
            s.hypothesis.tokens = j.at("tokens").get<TokenSeq>();
            if (s.hypothesis.tokens.empty()) throw ParseError("empty hypothesis");
            if (!vocab.valid(s.hypothesis.tokens)) throw ParseError("token id out of range");
            s.hypothesis.first_token = s.hypothesis.tokens.front();
            if (!j.at("span_start").is_null()) {
                AnswerSpan span;
                span.start = j.at("span_start").get<std::size_t>();
                span.length = j.at("span_len").get<std::size_t>();
                const std::string text = aligned_text(vocab, s.hypothesis.tokens);
                if (span.length == 0 || span.start + span.length > text.size()) throw ParseError("span out of range");
                span.text = text.substr(span.start, span.length);
                s.span = span;
                s.confidence = j.at("confidence").get<double>();
            }
            out.back().scored.push_back(std::move(s));
        } catch (const std::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace rlsf
