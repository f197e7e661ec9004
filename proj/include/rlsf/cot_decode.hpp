#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rlsf/policy.hpp"

namespace rlsf {

struct Hypothesis {
    int branch_index = 0;
    TokenId first_token = 0;
    TokenSeq tokens;  // continuation only, prompt excluded; may end with eos
    double first_token_prob = 0.0;
};

struct AnswerSpan {
    std::size_t start = 0;   // token index inside the hypothesis
    std::size_t length = 0;  // >= 1
    std::string text;

    bool operator==(const AnswerSpan&) const = default;
};

struct ScoredHypothesis {
    Hypothesis hypothesis;
    std::optional<AnswerSpan> span;
    std::optional<double> confidence;  // disparity; present iff span is
};

struct CotOptions {
    int max_new_tokens = 64;
    int probe_tokens = 8;
    std::string probe_separator;  // inserted between the hypothesis and an appended probe phrase
};

/// The K most probable first tokens at temperature 1, descending, ties by lowest id.
std::vector<std::pair<TokenId, double>> branch_first_tokens(const Policy& policy, const TokenSeq& prompt, int k);

/// `first_token` followed by a greedy continuation; at most `max_new_tokens` tokens in total.
Hypothesis continue_branch(const Policy& policy, const TokenSeq& prompt, TokenId first_token, int max_new_tokens);

/// Leading answer run of a probe continuation: an optionally signed digit run,
/// or one capital letter standing alone. Empty when neither is present.
std::string extract_answer_run(const std::string& continuation);

/// Greedy answer produced after the probe phrase. The phrase is appended to
/// the hypothesis, or, when the hypothesis already contains it, placed at its
/// last occurrence with the rest of the hypothesis dropped.
std::string probe_answer(const Policy& policy, const TokenSeq& prompt, const TokenSeq& hypothesis,
                         const CotOptions& options = {});

/// Last whole-token occurrence of `answer` in `text` (not glued to a digit,
/// letter, or a sign the answer does not carry). Offsets are token offsets.
std::optional<AnswerSpan> locate_answer_span(const std::string& text, const std::string& answer);

std::optional<AnswerSpan> identify_answer_span(const Policy& policy, const TokenSeq& prompt,
                                               const TokenSeq& hypothesis, const CotOptions& options = {});

/// Per-span confidence summaries computed from temperature-1 distributions.
/// How per-token top-1 probabilities over the answer span become one confidence.
enum class ConfidenceAggregation { Mean, Product, Min };

std::string_view to_string(ConfidenceAggregation a);
ConfidenceAggregation confidence_aggregation_from_string(std::string_view s);

struct SpanStatistics {
    double disparity = 0.0;        // mean of (top-1 - top-2)
    double mean_top_prob = 0.0;    // mean of top-1
    double product_top_prob = 1.0;
    double min_top_prob = 1.0;

    double confidence(ConfidenceAggregation a) const;
};

SpanStatistics span_statistics(const Policy& policy, const TokenSeq& prompt, const TokenSeq& hypothesis,
                               const AnswerSpan& span);

/// Mean over the span of the gap between the two largest next-token probabilities.
double disparity(const Policy& policy, const TokenSeq& prompt, const TokenSeq& hypothesis, const AnswerSpan& span);

/// K branches, each continued greedily, span-located and scored. Ordered by branch index.
std::vector<ScoredHypothesis> cot_decode(const Policy& policy, const TokenSeq& prompt, int k,
                                         const CotOptions& options = {});

/// The scored entry with maximal confidence, ties by lowest branch index.
const ScoredHypothesis& select_max_confidence(const std::vector<ScoredHypothesis>& scored);

/// Decode-audit rows: {prompt_id, k, first_token_prob, text, span_start,
/// span_len, confidence, tokens}. Span fields are null when no span was found.
void append_decode_audit(std::ostream& out, std::uint64_t prompt_id, const Vocabulary& vocab,
                         const std::vector<ScoredHypothesis>& scored);

struct AuditedPrompt {
    std::uint64_t prompt_id = 0;
    std::vector<ScoredHypothesis> scored;
};

/// Reads an audit back, grouping consecutive rows by prompt id.
std::vector<AuditedPrompt> read_decode_audit(const std::filesystem::path& path, const Vocabulary& vocab);

}  // namespace rlsf
