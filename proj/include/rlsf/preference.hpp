#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rlsf/cot_decode.hpp"

namespace rlsf {

/// One self-feedback comparison: for `prompt`, `chosen` was decoded with at
/// least as much answer confidence as `rejected`.
struct PreferencePair {
    std::uint64_t prompt_id = 0;
    std::string prompt_text;
    TokenSeq prompt;    // bos + prompt text
    TokenSeq chosen;    // response tokens, always eos-terminated
    TokenSeq rejected;  // response tokens, always eos-terminated
    double gap = 0.0;
    int k_chosen = 0;
    int k_rejected = 0;
    double c_chosen = 0.0;
    double c_rejected = 0.0;

    bool operator==(const PreferencePair&) const = default;
};

struct Provenance {
    std::uint64_t seed = 0;
    int k = 0;
    std::string checkpoint_id;

    bool operator==(const Provenance&) const = default;
};

struct PreferenceDataset {
    std::vector<PreferencePair> pairs;
    Provenance provenance;

    bool operator==(const PreferenceDataset&) const = default;
};

enum class PairingStrategy { BestWorst, AllPairs };

std::string_view to_string(PairingStrategy s);
PairingStrategy pairing_strategy_from_string(std::string_view s);

/// Drops span-less entries, then sorts by confidence descending (ties by branch index).
std::vector<ScoredHypothesis> rank_hypotheses(const std::vector<ScoredHypothesis>& scored);

/// Index pairs (i, j), i before j in rank order, that survive the gap and
/// distinct-answer filters. BestWorst considers only (first, last).
std::vector<std::pair<std::size_t, std::size_t>> select_pairs(const std::vector<ScoredHypothesis>& ranked,
                                                              PairingStrategy strategy, double min_gap);

/// Materializes select_pairs for one prompt. Hypotheses that contain special
/// tokens before their end cannot round-trip through text and are skipped.
std::vector<PreferencePair> build_pairs(const Vocabulary& vocab, std::uint64_t prompt_id,
                                        const std::string& prompt_text, const std::vector<ScoredHypothesis>& ranked,
                                        PairingStrategy strategy, double min_gap);

/// Sorts by (prompt id, chosen branch, rejected branch) and drops duplicate triples.
void canonicalize(PreferenceDataset& dataset);

/// One JSON object per pair; provenance goes to `<path>.provenance.json`.
void write_jsonl(const PreferenceDataset& dataset, const std::filesystem::path& path, const Vocabulary& vocab);
PreferenceDataset read_jsonl(const std::filesystem::path& path, const Vocabulary& vocab);

}  // namespace rlsf
