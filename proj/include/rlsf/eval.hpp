#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlsf/corpus.hpp"
#include "rlsf/cot_decode.hpp"
#include "rlsf/reward_model.hpp"

namespace rlsf {

struct PredictionRecord {
    std::uint64_t task_id = 0;
    std::string predicted;  // answer span text, empty when absent
    std::string gold;
    double confidence = 0.0;            // aggregated top-1 probability over the span
    bool correct = false;
    std::optional<double> disparity;    // present iff a span was found
    TokenSeq response;                  // decoded continuation, prompt excluded
};

/// Integer comparison for arithmetic ("011" equals "11"), exact letters for choices.
bool answers_match(const std::string& predicted, const std::string& gold, TaskKind kind);

/// Builds a record from a finished response. Absent spans give (0, incorrect).
PredictionRecord score_response(const Policy& policy, const TaskInstance& task, const TokenSeq& prompt,
                                const TokenSeq& response, const CotOptions& options = {},
                                ConfidenceAggregation aggregation = ConfidenceAggregation::Mean);

/// Greedy decode, span identification and confidence for one task.
PredictionRecord predict(const Policy& policy, const TaskInstance& task, const CotOptions& options = {},
                         ConfidenceAggregation aggregation = ConfidenceAggregation::Mean);

struct ReliabilityBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    double mean_confidence = 0.0;
    double accuracy = 0.0;
};

struct CalibrationReport {
    std::vector<ReliabilityBin> bins;
    double ece = 0.0;
    double accuracy = 0.0;
    std::size_t n = 0;
};

/// Equal-width bins over [0, 1]; bin b holds [b/B, (b+1)/B), the last one also holds 1.
CalibrationReport compute_ece(std::span<const PredictionRecord> records, int bins = 10);

enum class DecodeMode { Greedy, CoTDecode };

struct EvalMode {
    DecodeMode decode = DecodeMode::Greedy;
    int k = 1;  // branches for CoTDecode
    ConfidenceAggregation confidence = ConfidenceAggregation::Mean;
};

std::string to_string(const EvalMode& mode);

struct Evaluation {
    EvalMode mode;
    std::vector<PredictionRecord> records;
    CalibrationReport report;
};

/// Greedy uses predict(); CoTDecode picks the max-disparity branch and reports
/// the aggregated top-1 probability of its span as confidence.
Evaluation evaluate_policy(const Policy& policy, const std::vector<TaskInstance>& tasks, const EvalMode& mode,
                           int bins = 10, const CotOptions& options = {});

/// CSV: bin_lo,bin_hi,count,mean_conf,accuracy,gap
void write_reliability_csv(const std::filesystem::path& path, const CalibrationReport& report);

/// {"accuracy", "ece", "ece_percent", "n", "mode", "K", "B", "confidence"}
void write_summary_json(const std::filesystem::path& path, const Evaluation& eval);

/// Gold-labelled comparisons, one per task: the correct reasoning trace is
/// preferred over a trace whose last step computes a wrong value and which
/// then answers with that value (or with the option holding it).
std::vector<LabeledPair> reward_bench_pairs(const Vocabulary& vocab, const std::vector<TaskInstance>& tasks);

double reward_bench(const RewardModel& rm, const std::vector<TaskInstance>& tasks);

}  // namespace rlsf
