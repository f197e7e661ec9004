#include "rlsf/eval.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "rlsf/parallel.hpp"

namespace rlsf {
namespace {

std::optional<long long> parse_integer(const std::string& s) {
    long long v = 0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (first != last && *first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || first == last) return std::nullopt;
    return v;
}

}  // namespace

bool answers_match(const std::string& predicted, const std::string& gold, TaskKind kind) {
    if (kind == TaskKind::MultipleChoice) return !predicted.empty() && predicted == gold;
    const auto a = parse_integer(predicted);
    const auto b = parse_integer(gold);
    return a && b && *a == *b;
}

PredictionRecord score_response(const Policy& policy, const TaskInstance& task, const TokenSeq& prompt,
                                const TokenSeq& response, const CotOptions& options,
                                ConfidenceAggregation aggregation) {
    PredictionRecord r;
    r.task_id = task.id;
    r.gold = task.gold_answer;
    r.response = response;
    if (response.empty()) return r;
    const auto span = identify_answer_span(policy, prompt, response, options);
    if (!span) return r;
    const SpanStatistics stats = span_statistics(policy, prompt, response, *span);
    r.predicted = span->text;
    r.confidence = stats.confidence(aggregation);
    r.disparity = stats.disparity;
    r.correct = answers_match(r.predicted, r.gold, task.kind);
    return r;
}

PredictionRecord predict(const Policy& policy, const TaskInstance& task, const CotOptions& options,
                         ConfidenceAggregation aggregation) {
    const TokenSeq prompt = encode_prompt(policy.vocab, task.prompt_text);
    const TokenSeq full = greedy_decode(policy, prompt, options.max_new_tokens);
    return score_response(policy, task, prompt, TokenSeq(full.begin() + static_cast<std::ptrdiff_t>(prompt.size()), full.end()),
                          options, aggregation);
}

CalibrationReport compute_ece(std::span<const PredictionRecord> records, int bins) {
    if (records.empty()) throw ParameterError("ECE of an empty record set");
    if (bins < 1) throw ParameterError("bin count must be >= 1");
    CalibrationReport rep;
    rep.n = records.size();
    rep.bins.resize(static_cast<std::size_t>(bins));
    for (int b = 0; b < bins; ++b) {
        rep.bins[static_cast<std::size_t>(b)].lo = static_cast<double>(b) / bins;
        rep.bins[static_cast<std::size_t>(b)].hi = static_cast<double>(b + 1) / bins;
    }
    std::size_t correct = 0;
    for (const auto& r : records) {
        if (!(r.confidence >= 0.0 && r.confidence <= 1.0)) throw ParameterError("confidence outside [0,1]");
        const int b = std::min(bins - 1, static_cast<int>(std::floor(r.confidence * bins)));
        auto& bin = rep.bins[static_cast<std::size_t>(b)];
        ++bin.count;
        bin.mean_confidence += r.confidence;
        bin.accuracy += r.correct ? 1.0 : 0.0;
        correct += r.correct ? 1 : 0;
    }
    const double n = static_cast<double>(records.size());
    for (auto& bin : rep.bins) {
        if (bin.count == 0) continue;
        bin.mean_confidence /= static_cast<double>(bin.count);
        bin.accuracy /= static_cast<double>(bin.count);
        rep.ece += static_cast<double>(bin.count) / n * std::abs(bin.accuracy - bin.mean_confidence);
    }
    rep.accuracy = static_cast<double>(correct) / n;
    return rep;
}

std::string to_string(const EvalMode& mode) {
    return mode.decode == DecodeMode::Greedy ? "greedy" : "cot(" + std::to_string(mode.k) + ")";
}

Evaluation evaluate_policy(const Policy& policy, const std::vector<TaskInstance>& tasks, const EvalMode& mode, int bins,
                           const CotOptions& options) {
    if (tasks.empty()) throw ParameterError("evaluation needs at least one task");
    Evaluation ev;
    ev.mode = mode;
    ev.records.resize(tasks.size());
    parallel_for(tasks.size(), [&](std::size_t i) {
        const TaskInstance& task = tasks[i];
        if (mode.decode == DecodeMode::Greedy) {
            ev.records[i] = predict(policy, task, options, mode.confidence);
            return;
        }
        const TokenSeq prompt = encode_prompt(policy.vocab, task.prompt_text);
        const auto scored = cot_decode(policy, prompt, mode.k, options);
        PredictionRecord r;
        r.task_id = task.id;
        r.gold = task.gold_answer;
        r.response = scored.front().hypothesis.tokens;
        const bool any = std::any_of(scored.begin(), scored.end(), [](const auto& s) { return s.confidence.has_value(); });
        if (any) {
            const ScoredHypothesis& best = select_max_confidence(scored);
            r.response = best.hypothesis.tokens;
            r.predicted = best.span->text;
            r.disparity = best.confidence;
            r.confidence = span_statistics(policy, prompt, best.hypothesis.tokens, *best.span).confidence(mode.confidence);
            r.correct = answers_match(r.predicted, r.gold, task.kind);
        }
        ev.records[i] = std::move(r);
    });
    ev.report = compute_ece(ev.records, bins);
    return ev;
}

void write_reliability_csv(const std::filesystem::path& path, const CalibrationReport& report) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "bin_lo,bin_hi,count,mean_conf,accuracy,gap\n";
    char line[256];
    for (const auto& b : report.bins) {
        std::snprintf(line, sizeof line, "%.4f,%.4f,%zu,%.10f,%.10f,%.10f\n", b.lo, b.hi, b.count, b.mean_confidence,
                      b.accuracy, b.count ? std::abs(b.accuracy - b.mean_confidence) : 0.0);
        out << line;
    }
}

void write_summary_json(const std::filesystem::path& path, const Evaluation& eval) {
    nlohmann::ordered_json j;
    j["accuracy"] = eval.report.accuracy;
    j["ece"] = eval.report.ece;
    j["ece_percent"] = eval.report.ece * 100.0;
    j["n"] = eval.report.n;
    j["mode"] = eval.mode.decode == DecodeMode::Greedy ? "greedy" : "cot";
    j["K"] = eval.mode.k;
    j["B"] = eval.report.bins.size();
    j["confidence"] = std::string(to_string(eval.mode.confidence));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

std::vector<LabeledPair> reward_bench_pairs(const Vocabulary& vocab, const std::vector<TaskInstance>& tasks) {
    std::vector<LabeledPair> pairs;
    std::string missing;
    for (const auto& task : tasks) {
        // The wrong trace carries its error into the last step result, so the
        // trace stays self-consistent and only the arithmetic is off.
        std::vector<std::string> steps = reasoning_steps(task.question);
        std::string wrong_value, wrong_answer, wrong_option_line;
        if (task.kind == TaskKind::MultipleChoice) {
            for (const auto& o : task.options) {
                if (std::string(1, o.letter) != task.gold_answer) {
                    wrong_value = o.text;
                    wrong_answer = std::string(1, o.letter);
                    wrong_option_line = wrong_answer + ". " + o.text + "\n";
                    break;
                }
            }
        } else {
            const long long gold = std::stoll(task.gold_answer);
            wrong_value = wrong_answer = std::to_string(task.id % 2 ? gold + 1 : gold - 1);
        }
        const auto eq = steps.empty() ? std::string::npos : steps.back().rfind("= ");
        if (wrong_answer.empty() || eq == std::string::npos) {
            missing += (missing.empty() ? "" : ", ") + std::to_string(task.id);
            continue;
        }
        steps.back() = steps.back().substr(0, eq + 2) + wrong_value;
        std::string bad;
        for (const auto& line : steps) bad += line + "\n";
        bad += wrong_option_line + answer_sentence(wrong_answer);
        auto full = [&](const std::string& response) {
            TokenSeq s = concat(encode_prompt(vocab, task.prompt_text), vocab.encode(response));
            s.push_back(vocab.eos());
            return s;
        };
        pairs.push_back({full(reasoning_target(task)), full(bad)});
    }
    if (!missing.empty()) throw ParameterError("no wrong-answer response can be built for tasks " + missing);
    return pairs;
}

double reward_bench(const RewardModel& rm, const std::vector<TaskInstance>& tasks) {
    return pairwise_accuracy(rm, reward_bench_pairs(rm.vocab, tasks));
}

}  // namespace rlsf
