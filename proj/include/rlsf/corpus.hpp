#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace rlsf {

enum class TaskKind { Arithmetic, MultipleChoice };
enum class AnswerStyle { DirectAnswer, ReasoningTrace };

std::string_view to_string(TaskKind kind);
std::string_view to_string(AnswerStyle style);
TaskKind task_kind_from_string(std::string_view s);
AnswerStyle answer_style_from_string(std::string_view s);

/// The phrase every training target uses to introduce its answer.
inline constexpr std::string_view kAnswerPhrase = "So the answer is";

struct ChoiceOption {
    char letter = 'A';
    std::string text;
    bool operator==(const ChoiceOption&) const = default;
};

struct TaskInstance {
    std::uint64_t id = 0;
    TaskKind kind = TaskKind::Arithmetic;
    int difficulty = 1;
    std::string question;      // the bare arithmetic expression, e.g. "37 + 45 - 12"
    std::string prompt_text;   // what the policy is conditioned on
    std::string gold_answer;   // signed integer text, or a single letter
    std::vector<ChoiceOption> options;

    bool operator==(const TaskInstance&) const = default;
};

struct SftExample {
    std::uint64_t id = 0;
    TaskKind kind = TaskKind::Arithmetic;
    std::string prompt_text;
    std::string target_text;   // eos is appended at encoding time
    std::string gold_answer;
    AnswerStyle style = AnswerStyle::DirectAnswer;

    bool operator==(const SftExample&) const = default;
};

/// Relative frequencies of task families drawn by generate_task.
struct TaskMix {
    double arithmetic_d1 = 0.45;
    double arithmetic_d2 = 0.30;
    double arithmetic_d3 = 0.0;
    double multiple_choice = 0.25;
    int choice_count = 4;
    int max_operand = 99;
};

/// Operand count is difficulty + 1; difficulty 3 adds '*' to {+, -}.
/// Operands are drawn from [0, max_operand].
TaskInstance generate_arithmetic(std::uint64_t seed, std::uint64_t id, int difficulty, int max_operand = 99);

/// A difficulty-1 arithmetic question with `choice_count` (3..5) numeric options.
TaskInstance generate_multiple_choice(std::uint64_t seed, std::uint64_t id, int choice_count = 4,
                                      int max_operand = 99);

/// Draws the family from `mix`, then delegates. Pure in (seed, id, mix).
TaskInstance generate_task(std::uint64_t seed, std::uint64_t id, const TaskMix& mix = {});

/// Tasks with ids first_id .. first_id + n - 1.
std::vector<TaskInstance> generate_tasks(std::uint64_t seed, std::uint64_t first_id, std::size_t n,
                                         const TaskMix& mix = {});

/// One "a op b = r" line per reduction step ('*' first, then left to right).
std::vector<std::string> reasoning_steps(const std::string& question);

/// Exact integer value of `question` with standard precedence.
std::int64_t evaluate_expression(const std::string& question);

std::string answer_sentence(const std::string& answer);
/// Step lines, then (multiple choice only) the matching option line, then
/// the answer sentence.
std::string reasoning_target(const TaskInstance& task);
std::string direct_target(const TaskInstance& task);
SftExample make_sft_example(const TaskInstance& task, AnswerStyle style);

/// ceil(reasoning_ratio * n) reasoning traces, the rest direct answers,
/// interleaved by a seed-determined shuffle.
std::vector<SftExample> build_sft_corpus(std::uint64_t seed, std::size_t n, double reasoning_ratio,
                                         const TaskMix& mix = {});

/// Rebuilds a task from its serialized (id, kind, prompt, gold) fields.
TaskInstance task_from_prompt(std::uint64_t id, TaskKind kind, const std::string& prompt,
                              const std::string& gold);

/// JSON Lines export, one object per line: {id, kind, prompt, target, gold, style}.
void write_corpus_jsonl(const std::filesystem::path& path, const std::vector<SftExample>& examples);
std::vector<SftExample> read_corpus_jsonl(const std::filesystem::path& path);

/// Prompt sets use the same schema with an empty target and style "none".
void write_tasks_jsonl(const std::filesystem::path& path, const std::vector<TaskInstance>& tasks);
std::vector<TaskInstance> read_tasks_jsonl(const std::filesystem::path& path);

}  // namespace rlsf
