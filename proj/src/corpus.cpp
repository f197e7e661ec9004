#include "rlsf/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rlsf/common.hpp"
#include "rlsf/rng.hpp"

namespace rlsf {
namespace {

using Json = nlohmann::ordered_json;

constexpr std::uint64_t kFamilyStream = 200;
constexpr std::uint64_t kChoiceStream = 100;
constexpr std::uint64_t kCorpusStream = 300;

struct Term {
    std::int64_t value = 0;
    char op = 0;  // operator joining this term to the previous one; 0 for the first
};

std::vector<Term> parse_terms(const std::string& question) {
    std::istringstream in(question);
    std::vector<Term> terms;
    std::string tok;
    char pending = 0;
    while (in >> tok) {
        if (tok == "+" || tok == "-" || tok == "*") {
            if (terms.empty() || pending != 0) throw ParseError("malformed expression: " + question);
            pending = tok[0];
            continue;
        }
        std::size_t used = 0;
        std::int64_t v = 0;
        try {
            v = std::stoll(tok, &used);
        } catch (const std::exception&) {
            throw ParseError("malformed expression: " + question);
        }
        if (used != tok.size()) throw ParseError("malformed expression: " + question);
        if (!terms.empty() && pending == 0) throw ParseError("malformed expression: " + question);
        terms.push_back({v, pending});
        pending = 0;
    }
    if (terms.empty() || pending != 0) throw ParseError("malformed expression: " + question);
    return terms;
}

std::int64_t apply(std::int64_t a, char op, std::int64_t b) {
    switch (op) {
        case '+': return a + b;
        case '-': return a - b;
        case '*': return a * b;
        default: throw ParseError(std::string("unknown operator ") + op);
    }
}

std::string step_line(std::int64_t a, char op, std::int64_t b, std::int64_t r) {
    return std::to_string(a) + ' ' + op + ' ' + std::to_string(b) + " = " + std::to_string(r);
}

// Reduces the term list, optionally recording each step.
std::int64_t reduce(std::vector<Term> terms, std::vector<std::string>* steps) {
    for (std::size_t i = 1; i < terms.size();) {
        if (terms[i].op == '*') {
            const std::int64_t r = terms[i - 1].value * terms[i].value;
            if (steps) steps->push_back(step_line(terms[i - 1].value, '*', terms[i].value, r));
            terms[i - 1].value = r;
            terms.erase(terms.begin() + static_cast<std::ptrdiff_t>(i));
        } else {
            ++i;
        }
    }
    std::int64_t acc = terms[0].value;
    for (std::size_t i = 1; i < terms.size(); ++i) {
        const std::int64_t r = apply(acc, terms[i].op, terms[i].value);
        if (steps) steps->push_back(step_line(acc, terms[i].op, terms[i].value, r));
        acc = r;
    }
    return acc;
}

std::string question_prompt(const std::string& question) { return "Q: " + question + "\n"; }

}  // namespace

std::string_view to_string(TaskKind kind) {
    return kind == TaskKind::Arithmetic ? "arithmetic" : "multiple_choice";
}

std::string_view to_string(AnswerStyle style) {
    return style == AnswerStyle::DirectAnswer ? "direct" : "reasoning";
}

TaskKind task_kind_from_string(std::string_view s) {
    if (s == "arithmetic") return TaskKind::Arithmetic;
    if (s == "multiple_choice") return TaskKind::MultipleChoice;
    throw ParseError("unknown task kind '" + std::string(s) + "'");
}

AnswerStyle answer_style_from_string(std::string_view s) {
    if (s == "direct") return AnswerStyle::DirectAnswer;
    if (s == "reasoning") return AnswerStyle::ReasoningTrace;
    throw ParseError("unknown answer style '" + std::string(s) + "'");
}

std::int64_t evaluate_expression(const std::string& question) { return reduce(parse_terms(question), nullptr); }

std::vector<std::string> reasoning_steps(const std::string& question) {
    std::vector<std::string> steps;
    reduce(parse_terms(question), &steps);
    return steps;
}

TaskInstance generate_arithmetic(std::uint64_t seed, std::uint64_t id, int difficulty, int max_operand) {
    if (difficulty < 1 || difficulty > 3) throw ParameterError("difficulty must be 1, 2 or 3");
    if (max_operand < 1 || max_operand > 99) throw ParameterError("max_operand must be in 1..99");
    Rng rng = Rng::derived(seed, id, static_cast<std::uint64_t>(difficulty));
    const int operands = difficulty + 1;
    const std::string ops = difficulty == 3 ? "+-*" : "+-";

    std::string question = std::to_string(rng.range(0, max_operand));
    for (int i = 1; i < operands; ++i) {
        question += ' ';
        question += ops[rng.below(ops.size())];
        question += ' ';
        question += std::to_string(rng.range(0, max_operand));
    }

    TaskInstance task;
    task.id = id;
    task.kind = TaskKind::Arithmetic;
    task.difficulty = difficulty;
    task.question = question;
    task.prompt_text = question_prompt(question);
    task.gold_answer = std::to_string(evaluate_expression(question));
    return task;
}

TaskInstance generate_multiple_choice(std::uint64_t seed, std::uint64_t id, int choice_count, int max_operand) {
    if (choice_count < 3 || choice_count > 5) throw ParameterError("choice_count must be in 3..5");
    TaskInstance task = generate_arithmetic(seed, id, 1, max_operand);
    Rng rng = Rng::derived(seed, id, kChoiceStream);
    const std::int64_t correct = evaluate_expression(task.question);

    std::vector<std::int64_t> offsets{1, -1, 2, -2, 10, -10, 3, -3, 5, -5, 11, -11, 9, -9};
    rng.shuffle(std::span(offsets));
    std::vector<std::int64_t> values;
    for (int i = 0; i < choice_count - 1; ++i) values.push_back(correct + offsets[static_cast<std::size_t>(i)]);
    const auto gold_pos = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(choice_count)));
    values.insert(values.begin() + static_cast<std::ptrdiff_t>(gold_pos), correct);

    task.kind = TaskKind::MultipleChoice;
    task.prompt_text = question_prompt(task.question);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const char letter = static_cast<char>('A' + i);
        task.options.push_back({letter, std::to_string(values[i])});
        task.prompt_text += std::string(1, letter) + ". " + std::to_string(values[i]) + "\n";
    }
    task.gold_answer = std::string(1, static_cast<char>('A' + gold_pos));
    return task;
}

TaskInstance generate_task(std::uint64_t seed, std::uint64_t id, const TaskMix& mix) {
    Rng rng = Rng::derived(seed, id, kFamilyStream);
    const double total = mix.arithmetic_d1 + mix.arithmetic_d2 + mix.arithmetic_d3 + mix.multiple_choice;
    if (!(total > 0.0)) throw ParameterError("task mix has no positive weight");
    double u = rng.uniform() * total;
    if ((u -= mix.arithmetic_d1) < 0.0) return generate_arithmetic(seed, id, 1, mix.max_operand);
    if ((u -= mix.arithmetic_d2) < 0.0) return generate_arithmetic(seed, id, 2, mix.max_operand);
    if ((u -= mix.arithmetic_d3) < 0.0) return generate_arithmetic(seed, id, 3, mix.max_operand);
    return generate_multiple_choice(seed, id, mix.choice_count, mix.max_operand);
}

std::vector<TaskInstance> generate_tasks(std::uint64_t seed, std::uint64_t first_id, std::size_t n,
                                         const TaskMix& mix) {
    std::vector<TaskInstance> tasks;
    tasks.reserve(n);
    for (std::size_t i = 0; i < n; ++i) tasks.push_back(generate_task(seed, first_id + i, mix));
    return tasks;
}

std::string answer_sentence(const std::string& answer) { return std::string(kAnswerPhrase) + " " + answer + "."; }

std::string reasoning_target(const TaskInstance& task) {
    std::string out;
    for (const auto& line : reasoning_steps(task.question)) out += line + "\n";
    for (const auto& option : task.options) {
        if (std::string(1, option.letter) == task.gold_answer) out += option.letter + std::string(". ") + option.text + "\n";
    }
    return out + answer_sentence(task.gold_answer);
}

std::string direct_target(const TaskInstance& task) { return answer_sentence(task.gold_answer); }

SftExample make_sft_example(const TaskInstance& task, AnswerStyle style) {
    SftExample ex;
    ex.id = task.id;
    ex.kind = task.kind;
    ex.prompt_text = task.prompt_text;
    ex.gold_answer = task.gold_answer;
    ex.style = style;
    ex.target_text = style == AnswerStyle::ReasoningTrace ? reasoning_target(task) : direct_target(task);
    return ex;
}

std::vector<SftExample> build_sft_corpus(std::uint64_t seed, std::size_t n, double reasoning_ratio,
                                         const TaskMix& mix) {
    if (n == 0) throw ParameterError("corpus size must be at least 1");
    if (!(reasoning_ratio >= 0.0 && reasoning_ratio <= 1.0)) throw ParameterError("reasoning_ratio must lie in [0,1]");
    // The epsilon keeps products like 0.3 * 10 = 3.0000000000000004 from rounding up.
    const auto reasoning = static_cast<std::size_t>(std::ceil(reasoning_ratio * static_cast<double>(n) - 1e-9));

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng = Rng::derived(seed, n, kCorpusStream);
    rng.shuffle(std::span(order));

    std::vector<SftExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const TaskInstance task = generate_task(seed, order[i], mix);
        out.push_back(make_sft_example(task, i < reasoning ? AnswerStyle::ReasoningTrace : AnswerStyle::DirectAnswer));
    }
    // Interleave styles: the shuffle above decided which ids reason, this one decides order.
    rng.shuffle(std::span(out));
    return out;
}

TaskInstance task_from_prompt(std::uint64_t id, TaskKind kind, const std::string& prompt, const std::string& gold) {
    TaskInstance task;
    task.id = id;
    task.kind = kind;
    task.prompt_text = prompt;
    task.gold_answer = gold;
    std::istringstream in(prompt);
    std::string line;
    if (!std::getline(in, line) || line.rfind("Q: ", 0) != 0) throw ParseError("prompt lacks a 'Q: ' line");
    task.question = line.substr(3);
    task.difficulty = static_cast<int>(parse_terms(task.question).size()) - 1;
    if (kind == TaskKind::MultipleChoice) {
        while (std::getline(in, line)) {
            if (line.size() < 3 || line[1] != '.' || line[2] != ' ') throw ParseError("malformed option line: " + line);
            task.options.push_back({line[0], line.substr(3)});
        }
    }
    return task;
}

namespace {

template <typename F>
void for_each_json_line(const std::filesystem::path& path, F&& fn) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        Json j;
        try {
            j = Json::parse(line);
            fn(j);
        } catch (const Json::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

}  // namespace

void write_corpus_jsonl(const std::filesystem::path& path, const std::vector<SftExample>& examples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& ex : examples) {
        Json j;
        j["id"] = ex.id;
        j["kind"] = to_string(ex.kind);
        j["prompt"] = ex.prompt_text;
        j["target"] = ex.target_text;
        j["gold"] = ex.gold_answer;
        j["style"] = to_string(ex.style);
        out << j.dump() << '\n';
    }
}

std::vector<SftExample> read_corpus_jsonl(const std::filesystem::path& path) {
    std::vector<SftExample> out;
    for_each_json_line(path, [&](const Json& j) {
        SftExample ex;
        ex.id = j.at("id").get<std::uint64_t>();
        ex.kind = task_kind_from_string(j.at("kind").get<std::string>());
        ex.prompt_text = j.at("prompt").get<std::string>();
        ex.target_text = j.at("target").get<std::string>();
        ex.gold_answer = j.at("gold").get<std::string>();
        ex.style = answer_style_from_string(j.at("style").get<std::string>());
        out.push_back(std::move(ex));
    });
    return out;
}

void write_tasks_jsonl(const std::filesystem::path& path, const std::vector<TaskInstance>& tasks) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& t : tasks) {
        Json j;
        j["id"] = t.id;
        j["kind"] = to_string(t.kind);
        j["prompt"] = t.prompt_text;
        j["target"] = "";
        j["gold"] = t.gold_answer;
        j["style"] = "none";
        out << j.dump() << '\n';
    }
}

std::vector<TaskInstance> read_tasks_jsonl(const std::filesystem::path& path) {
    std::vector<TaskInstance> out;
    for_each_json_line(path, [&](const Json& j) {
        out.push_back(task_from_prompt(j.at("id").get<std::uint64_t>(),
                                       task_kind_from_string(j.at("kind").get<std::string>()),
                                       j.at("prompt").get<std::string>(), j.at("gold").get<std::string>()));
    });
    return out;
}

}  // namespace rlsf
