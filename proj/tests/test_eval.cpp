#include <catch_amalgamated.hpp>

#include <algorithm>
#include <fstream>
#include <random>

#include <json.hpp>

#include "rlsf/eval.hpp"
#include "rlsf/optim.hpp"
#include "support.hpp"

using namespace rlsf;
using Catch::Approx;

namespace {

PredictionRecord rec(double conf, bool ok) {
    PredictionRecord r;
    r.confidence = conf;
    r.correct = ok;
    return r;
}

// Per-bin averages computed directly from the definition.
double oracle_ece(const std::vector<PredictionRecord>& rs, int bins) {
    double total = 0;
    for (int b = 0; b < bins; ++b) {
        double conf = 0, acc = 0;
        int n = 0;
        for (const auto& r : rs) {
            int idx = static_cast<int>(r.confidence * bins);
            if (idx == bins) idx = bins - 1;
            if (idx != b) continue;
            conf += r.confidence;
            acc += r.correct ? 1 : 0;
            ++n;
        }
        if (n) total += static_cast<double>(n) / static_cast<double>(rs.size()) * std::abs(acc / n - conf / n);
    }
    return total;
}

std::vector<PredictionRecord> random_records(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<PredictionRecord> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(rec(u(rng), u(rng) < 0.6));
    return out;
}

Policy memorizer(const std::string& prompt, const std::string& target) {
    Policy p = Policy::initialized(test::tiny_config(), 31);
    const SftExample ex{0, TaskKind::Arithmetic, prompt, target, "", AnswerStyle::ReasoningTrace};
    const std::vector<EncodedExample> batch{encode_example(p.vocab, ex)};
    Adam opt(p.model.param_count(), {.lr = 1e-2});
    for (int i = 0; i < 150; ++i) sft_step(p, batch, opt);
    return p;
}

}  // namespace

TEST_CASE("ECE worked example", "[eval]") {
    const std::vector<PredictionRecord> rs{rec(0.9, true), rec(0.8, false), rec(0.6, true), rec(0.3, false)};
    const CalibrationReport r = compute_ece(rs, 2);
    CHECK(r.ece == Approx(0.15).margin(1e-12));
    REQUIRE(r.bins.size() == 2);
    CHECK(r.bins[0].count == 1);
    CHECK(r.bins[1].count == 3);
    CHECK(r.bins[1].accuracy == Approx(2.0 / 3.0).margin(1e-15));
    CHECK(r.bins[1].mean_confidence == Approx(2.3 / 3.0).margin(1e-15));
    CHECK(r.accuracy == 0.5);
    CHECK(r.n == 4);
}

TEST_CASE("ECE extremes and errors", "[eval]") {
    CHECK(compute_ece(std::vector<PredictionRecord>(5, rec(1.0, true))).ece == 0.0);
    CHECK(compute_ece(std::vector<PredictionRecord>(5, rec(1.0, false))).ece == 1.0);
    CHECK(compute_ece(std::vector<PredictionRecord>(5, rec(1.0, true)), 10).bins[9].count == 5);
    CHECK_THROWS_AS(compute_ece(std::vector<PredictionRecord>{}), ParameterError);
    CHECK_THROWS_AS(compute_ece(std::vector<PredictionRecord>{rec(0.5, true)}, 0), ParameterError);
}

TEST_CASE("ECE agrees with the per-bin definition and is order-free", "[eval][property]") {
    std::mt19937_64 rng(5);
    auto rs = random_records(rng, 300);
    const double base = compute_ece(rs, 10).ece;
    CHECK(base == Approx(oracle_ece(rs, 10)).margin(1e-12));
    for (int i = 0; i < 1000; ++i) {
        std::shuffle(rs.begin(), rs.end(), rng);
        CHECK(std::abs(compute_ece(rs, 10).ece - base) < 1e-12);
    }
}

TEST_CASE("merged record sets add bin counts", "[eval][property]") {
    std::mt19937_64 rng(6);
    const auto a = random_records(rng, 70);
    const auto b = random_records(rng, 45);
    auto both = a;
    both.insert(both.end(), b.begin(), b.end());
    const auto ra = compute_ece(a, 7), rb = compute_ece(b, 7), rab = compute_ece(both, 7);
    for (std::size_t i = 0; i < 7; ++i) CHECK(rab.bins[i].count == ra.bins[i].count + rb.bins[i].count);
    CHECK(rab.ece >= 0.0);
    CHECK(rab.ece <= 1.0);
    CHECK(rab.n == 115);
}

TEST_CASE("one bin gives the global calibration gap", "[eval]") {
    std::mt19937_64 rng(7);
    const auto rs = random_records(rng, 50);
    double conf = 0, acc = 0;
    for (const auto& r : rs) {
        conf += r.confidence;
        acc += r.correct;
    }
    CHECK(compute_ece(rs, 1).ece == Approx(std::abs(acc - conf) / 50).margin(1e-12));
}

TEST_CASE("answers compare canonically", "[eval]") {
    CHECK(answers_match("011", "11", TaskKind::Arithmetic));
    CHECK(answers_match("-0", "0", TaskKind::Arithmetic));
    CHECK_FALSE(answers_match("12", "11", TaskKind::Arithmetic));
    CHECK_FALSE(answers_match("", "11", TaskKind::Arithmetic));
    CHECK(answers_match("B", "B", TaskKind::MultipleChoice));
    CHECK_FALSE(answers_match("b", "B", TaskKind::MultipleChoice));
}

TEST_CASE("a self-consistent trace is scored correct", "[eval]") {
    const std::string prompt = "Q: 4 + 7";
    const Policy p = memorizer(prompt, "4 + 7 = 11\nSo the answer is 11.");
    TaskInstance task;
    task.prompt_text = prompt;
    task.gold_answer = "11";
    const PredictionRecord r = predict(p, task);
    CHECK(r.predicted == "11");
    CHECK(r.correct);
    CHECK(r.disparity);
    CHECK(r.confidence > 0.0);
    CHECK(r.confidence <= 1.0);
    task.gold_answer = "12";
    CHECK_FALSE(predict(p, task).correct);

    // "11" spans two tokens, so the three aggregations are ordered.
    const double product = predict(p, task, {}, ConfidenceAggregation::Product).confidence;
    const double lowest = predict(p, task, {}, ConfidenceAggregation::Min).confidence;
    CHECK(product <= lowest);
    CHECK(lowest <= r.confidence);
    CHECK(product > 0.0);
}

TEST_CASE("a missing span scores zero and incorrect", "[eval]") {
    Policy p = test::tiny_policy(1);
    std::fill(p.model.params().begin(), p.model.params().end(), 0.0);
    TaskInstance task;
    task.prompt_text = "Q: 1 + 1";
    task.gold_answer = "2";
    const PredictionRecord r = predict(p, task);
    CHECK(r.predicted.empty());
    CHECK(r.confidence == 0.0);
    CHECK_FALSE(r.correct);
    CHECK_FALSE(r.disparity);
}

TEST_CASE("CoT decoding with one branch equals greedy", "[eval]") {
    const Policy p = test::tiny_policy(3, 3.0, 128);
    TaskMix mix;
    mix.max_operand = 9;
    const auto tasks = generate_tasks(2, 0, 6, mix);
    CotOptions o;
    o.max_new_tokens = 24;
    const Evaluation g = evaluate_policy(p, tasks, {DecodeMode::Greedy, 1}, 10, o);
    const Evaluation c = evaluate_policy(p, tasks, {DecodeMode::CoTDecode, 1}, 10, o);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        CHECK(g.records[i].response == c.records[i].response);
        CHECK(g.records[i].confidence == c.records[i].confidence);
        CHECK(g.records[i].correct == c.records[i].correct);
    }
    CHECK(g.report.ece == c.report.ece);
    const Evaluation again = evaluate_policy(p, tasks, {DecodeMode::Greedy, 1}, 10, o);
    CHECK(again.report.ece == g.report.ece);
    CHECK(to_string(EvalMode{DecodeMode::CoTDecode, 10}) == "cot(10)");
}

TEST_CASE("reward bench pairs prefer the gold answer", "[eval]") {
    const Vocabulary v = Vocabulary::character_level();
    TaskMix mix;
    mix.max_operand = 9;
    const auto tasks = generate_tasks(4, 0, 40, mix);
    const auto pairs = reward_bench_pairs(v, tasks);
    REQUIRE(pairs.size() == tasks.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const std::string good = v.decode(pairs[i].preferred);
        const std::string bad = v.decode(pairs[i].other);
        const std::string gold = "So the answer is " + tasks[i].gold_answer + ".";
        CHECK(good.substr(good.size() - gold.size()) == gold);
        CHECK(bad.substr(bad.size() - gold.size()) != gold);
        CHECK(pairs[i].preferred.back() == v.eos());
        CHECK(pairs[i].other.back() == v.eos());
    }
    const RewardModel constant = RewardModel::from_policy(test::tiny_policy(5));
    CHECK(reward_bench(constant, tasks) == 0.5);
}

TEST_CASE("evaluation files", "[eval][io]") {
    test::TempDir dir("eval");
    Evaluation ev;
    ev.mode = {DecodeMode::CoTDecode, 10};
    ev.records = {rec(0.9, true), rec(0.8, false), rec(0.6, true), rec(0.3, false)};
    ev.report = compute_ece(ev.records, 2);
    write_summary_json(dir / "s.json", ev);
    write_reliability_csv(dir / "r.csv", ev.report);
    std::ifstream s(dir / "s.json");
    const auto j = nlohmann::json::parse(s);
    CHECK(j.at("accuracy") == 0.5);
    CHECK(j.at("ece").get<double>() == Approx(0.15).margin(1e-12));
    CHECK(j.at("n") == 4);
    CHECK(j.at("mode") == "cot");
    CHECK(j.at("K") == 10);
    CHECK(j.at("B") == 2);
    CHECK(j.at("confidence") == "mean");
    std::ifstream r(dir / "r.csv");
    std::string header;
    std::getline(r, header);
    CHECK(header == "bin_lo,bin_hi,count,mean_conf,accuracy,gap");
    int rows = 0;
    for (std::string line; std::getline(r, line);) ++rows;
    CHECK(rows == 2);
}
