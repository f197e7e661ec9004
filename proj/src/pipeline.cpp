#include "rlsf/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "rlsf/checkpoint.hpp"
#include "rlsf/eval.hpp"
#include "rlsf/parallel.hpp"
#include "rlsf/rl.hpp"
#include "rlsf/rng.hpp"

namespace rlsf {
namespace {

using Json = nlohmann::ordered_json;

constexpr std::uint64_t kPrefIdBase = 1'000'000;
constexpr std::uint64_t kEvalIdBase = 2'000'000;
constexpr std::uint64_t kBenchIdBase = 3'000'000;

const std::vector<std::pair<std::string, std::string>> kEvalRuns = {
    {"base_greedy", "sft_policy.ckpt"},
    {"base_cot", "sft_policy.ckpt"},
    {"ppo_greedy", "ppo_policy.ckpt"},
    {"dpo_greedy", "dpo_policy.ckpt"},
};

const std::map<std::string, std::string>& producers() {
    static const std::map<std::string, std::string> m = {
        {"sft_corpus.jsonl", "gen-corpus"},  {"pref_prompts.jsonl", "gen-corpus"}, {"eval_tasks.jsonl", "gen-corpus"},
        {"bench_tasks.jsonl", "gen-corpus"}, {"sft_policy.ckpt", "sft"},           {"decode_audit.jsonl", "cot-decode"},
        {"prefs.jsonl", "build-prefs"},      {"reward.ckpt", "train-rm"},          {"ppo_policy.ckpt", "ppo"},
        {"dpo_policy.ckpt", "dpo"},
    };
    return m;
}

std::string fixed(double v, int digits = 10) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

CotOptions cot_options(const RunConfig& c) {
    CotOptions o;
    o.max_new_tokens = c.cot.max_new_tokens;
    o.probe_tokens = c.cot.probe_tokens;
    return o;
}

}  // namespace

Pipeline::Pipeline(RunConfig config, std::ostream& log, bool force)
    : config_(std::move(config)), log_(log), force_(force), dir_(config_.output_dir) {
    config_.validate();
    std::filesystem::create_directories(dir_);
    save_config(dir_ / "config.ini", config_);
}

const std::vector<std::string>& Pipeline::stage_names() {
    static const std::vector<std::string> names = {"gen-corpus", "sft", "cot-decode", "build-prefs", "train-rm",
                                                   "ppo",        "dpo", "eval",       "report"};
    return names;
}

void Pipeline::run_stage(const std::string& name) {
    if (name == "gen-corpus") return gen_corpus();
    if (name == "sft") return sft();
    if (name == "cot-decode") return cot_decode();
    if (name == "build-prefs") return build_prefs();
    if (name == "train-rm") return train_rm();
    if (name == "ppo") return ppo();
    if (name == "dpo") return dpo();
    if (name == "eval") return eval();
    if (name == "report") return report();
    throw ConfigError("unknown stage '" + name + "'");
}

void Pipeline::run_all() {
    for (const auto& name : stage_names()) run_stage(name);
}

std::string Pipeline::params_hash(const StageSpec& spec) const {
    return sha256_text("seed = " + std::to_string(config_.seed) + "\n" + section_text(config_, spec.sections));
}

void Pipeline::run(const std::string& stage, const StageSpec& spec, const std::function<void()>& body) {
    for (const auto& input : spec.inputs) {
        if (!std::filesystem::exists(path(input))) {
            const auto it = producers().find(input);
            const std::string hint = it != producers().end() ? it->second : spec.producer_hint;
            throw MissingArtifactError(stage + ": " + path(input).string() + " not found; run `rlsf " + hint +
                                       "` first");
        }
    }
    const std::filesystem::path manifest_path = path("manifest.json");
    const std::string hash = params_hash(spec);
    if (!force_ && Manifest::load(manifest_path).up_to_date(stage, hash, dir_)) {
        log_ << "[" << stage << "] up to date, skipped\n";
        return;
    }
    StageRecord record;
    record.params_hash = hash;
    record.started = utc_timestamp();
    for (const auto& input : spec.inputs) record.inputs[input] = sha256_file(path(input));
    log_ << "[" << stage << "] running\n";
    body();
    for (const auto& output : spec.outputs) record.outputs[output] = sha256_file(path(output));
    record.finished = utc_timestamp();

    Manifest m = Manifest::load(manifest_path);
    m.tool_version = kToolVersion;
    RunConfig hashed = config_;
    hashed.output_dir.clear();
    m.config_hash = sha256_text(to_ini(hashed));
    m.stages[stage] = record;
    m.save(manifest_path);
    executed_.push_back(stage);
}

void Pipeline::gen_corpus() {
    const StageSpec spec{{"corpus"}, {}, {"sft_corpus.jsonl", "pref_prompts.jsonl", "eval_tasks.jsonl", "bench_tasks.jsonl"}, {}};
    run("gen-corpus", spec, [&] {
        const auto& c = config_.corpus;
        write_corpus_jsonl(path("sft_corpus.jsonl"),
                           build_sft_corpus(config_.seed, c.sft_examples, c.reasoning_ratio, c.mix));
        write_tasks_jsonl(path("pref_prompts.jsonl"), generate_tasks(config_.seed, kPrefIdBase, c.pref_prompts, c.mix));
        write_tasks_jsonl(path("eval_tasks.jsonl"), generate_tasks(config_.seed, kEvalIdBase, c.eval_prompts, c.mix));
        write_tasks_jsonl(path("bench_tasks.jsonl"), generate_tasks(config_.seed, kBenchIdBase, c.bench_prompts, c.mix));
        log_ << "  " << c.sft_examples << " SFT examples, " << c.pref_prompts << " preference prompts, "
             << c.eval_prompts << " evaluation tasks, " << c.bench_prompts << " bench tasks\n";
    });
}

void Pipeline::sft() {
    const StageSpec spec{{"model", "sft"}, {"sft_corpus.jsonl"}, {"sft_policy.ckpt", "sft_loss.csv"}, {}};
    run("sft", spec, [&] {
        const auto& s = config_.sft;
        Policy policy = Policy::initialized(config_.model, config_.seed);
        std::vector<EncodedExample> data;
        for (const auto& ex : read_corpus_jsonl(path("sft_corpus.jsonl"))) data.push_back(encode_example(policy.vocab, ex));
        Adam opt(policy.model.param_count(), {.lr = s.lr});
        const std::size_t bs = static_cast<std::size_t>(s.batch_size);
        const std::size_t per_epoch = (data.size() + bs - 1) / bs;
        const double total = static_cast<double>(per_epoch) * s.epochs;
        std::string csv = "epoch,mean_loss\n";
        std::size_t step = 0;
        for (int epoch = 0; epoch < s.epochs; ++epoch) {
            Rng rng = Rng::derived(config_.seed, 0x736674ULL, static_cast<std::uint64_t>(epoch));
            rng.shuffle(std::span(data));
            double sum = 0.0;
            for (std::size_t start = 0; start < data.size(); start += bs, ++step) {
                if (s.cosine_schedule) {
                    opt.set_lr(s.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total)));
                }
                const std::size_t n = std::min(bs, data.size() - start);
                sum += sft_step(policy, std::span<const EncodedExample>(data).subspan(start, n), opt);
            }
            const double mean = sum / static_cast<double>(per_epoch);
            csv += std::to_string(epoch + 1) + "," + fixed(mean) + "\n";
            log_ << "  epoch " << epoch + 1 << "/" << s.epochs << " mean loss " << fixed(mean, 4) << "\n";
        }
        policy.rng_state = Rng::derived(config_.seed, 0x736674ULL, static_cast<std::uint64_t>(s.epochs)).state();
        save_policy(path("sft_policy.ckpt"), policy);
        write_text(path("sft_loss.csv"), csv);
    });
}

void Pipeline::cot_decode() {
    const StageSpec spec{{"cot"}, {"sft_policy.ckpt", "pref_prompts.jsonl"}, {"decode_audit.jsonl"}, {}};
    run("cot-decode", spec, [&] {
        const Policy policy = load_policy(path("sft_policy.ckpt"));
        const auto tasks = read_tasks_jsonl(path("pref_prompts.jsonl"));
        const CotOptions options = cot_options(config_);
        std::vector<std::vector<ScoredHypothesis>> results(tasks.size());
        parallel_for(tasks.size(), [&](std::size_t i) {
            results[i] = rlsf::cot_decode(policy, encode_prompt(policy.vocab, tasks[i].prompt_text), config_.cot.k, options);
        });
        std::ofstream out(path("decode_audit.jsonl"), std::ios::binary);
        std::size_t spans = 0, total = 0;
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            append_decode_audit(out, tasks[i].id, policy.vocab, results[i]);
            for (const auto& s : results[i]) spans += s.span ? 1 : 0;
            total += results[i].size();
        }
        log_ << "  " << tasks.size() << " prompts, " << total << " hypotheses, " << spans << " with an answer span\n";
    });
}

void Pipeline::build_prefs() {
    const StageSpec spec{{"preference", "cot"},
                         {"decode_audit.jsonl", "pref_prompts.jsonl", "sft_policy.ckpt"},
                         {"prefs.jsonl", "prefs.jsonl.provenance.json"},
                         {}};
    run("build-prefs", spec, [&] {
        const Vocabulary vocab = Vocabulary::character_level();
        std::map<std::uint64_t, std::string> prompt_text;
        for (const auto& t : read_tasks_jsonl(path("pref_prompts.jsonl"))) prompt_text[t.id] = t.prompt_text;
        PreferenceDataset ds;
        ds.provenance = {config_.seed, config_.cot.k, sha256_file(path("sft_policy.ckpt")).substr(0, 16)};
        for (const auto& group : read_decode_audit(path("decode_audit.jsonl"), vocab)) {
            const auto it = prompt_text.find(group.prompt_id);
            if (it == prompt_text.end()) throw ParseError("decode audit names unknown prompt " + std::to_string(group.prompt_id));
            auto pairs = build_pairs(vocab, group.prompt_id, it->second, rank_hypotheses(group.scored),
                                     config_.preference.strategy, config_.preference.min_gap);
            ds.pairs.insert(ds.pairs.end(), pairs.begin(), pairs.end());
        }
        canonicalize(ds);
        write_jsonl(ds, path("prefs.jsonl"), vocab);
        log_ << "  " << ds.pairs.size() << " preference pairs from " << prompt_text.size() << " prompts\n";
    });
}

void Pipeline::train_rm() {
    const StageSpec spec{{"reward"},
                         {"sft_policy.ckpt", "prefs.jsonl", "bench_tasks.jsonl"},
                         {"reward.ckpt", "reward_loss.csv", "reward_bench.json"},
                         {}};
    run("train-rm", spec, [&] {
        const Policy base = load_policy(path("sft_policy.ckpt"));
        const PreferenceDataset data = read_jsonl(path("prefs.jsonl"), base.vocab);
        RewardModel rm = RewardModel::from_policy(base);
        RewardTrainConfig rc = config_.reward;
        rc.seed = config_.seed;
        const RewardTrainResult res = train_reward_model(rm, data, rc);
        std::string csv = "step,loss\n";
        for (std::size_t i = 0; i < res.step_losses.size(); ++i) csv += std::to_string(i + 1) + "," + fixed(res.step_losses[i]) + "\n";
        write_text(path("reward_loss.csv"), csv);
        save_reward_model(path("reward.ckpt"), rm);
        const auto bench_tasks = read_tasks_jsonl(path("bench_tasks.jsonl"));
        const double acc = reward_bench(rm, bench_tasks);
        Json j{{"pairwise_accuracy", acc}, {"bench_pairs", bench_tasks.size()}, {"train_pairs", data.pairs.size()},
               {"final_epoch_loss", res.epoch_losses.back()}, {"scale_lo", rm.scale.lo}, {"scale_hi", rm.scale.hi}};
        write_text(path("reward_bench.json"), j.dump(2) + "\n");
        log_ << "  trained on " << data.pairs.size() << " pairs, final epoch loss " << fixed(res.epoch_losses.back(), 4)
             << ", bench pairwise accuracy " << fixed(acc, 4) << "\n";
    });
}

void Pipeline::ppo() {
    const StageSpec spec{{"ppo", "cot"},
                         {"sft_policy.ckpt", "reward.ckpt", "pref_prompts.jsonl", "eval_tasks.jsonl"},
                         {"ppo_policy.ckpt", "ppo_critic.ckpt", "ppo_metrics.csv"},
                         {}};
    run("ppo", spec, [&] {
        Policy policy = load_policy(path("sft_policy.ckpt"));
        const RewardModel rm = load_reward_model(path("reward.ckpt"));
        const auto prompts = read_tasks_jsonl(path("pref_prompts.jsonl"));
        const auto eval_tasks = read_tasks_jsonl(path("eval_tasks.jsonl"));
        PPOConfig pc = config_.ppo;
        pc.seed = config_.seed;
        std::vector<PPOMetrics> rows;
        try {
            PPOResult res = ppo_train(policy, rm, prompts, eval_tasks, pc, [&](const PPOMetrics& m) {
                rows.push_back(m);
                if (m.iteration > 0 && m.iteration % pc.eval_interval == 0) {
                    std::filesystem::create_directories(path("ppo_checkpoints"));
                    char name[64];
                    std::snprintf(name, sizeof name, "ppo_checkpoints/iter_%04d.ckpt", m.iteration);
                    save_policy(path(name), policy);
                }
                log_ << "  iteration " << m.iteration;
                if (m.mean_terminal_reward) log_ << " reward " << fixed(*m.mean_terminal_reward, 4) << " kl " << fixed(*m.mean_kl, 5);
                if (m.mean_disparity_eval) log_ << " | eval disparity " << fixed(*m.mean_disparity_eval, 4) << " accuracy " << fixed(*m.accuracy_eval, 4);
                log_ << "\n";
            });
            save_reward_model(path("ppo_critic.ckpt"), res.critic, CheckpointKind::Critic);
        } catch (const NumericalError&) {
            write_ppo_metrics_csv(path("ppo_metrics.csv"), rows);
            throw;
        }
        write_ppo_metrics_csv(path("ppo_metrics.csv"), rows);
        save_policy(path("ppo_policy.ckpt"), policy);
    });
}

void Pipeline::dpo() {
    const StageSpec spec{{"dpo"}, {"sft_policy.ckpt", "prefs.jsonl"}, {"dpo_policy.ckpt", "dpo_metrics.csv"}, {}};
    run("dpo", spec, [&] {
        Policy policy = load_policy(path("sft_policy.ckpt"));
        const Policy ref = policy;
        const PreferenceDataset data = read_jsonl(path("prefs.jsonl"), policy.vocab);
        DPOConfig dc = config_.dpo;
        dc.seed = config_.seed;
        const DPOResult res = dpo_train(policy, ref, data, dc);
        std::string csv = "epoch,mean_loss,mean_delta\n0,," + fixed(res.mean_delta_before) + "\n";
        for (std::size_t e = 0; e < res.epoch_losses.size(); ++e) {
            csv += std::to_string(e + 1) + "," + fixed(res.epoch_losses[e]) + "," +
                   (e + 1 == res.epoch_losses.size() ? fixed(res.mean_delta_after) : std::string()) + "\n";
        }
        write_text(path("dpo_metrics.csv"), csv);
        save_policy(path("dpo_policy.ckpt"), policy);
        log_ << "  mean delta " << fixed(res.mean_delta_before, 4) << " -> " << fixed(res.mean_delta_after, 4) << "\n";
    });
}

void Pipeline::eval() {
    StageSpec spec{{"eval", "cot"}, {"sft_policy.ckpt", "ppo_policy.ckpt", "dpo_policy.ckpt", "eval_tasks.jsonl"}, {}, {}};
    for (const auto& [name, ckpt] : kEvalRuns) {
        spec.outputs.push_back("eval_" + name + "_summary.json");
        spec.outputs.push_back("eval_" + name + "_reliability.csv");
    }
    run("eval", spec, [&] {
        const auto tasks = read_tasks_jsonl(path("eval_tasks.jsonl"));
        for (const auto& [name, ckpt] : kEvalRuns) {
            const Policy policy = load_policy(path(ckpt));
            EvalMode mode = name == "base_cot" ? EvalMode{DecodeMode::CoTDecode, config_.cot.k} : EvalMode{};
            mode.confidence = config_.eval.confidence;
            const Evaluation ev = evaluate_policy(policy, tasks, mode, config_.eval.bins, cot_options(config_));
            write_summary_json(path("eval_" + name + "_summary.json"), ev);
            write_reliability_csv(path("eval_" + name + "_reliability.csv"), ev.report);
            log_ << "  " << name << ": accuracy " << fixed(ev.report.accuracy, 4) << ", ECE " << fixed(ev.report.ece, 4)
                 << " (" << fixed(ev.report.ece * 100, 2) << " x100)\n";
        }
    });
}

void Pipeline::report() {
    StageSpec spec{{}, {}, {"report.json", "report.txt"}, "eval"};
    for (const auto& [name, ckpt] : kEvalRuns) spec.inputs.push_back("eval_" + name + "_summary.json");
    run("report", spec, [&] {
        static const std::map<std::string, std::string> labels = {{"base_greedy", "Base"},
                                                                  {"base_cot", "Base"},
                                                                  {"ppo_greedy", "RLSF-PPO"},
                                                                  {"dpo_greedy", "RLSF-DPO"}};
        Json rows = Json::array();
        std::ostringstream table;
        table << "model      decoding   accuracy   ECE     ECEx100  n\n";
        for (const auto& [name, ckpt] : kEvalRuns) {
            std::ifstream in(path("eval_" + name + "_summary.json"));
            const Json s = Json::parse(in);
            const std::string decoding = s.at("mode").get<std::string>() == "cot"
                                             ? "CoT(" + std::to_string(s.at("K").get<int>()) + ")"
                                             : "greedy";
            const double acc = s.at("accuracy").get<double>();
            const double ece = s.at("ece").get<double>();
            rows.push_back(Json{{"name", name}, {"model", labels.at(name)}, {"decoding", decoding}, {"accuracy", acc},
                                {"ece", ece}, {"ece_percent", ece * 100}, {"n", s.at("n")}});
            char line[128];
            std::snprintf(line, sizeof line, "%-10s %-10s %-10.4f %-7.4f %-8.2f %zu\n", labels.at(name).c_str(),
                          decoding.c_str(), acc, ece, ece * 100, s.at("n").get<std::size_t>());
            table << line;
        }
        write_text(path("report.json"), Json{{"rows", rows}}.dump(2) + "\n");
        write_text(path("report.txt"), table.str());
        log_ << table.str();
    });
}

std::vector<ReportRow> read_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("cannot read " + path.string());
    std::vector<ReportRow> out;
    try {
        const Json doc = Json::parse(in);
        for (const auto& r : doc.at("rows")) {
            out.push_back({r.at("name").get<std::string>(), r.at("decoding").get<std::string>(),
                           r.at("accuracy").get<double>(), r.at("ece").get<double>(), r.at("n").get<std::size_t>()});
        }
    } catch (const Json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return out;
}

}  // namespace rlsf
