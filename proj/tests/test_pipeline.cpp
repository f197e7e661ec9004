#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rlsf/pipeline.hpp"
#include "support.hpp"

using namespace rlsf;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

RunConfig smoke(const std::filesystem::path& out) {
    RunConfig c = load_config(std::filesystem::path(RLSF_SOURCE_DIR) / "configs" / "smoke.ini");
    c.output_dir = out.string();
    return c;
}

int cli(const std::string& args, const std::filesystem::path& log) {
    const std::string cmd = std::string(RLSF_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("a full smoke run produces every artifact and a four-row report", "[pipeline]") {
    test::TempDir dir("pipe");
    std::ostringstream log;
    Pipeline p(smoke(dir.path()), log);
    p.run_all();
    CHECK(p.executed() == Pipeline::stage_names());
    for (const char* f : {"sft_corpus.jsonl", "sft_policy.ckpt", "decode_audit.jsonl", "prefs.jsonl",
                          "prefs.jsonl.provenance.json", "reward.ckpt", "reward_bench.json", "ppo_metrics.csv",
                          "ppo_policy.ckpt", "ppo_critic.ckpt", "dpo_policy.ckpt", "dpo_metrics.csv",
                          "report.json", "report.txt", "manifest.json", "config.ini"}) {
        INFO(f);
        CHECK(std::filesystem::exists(dir / f));
    }
    const auto rows = read_report(dir / "report.json");
    REQUIRE(rows.size() == 4);
    CHECK(rows[1].decoding == "CoT(4)");
    for (const auto& r : rows) {
        CHECK(r.n == 10);
        CHECK(r.ece >= 0.0);
        CHECK(r.ece <= 1.0);
    }

    // The PPO log starts with the pre-training evaluation row.
    std::ifstream metrics(dir / "ppo_metrics.csv");
    std::string header, first;
    std::getline(metrics, header);
    std::getline(metrics, first);
    CHECK(header.rfind("iteration,", 0) == 0);
    CHECK(first.rfind("0,", 0) == 0);

    // Rerunning skips every stage.
    std::ostringstream again_log;
    Pipeline again(smoke(dir.path()), again_log);
    again.run_all();
    CHECK(again.executed().empty());
    CHECK(again_log.str().find("up to date") != std::string::npos);

    // A changed stage parameter reruns that stage and its dependents only.
    RunConfig beta = smoke(dir.path());
    beta.dpo.beta = 0.3;
    Pipeline changed(beta, log);
    changed.run_all();
    CHECK(changed.executed() == std::vector<std::string>{"dpo", "eval", "report"});

    // An edited file invalidates both its consumer and its producer.
    const std::string original = slurp(dir / "prefs.jsonl");
    std::string prefs = original;
    prefs.erase(prefs.rfind('\n', prefs.size() - 2) + 1);
    {
        std::ofstream out(dir / "prefs.jsonl", std::ios::binary);
        out << prefs;
    }
    Pipeline edited(beta, log);
    edited.run_stage("train-rm");
    edited.run_stage("build-prefs");
    CHECK(edited.executed() == std::vector<std::string>{"train-rm", "build-prefs"});
    CHECK(slurp(dir / "prefs.jsonl") == original);

    Pipeline forced(beta, log, true);
    forced.run_stage("gen-corpus");
    CHECK(forced.executed() == std::vector<std::string>{"gen-corpus"});
}

TEST_CASE("a stage without its inputs names the producing stage", "[pipeline]") {
    test::TempDir dir("pipe_missing");
    std::ostringstream log;
    Pipeline p(smoke(dir.path()), log);
    CHECK_THROWS_AS(p.run_stage("ppo"), MissingArtifactError);
    CHECK_THROWS_WITH(p.run_stage("sft"), Catch::Matchers::ContainsSubstring("gen-corpus"));
    p.gen_corpus();
    CHECK_THROWS_WITH(p.run_stage("cot-decode"), Catch::Matchers::ContainsSubstring("rlsf sft"));
    CHECK_THROWS_AS(p.run_stage("warp"), ConfigError);
    CHECK_THROWS_AS(read_report(dir / "report.json"), MissingArtifactError);
}

TEST_CASE("command line exit codes", "[pipeline][cli]") {
    test::TempDir dir("cli");
    const auto log = dir / "log.txt";
    const std::string smoke_ini = std::string(RLSF_SOURCE_DIR) + "/configs/smoke.ini";
    const std::string out = (dir / "run").string();

    CHECK(cli("print-config", log) == 0);
    CHECK(slurp(log).find("[ppo]") != std::string::npos);
    CHECK(cli("--help", log) == 0);
    CHECK(cli("no-such-stage", log) == 2);
    CHECK(cli("sft -c " + smoke_ini + " -s ppo.warp=1 -o " + out, log) == 2);
    CHECK(cli("ppo -c " + smoke_ini + " --gamma 1.5 -o " + out, log) == 2);
    CHECK(cli("sft -c " + smoke_ini + " -o " + out, log) == 3);
    CHECK(slurp(log).find("gen-corpus") != std::string::npos);
    CHECK(cli("gen-corpus -c " + smoke_ini + " -o " + out, log) == 0);
    // Later invocations find the saved config in the output directory.
    CHECK(cli("gen-corpus -o " + out, log) == 0);
    CHECK(slurp(log).find("up to date") != std::string::npos);
    CHECK(cli("sft -o " + out + " -s sft.lr=nan", log) == 2);
    CHECK(cli("sft -o " + out + " -s sft.lr=1e300 -s sft.epochs=1", log) == 4);
    CHECK(slurp(log).find("numerical") != std::string::npos);
}
