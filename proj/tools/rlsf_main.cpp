// rlsf: command-line driver for the self-feedback fine-tuning pipeline.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rlsf/common.hpp"
#include "rlsf/config.hpp"
#include "rlsf/manifest.hpp"
#include "rlsf/pipeline.hpp"

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kMissing = 3, kNumerical = 4 };

struct Options {
    std::string config_path;
    std::string out;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<double> gamma;
    std::optional<int> iterations;
    bool force = false;
};

rlsf::RunConfig resolve_config(const Options& o) {
    rlsf::RunConfig config;
    if (!o.config_path.empty()) {
        config = rlsf::load_config(o.config_path);
    } else if (!o.out.empty() && std::filesystem::exists(std::filesystem::path(o.out) / "config.ini")) {
        config = rlsf::load_config(std::filesystem::path(o.out) / "config.ini");
    }
    if (!o.out.empty()) config.output_dir = o.out;
    for (const auto& s : o.sets) rlsf::apply_override(config, s);
    if (o.seed) rlsf::apply_override(config, "run.seed=" + std::to_string(*o.seed));
    if (o.gamma) config.ppo.gamma = *o.gamma;
    if (o.iterations) config.ppo.iterations = *o.iterations;
    config.validate();
    return config;
}

int run(const Options& o, const std::vector<std::string>& stages) {
    const rlsf::RunConfig config = resolve_config(o);
    for (const auto& m : rlsf::default_mismatches(config)) std::cerr << "warning: " << m << "\n";
    std::filesystem::create_directories(config.output_dir);
    rlsf::DirectoryLock lock(config.output_dir);
    std::cout << std::unitbuf;
    rlsf::Pipeline pipeline(config, std::cout, o.force);
    for (const auto& stage : stages) pipeline.run_stage(stage);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Reinforcement learning from self-feedback on a synthetic reasoning corpus"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("-c,--config", o.config_path, "INI config file (default: <out>/config.ini, else built-in defaults)");
        cmd->add_option("-o,--out", o.out, "output directory (overrides run.output_dir)");
        cmd->add_option("-s,--set", o.sets, "override, e.g. ppo.kl_coef=0.1 (repeatable)");
        cmd->add_option("--seed", o.seed, "override run.seed");
        cmd->add_flag("-f,--force", o.force, "rerun even when the manifest says the stage is up to date");
    };

    std::vector<std::pair<CLI::App*, std::vector<std::string>>> commands;
    for (const auto& stage : rlsf::Pipeline::stage_names()) {
        CLI::App* cmd = app.add_subcommand(stage, "run the " + stage + " stage");
        add_common(cmd);
        if (stage == "ppo") {
            cmd->add_option("--gamma", o.gamma, "override ppo.gamma");
            cmd->add_option("--iterations", o.iterations, "override ppo.iterations");
        }
        commands.push_back({cmd, {stage}});
    }
    CLI::App* all = app.add_subcommand("run-all", "run every stage in order");
    add_common(all);
    all->add_option("--gamma", o.gamma, "override ppo.gamma");
    commands.push_back({all, rlsf::Pipeline::stage_names()});

    CLI::App* print = app.add_subcommand("print-config", "write the resolved config to stdout");
    add_common(print);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (print->parsed()) {
            std::cout << rlsf::to_ini(resolve_config(o));
            return kOk;
        }
        for (const auto& [cmd, stages] : commands) {
            if (cmd->parsed()) return run(o, stages);
        }
    } catch (const rlsf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const rlsf::MissingArtifactError& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return kMissing;
    } catch (const rlsf::NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kOther;
    }
    return kOther;
}
