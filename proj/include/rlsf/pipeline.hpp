#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "rlsf/config.hpp"
#include "rlsf/manifest.hpp"

namespace rlsf {

inline constexpr const char* kToolVersion = "0.1.0";

/// Runs the stages of one output directory. Each stage validates its
/// upstream files, skips itself when the manifest shows identical inputs and
/// parameters, and otherwise rewrites its outputs and manifest entry.
class Pipeline {
public:
    Pipeline(RunConfig config, std::ostream& log, bool force = false);

    void gen_corpus();
    void sft();
    void cot_decode();
    void build_prefs();
    void train_rm();
    void ppo();
    void dpo();
    void eval();
    void report();
    void run_all();

    /// Stage names in pipeline order.
    static const std::vector<std::string>& stage_names();
    void run_stage(const std::string& name);

    std::filesystem::path path(const std::string& file) const { return dir_ / file; }
    const RunConfig& config() const { return config_; }

    /// Stages actually executed (not skipped) by this object so far.
    const std::vector<std::string>& executed() const { return executed_; }

private:
    struct StageSpec {
        std::vector<std::string> sections;
        std::vector<std::string> inputs;
        std::vector<std::string> outputs;
        std::string producer_hint;  // stage that creates the first missing input
    };

    void run(const std::string& stage, const StageSpec& spec, const std::function<void()>& body);
    std::string params_hash(const StageSpec& spec) const;

    RunConfig config_;
    std::ostream& log_;
    bool force_;
    std::filesystem::path dir_;
    std::vector<std::string> executed_;
};

/// One evaluation row of the final report.
struct ReportRow {
    std::string name;
    std::string decoding;
    double accuracy = 0.0;
    double ece = 0.0;
    std::size_t n = 0;
};

std::vector<ReportRow> read_report(const std::filesystem::path& path);

}  // namespace rlsf
