#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rlsf/corpus.hpp"
#include "rlsf/preference.hpp"
#include "rlsf/reward_model.hpp"
#include "rlsf/rl.hpp"
#include "rlsf/transformer.hpp"

namespace rlsf {

struct CorpusConfig {
    std::size_t sft_examples = 10000;
    double reasoning_ratio = 0.5;
    TaskMix mix;
    std::size_t pref_prompts = 500;   // preference and PPO prompt pool
    std::size_t eval_prompts = 200;   // held-out evaluation tasks
    std::size_t bench_prompts = 300;  // held-out reward-model comparisons
};

struct SftConfig {
    double lr = 5e-5;
    int epochs = 5;
    int batch_size = 16;
    bool cosine_schedule = false;
};

struct CotConfig {
    int k = 10;
    int max_new_tokens = 64;
    int probe_tokens = 8;
};

struct PreferenceConfig {
    PairingStrategy strategy = PairingStrategy::AllPairs;
    double min_gap = 0.05;
};

struct EvalConfig {
    int bins = 10;
    ConfidenceAggregation confidence = ConfidenceAggregation::Mean;
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string output_dir = "runs/default";
    CorpusConfig corpus;
    ModelConfig model;
    SftConfig sft;
    CotConfig cot;
    PreferenceConfig preference;
    RewardTrainConfig reward;
    PPOConfig ppo;
    DPOConfig dpo;
    EvalConfig eval;

    /// Throws ConfigError naming the first offending key.
    void validate() const;
};

/// INI text with one section per stage; every field is written.
std::string to_ini(const RunConfig& config);
RunConfig from_ini(const std::string& text);

RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& config);

/// Applies one "section.key=value" override.
void apply_override(RunConfig& config, const std::string& assignment);

/// Keys whose value differs from the reference default, as "section.key: value (default d)".
std::vector<std::string> default_mismatches(const RunConfig& config);

/// The INI text of the listed sections only, for per-stage hashing.
std::string section_text(const RunConfig& config, const std::vector<std::string>& sections);

}  // namespace rlsf
