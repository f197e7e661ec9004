#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rlsf/checkpoint.hpp"
#include "rlsf/optim.hpp"
#include "rlsf/preference.hpp"

namespace rlsf {

/// Linear map of raw outputs onto [-1, 1], fitted from observed extremes.
struct RewardScale {
    double lo = 0.0;
    double hi = 0.0;
    bool fitted = false;

    /// min/max of `raw`. A degenerate range is widened to (x - 0.5, x + 0.5).
    static RewardScale fit(std::span<const double> raw);

    /// 2 (raw - lo) / (hi - lo) - 1, clamped. Throws ParameterError when unfitted.
    double apply(double raw) const;

    bool operator==(const RewardScale&) const = default;
};

/// Transformer backbone plus a scalar head (width weights, then a bias) read
/// from the final hidden state. Used for the reward model and for the critic.
struct RewardModel {
    Vocabulary vocab;
    Transformer backbone;
    std::vector<double> head;
    RewardScale scale;
    std::uint64_t step = 0;

    /// Backbone copied from the policy; head zeroed so every raw output starts at 0.
    static RewardModel from_policy(const Policy& policy);

    std::size_t param_count() const { return backbone.param_count() + head.size(); }

    /// Raw head output at every position of `seq`. `hidden` and `cache` are
    /// filled when given, for a later backward().
    std::vector<double> raw_outputs(std::span<const TokenId> seq, RowMatrix* hidden = nullptr,
                                    Transformer::Cache* cache = nullptr) const;

    double raw_score(std::span<const TokenId> seq) const;

    /// Accumulates gradients of sum_t d_raw[t] * raw_t into `grad`
    /// (backbone entries first, then head entries).
    void backward(const Transformer::Cache& cache, const RowMatrix& hidden, std::span<const double> d_raw,
                  std::span<double> grad) const;

    /// One optimizer step over backbone and head jointly.
    void apply_step(Adam& optimizer, std::span<const double> grad);
};

/// Scaled, clamped reward of a complete sequence (prompt followed by response).
double score(const RewardModel& rm, std::span<const TokenId> seq);

/// Entry t is the score of seq[0..t].
std::vector<double> per_token_rewards(const RewardModel& rm, std::span<const TokenId> seq);

TokenSeq concat(const TokenSeq& prompt, const TokenSeq& response);

/// -log sigmoid(R(q, chosen) - R(q, rejected)) on raw outputs.
double bt_loss(const RewardModel& rm, const PreferencePair& pair);

/// As bt_loss, also accumulating weight * dL/dphi into `grad`.
double bt_loss_and_gradient(const RewardModel& rm, const PreferencePair& pair, std::span<double> grad,
                            double weight = 1.0);

struct RewardTrainConfig {
    double lr = 5e-5;
    int epochs = 5;
    int batch_size = 8;
    std::uint64_t seed = 0;
};

struct RewardTrainResult {
    std::vector<double> step_losses;   // mean batch loss before each update
    std::vector<double> epoch_losses;  // mean of step_losses per epoch
};

/// Minimizes mean BT loss with Adam, then fits the scale over every chosen
/// and rejected training sequence.
RewardTrainResult train_reward_model(RewardModel& rm, const PreferenceDataset& data, const RewardTrainConfig& config);

struct LabeledPair {
    TokenSeq preferred;  // full sequences, prompt included
    TokenSeq other;
};

/// Fraction of pairs whose preferred member has the higher raw output; ties count 1/2.
double pairwise_accuracy(const RewardModel& rm, const std::vector<LabeledPair>& pairs);

Checkpoint to_checkpoint(const RewardModel& rm, CheckpointKind kind = CheckpointKind::Reward);
RewardModel reward_model_from_checkpoint(const Checkpoint& ckpt);
void save_reward_model(const std::filesystem::path& path, const RewardModel& rm,
                       CheckpointKind kind = CheckpointKind::Reward);
RewardModel load_reward_model(const std::filesystem::path& path);

}  // namespace rlsf
