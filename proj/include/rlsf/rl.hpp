#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlsf/eval.hpp"
#include "rlsf/reward_model.hpp"

namespace rlsf {

/// One sampled episode. Per-token arrays are indexed by response position t,
/// where state s_t is the prompt followed by the first t response tokens.
struct Trajectory {
    std::uint64_t prompt_id = 0;
    std::size_t prompt_len = 0;
    TokenSeq tokens;                        // prompt followed by the response
    bool truncated = false;                 // response ended without eos
    std::vector<double> behavior_logprobs;  // log pi_old(a_t | s_t) at temperature 1
    RowMatrix old_log_probs;                // full log pi_old(. | s_t), one row per t
    std::vector<double> rewards;            // zero except the last entry
    std::vector<double> values;
    std::vector<double> advantages;
    std::vector<double> returns;

    std::size_t response_len() const { return tokens.size() - prompt_len; }
};

struct PPOConfig {
    double lr = 5e-5;
    int epochs = 5;
    double temperature = 0.7;
    double kl_coef = 0.05;
    double clip = 0.2;
    double gamma = 0.98;
    double lambda = 0.95;
    int batch_size = 32;      // prompts sampled per iteration
    int minibatch_size = 8;   // trajectories per optimizer step
    int iterations = 20;
    int max_new_tokens = 64;
    int eval_interval = 5;    // greedy evaluation every this many iterations (and at both ends)
    bool normalize_advantages = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct DPOConfig {
    double lr = 5e-5;
    int epochs = 5;
    double beta = 0.2;
    double label_smoothing = 0.01;
    int batch_size = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

struct GaeResult {
    std::vector<double> advantages;
    std::vector<double> returns;
};

/// delta_t = r_t + gamma V_{t+1} - V_t with V_T = bootstrap;
/// A_t = sum_l (gamma lambda)^l delta_{t+l}; returns_t = A_t + V_t.
GaeResult gae(std::span<const double> rewards, std::span<const double> values, double bootstrap, double gamma,
              double lambda);

/// Samples one response per prompt at `temperature`, records temperature-1
/// behavior statistics and the terminal reward score(prompt + response).
/// Prompt i uses an RNG stream derived from (seed, stream, i).
std::vector<Trajectory> rollout(const Policy& policy, const RewardModel& rm, const std::vector<TaskInstance>& prompts,
                                double temperature, int max_new_tokens, std::uint64_t seed, std::uint64_t stream);

/// Critic whose raw output equals the reward model's scaled (unclamped) output.
RewardModel critic_from_reward_model(const RewardModel& rm);

/// Fills values[t] = V(s_t) from the critic.
void assign_values(const RewardModel& critic, std::vector<Trajectory>& trajectories);

struct SurrogateStats {
    double loss = 0.0;
    double objective = 0.0;      // mean clipped objective
    double kl = 0.0;             // mean per-token KL(pi_old || pi_theta)
    double clip_fraction = 0.0;  // share of tokens with |ratio - 1| > clip
    std::size_t tokens = 0;
};

/// loss = -mean(min(rho A, clip(rho) A)) + kl_coef * mean(KL) over every
/// response token of the batch, using each trajectory's stored advantages.
/// Accumulates dloss/dtheta into *grad when given.
SurrogateStats ppo_surrogate_loss(const Transformer& model, std::span<const Trajectory* const> batch, double clip,
                                  double kl_coef, std::span<double>* grad = nullptr);

/// One Adam step on the mean squared error between V(s_t) and returns_t; returns the pre-step loss.
double critic_update(RewardModel& critic, std::span<const Trajectory* const> batch, Adam& optimizer);

/// Mean squared value error without updating.
double value_loss(const RewardModel& critic, std::span<const Trajectory* const> batch);

struct PPOMetrics {
    int iteration = 0;
    std::optional<double> mean_terminal_reward;  // sampled rollouts of the iteration
    std::optional<double> mean_kl;
    std::optional<double> clip_fraction;
    std::optional<double> value_loss;
    std::optional<double> mean_disparity_eval;   // greedy responses on the evaluation prompts
    std::optional<double> greedy_reward_eval;
    std::optional<double> accuracy_eval;
};

struct PPOResult {
    std::vector<PPOMetrics> metrics;  // row 0 evaluates the starting policy
    RewardModel critic;
};

/// Greedy-response statistics used by the PPO log.
struct GreedyProbe {
    double mean_disparity = 0.0;  // over prompts with an answer span
    double mean_reward = 0.0;
    double accuracy = 0.0;
};

GreedyProbe greedy_probe(const Policy& policy, const RewardModel& rm, const std::vector<TaskInstance>& tasks,
                         const CotOptions& options = {});

/// Rollout, GAE, then epochs of minibatch surrogate and critic steps, per
/// iteration. Throws NumericalError when mean KL stays above 10 * kl_coef
/// for three consecutive iterations.
PPOResult ppo_train(Policy& policy, const RewardModel& rm, const std::vector<TaskInstance>& prompts,
                    const std::vector<TaskInstance>& eval_tasks, const PPOConfig& config,
                    const std::function<void(const PPOMetrics&)>& on_iteration = {});

void write_ppo_metrics_csv(const std::filesystem::path& path, const std::vector<PPOMetrics>& metrics);

/// -(1 - eps) log sigmoid(delta) - eps log sigmoid(-delta).
double dpo_loss_from_delta(double delta, double label_smoothing);

/// Sum of log pi(response | prompt) at temperature 1.
double response_log_prob(const Transformer& model, const TokenSeq& prompt, const TokenSeq& response);

/// beta * [(log pi(h1) - log ref(h1)) - (log pi(h2) - log ref(h2))].
double dpo_delta(const Transformer& model, const Transformer& ref, const PreferencePair& pair, double beta);

double dpo_loss(const Transformer& model, const Transformer& ref, const PreferencePair& pair, double beta,
                double label_smoothing);

/// As dpo_loss with the reference log-probs precomputed; accumulates
/// weight * dloss/dtheta into `grad` and reports delta.
double dpo_loss_and_gradient(const Transformer& model, double ref_chosen, double ref_rejected,
                             const PreferencePair& pair, double beta, double label_smoothing, std::span<double> grad,
                             double weight = 1.0, double* delta = nullptr);

struct DPOResult {
    std::vector<double> step_losses;
    std::vector<double> epoch_losses;
    double mean_delta_before = 0.0;
    double mean_delta_after = 0.0;
};

double mean_dpo_delta(const Transformer& model, const Transformer& ref, const PreferenceDataset& data, double beta);

/// `ref` stays frozen; `policy` is updated in place.
DPOResult dpo_train(Policy& policy, const Policy& ref, const PreferenceDataset& data, const DPOConfig& config);

}  // namespace rlsf
