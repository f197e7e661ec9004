#include "rlsf/rl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "rlsf/mathutil.hpp"
#include "rlsf/parallel.hpp"
#include "rlsf/rng.hpp"

namespace rlsf {

void PPOConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("ppo lr must be positive");
    if (epochs < 1) throw ConfigError("ppo epochs must be >= 1");
    if (!(temperature > 0)) throw ConfigError("ppo temperature must be positive");
    if (!(kl_coef >= 0)) throw ConfigError("ppo kl_coef must be >= 0");
    if (!(clip > 0 && clip < 1)) throw ConfigError("ppo clip must lie in (0, 1)");
    if (!(gamma >= 0 && gamma <= 1)) throw ConfigError("ppo gamma must lie in [0, 1]");
    if (!(lambda >= 0 && lambda <= 1)) throw ConfigError("ppo lambda must lie in [0, 1]");
    if (batch_size < 1 || minibatch_size < 1) throw ConfigError("ppo batch sizes must be >= 1");
    if (iterations < 0) throw ConfigError("ppo iterations must be >= 0");
    if (max_new_tokens < 1) throw ConfigError("ppo max_new_tokens must be >= 1");
    if (eval_interval < 1) throw ConfigError("ppo eval_interval must be >= 1");
}

void DPOConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("dpo lr must be positive");
    if (epochs < 1) throw ConfigError("dpo epochs must be >= 1");
    if (!(beta > 0)) throw ConfigError("dpo beta must be positive");
    if (!(label_smoothing >= 0 && label_smoothing < 0.5)) throw ConfigError("dpo label_smoothing must lie in [0, 0.5)");
    if (batch_size < 1) throw ConfigError("dpo batch_size must be >= 1");
}

GaeResult gae(std::span<const double> rewards, std::span<const double> values, double bootstrap, double gamma,
              double lambda) {
    if (rewards.size() != values.size()) throw ParameterError("rewards and values differ in length");
    if (!(gamma >= 0 && gamma <= 1 && lambda >= 0 && lambda <= 1)) throw ParameterError("gamma and lambda must lie in [0,1]");
    const std::size_t n = rewards.size();
    GaeResult out{std::vector<double>(n), std::vector<double>(n)};
    double running = 0.0;
    for (std::size_t t = n; t-- > 0;) {
        const double next = t + 1 < n ? values[t + 1] : bootstrap;
        const double delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        out.advantages[t] = running;
        out.returns[t] = running + values[t];
    }
    return out;
}

std::vector<Trajectory> rollout(const Policy& policy, const RewardModel& rm, const std::vector<TaskInstance>& prompts,
                                double temperature, int max_new_tokens, std::uint64_t seed, std::uint64_t stream) {
    std::vector<Trajectory> out(prompts.size());
    parallel_for(prompts.size(), [&](std::size_t i) {
        Rng rng = Rng::derived(seed, stream, i);
        Trajectory tr;
        tr.prompt_id = prompts[i].id;
        const TokenSeq prompt = encode_prompt(policy.vocab, prompts[i].prompt_text);
        tr.prompt_len = prompt.size();
        tr.tokens = sample_decode(policy, prompt, max_new_tokens, temperature, rng);
        if (tr.tokens.size() <= tr.prompt_len) throw LengthError("prompt leaves no room for a response");
        tr.truncated = tr.tokens.back() != policy.vocab.eos();

        const std::span<const TokenId> inputs(tr.tokens.data(), tr.tokens.size() - 1);
        const RowMatrix logp = log_softmax_rows(policy.model.logits(policy.model.forward(inputs)));
        const auto first = static_cast<Eigen::Index>(tr.prompt_len - 1);
        const auto len = static_cast<Eigen::Index>(tr.response_len());
        tr.old_log_probs = logp.middleRows(first, len);
        for (Eigen::Index t = 0; t < len; ++t) {
            tr.behavior_logprobs.push_back(tr.old_log_probs(t, tr.tokens[tr.prompt_len + static_cast<std::size_t>(t)]));
        }
        tr.rewards.assign(tr.response_len(), 0.0);
        tr.rewards.back() = score(rm, tr.tokens);
        out[i] = std::move(tr);
    });
    return out;
}

RewardModel critic_from_reward_model(const RewardModel& rm) {
    if (!rm.scale.fitted) throw ParameterError("critic initialization needs a fitted reward scale");
    RewardModel critic = rm;
    const double a = 2.0 / (rm.scale.hi - rm.scale.lo);
    const double c = -2.0 * rm.scale.lo / (rm.scale.hi - rm.scale.lo) - 1.0;
    for (std::size_t i = 0; i + 1 < critic.head.size(); ++i) critic.head[i] *= a;
    critic.head.back() = a * critic.head.back() + c;
    critic.scale = {};
    critic.step = 0;
    return critic;
}

namespace {

std::span<const TokenId> state_inputs(const Trajectory& tr) { return {tr.tokens.data(), tr.tokens.size() - 1}; }

std::size_t token_total(std::span<const Trajectory* const> batch) {
    std::size_t n = 0;
    for (const Trajectory* tr : batch) n += tr->response_len();
    if (n == 0) throw ParameterError("batch has no response tokens");
    return n;
}

double value_terms(const RewardModel& critic, const Trajectory& tr, double weight, std::span<double>* grad) {
    Transformer::Cache cache;
    RowMatrix hidden;
    const std::vector<double> v = critic.raw_outputs(state_inputs(tr), grad ? &hidden : nullptr, grad ? &cache : nullptr);
    std::vector<double> d_raw(v.size(), 0.0);
    double loss = 0.0;
    for (std::size_t t = 0; t < tr.response_len(); ++t) {
        const double err = v[tr.prompt_len - 1 + t] - tr.returns[t];
        loss += err * err * weight;
        d_raw[tr.prompt_len - 1 + t] = 2.0 * err * weight;
    }
    if (grad) critic.backward(cache, hidden, d_raw, *grad);
    return loss;
}

}  // namespace

void assign_values(const RewardModel& critic, std::vector<Trajectory>& trajectories) {
    parallel_for(trajectories.size(), [&](std::size_t i) {
        Trajectory& tr = trajectories[i];
        const std::vector<double> v = critic.raw_outputs(state_inputs(tr));
        tr.values.assign(v.begin() + static_cast<std::ptrdiff_t>(tr.prompt_len - 1), v.end());
    });
}

SurrogateStats ppo_surrogate_loss(const Transformer& model, std::span<const Trajectory* const> batch, double clip,
                                  double kl_coef, std::span<double>* grad) {
    if (batch.empty()) throw ParameterError("empty PPO minibatch");
    const std::size_t n_tokens = token_total(batch);
    const double w = 1.0 / static_cast<double>(n_tokens);
    struct Part {
        double objective = 0, kl = 0, clipped = 0;
    };
    std::vector<Part> parts(batch.size());

    auto one = [&](std::size_t i, std::span<double>* g) {
        const Trajectory& tr = *batch[i];
        if (tr.advantages.size() != tr.response_len() || tr.behavior_logprobs.size() != tr.response_len()) {
            throw ParameterError("trajectory " + std::to_string(i) + " lacks advantages or behavior log-probs");
        }
        Transformer::Cache cache;
        const RowMatrix hidden = model.forward(state_inputs(tr), g ? &cache : nullptr);
        const RowMatrix logits = model.logits(hidden);
        const RowMatrix logp = log_softmax_rows(logits);
        RowMatrix d_logits;
        if (g) d_logits = RowMatrix::Zero(logits.rows(), logits.cols());
        Part part;
        for (std::size_t t = 0; t < tr.response_len(); ++t) {
            const auto row = static_cast<Eigen::Index>(tr.prompt_len - 1 + t);
            const TokenId a = tr.tokens[tr.prompt_len + t];
            const double adv = tr.advantages[t];
            const double ratio = std::exp(logp(row, a) - tr.behavior_logprobs[t]);
            const double unclipped = ratio * adv;
            const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip) * adv;
            const bool clip_active = clipped < unclipped;
            part.objective += std::min(unclipped, clipped);
            if (std::abs(ratio - 1.0) > clip) part.clipped += 1.0;
            const auto old_row = tr.old_log_probs.row(static_cast<Eigen::Index>(t));
            const Eigen::RowVectorXd old_p = old_row.array().exp();
            const double kl = (old_p.array() * (old_row.array() - logp.row(row).array())).sum();
            part.kl += kl;
            if (!std::isfinite(part.objective) || !std::isfinite(kl)) {
                throw NumericalError("non-finite PPO surrogate at trajectory " + std::to_string(i) + ", state " +
                                     std::to_string(t));
            }
            if (g) {
                const Eigen::RowVectorXd p = logp.row(row).array().exp();
                const double g_obj = clip_active ? 0.0 : unclipped;  // d objective / d log pi(a)
                d_logits.row(row) = w * (g_obj * p + kl_coef * (p - old_p));
                d_logits(row, a) -= w * g_obj;
            }
        }
        if (g) {
            const RowMatrix d_hidden = model.logits_backward(hidden, d_logits, *g);
            model.backward(cache, d_hidden, *g);
        }
        parts[i] = part;
        return 0.0;
    };

    if (grad) {
        accumulate_gradients(batch.size(), *grad, [&](std::size_t i, std::span<double> g) { return one(i, &g); });
    } else {
        parallel_for(batch.size(), [&](std::size_t i) { one(i, nullptr); });
    }
    SurrogateStats s;
    s.tokens = n_tokens;
    for (const Part& p : parts) {
        s.objective += p.objective * w;
        s.kl += p.kl * w;
        s.clip_fraction += p.clipped * w;
    }
    s.loss = -s.objective + kl_coef * s.kl;
    return s;
}

double value_loss(const RewardModel& critic, std::span<const Trajectory* const> batch) {
    const double w = 1.0 / static_cast<double>(token_total(batch));
    std::vector<double> losses(batch.size());
    parallel_for(batch.size(), [&](std::size_t i) { losses[i] = value_terms(critic, *batch[i], w, nullptr); });
    return std::accumulate(losses.begin(), losses.end(), 0.0);
}

double critic_update(RewardModel& critic, std::span<const Trajectory* const> batch, Adam& optimizer) {
    const double w = 1.0 / static_cast<double>(token_total(batch));
    std::vector<double> grad(critic.param_count(), 0.0);
    const double loss = accumulate_gradients(batch.size(), grad, [&](std::size_t i, std::span<double> g) {
        return value_terms(critic, *batch[i], w, &g);
    });
    if (!std::isfinite(loss)) throw NumericalError("non-finite value loss");
    critic.apply_step(optimizer, grad);
    return loss;
}

GreedyProbe greedy_probe(const Policy& policy, const RewardModel& rm, const std::vector<TaskInstance>& tasks,
                         const CotOptions& options) {
    if (tasks.empty()) throw ParameterError("greedy probe needs at least one task");
    std::vector<PredictionRecord> records(tasks.size());
    std::vector<double> rewards(tasks.size());
    parallel_for(tasks.size(), [&](std::size_t i) {
        records[i] = predict(policy, tasks[i], options);
        rewards[i] = score(rm, concat(encode_prompt(policy.vocab, tasks[i].prompt_text), records[i].response));
    });
    GreedyProbe probe;
    std::size_t spans = 0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (records[i].disparity) {
            probe.mean_disparity += *records[i].disparity;
            ++spans;
        }
        probe.mean_reward += rewards[i];
        probe.accuracy += records[i].correct ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(tasks.size());
    probe.mean_disparity = spans ? probe.mean_disparity / static_cast<double>(spans) : 0.0;
    probe.mean_reward /= n;
    probe.accuracy /= n;
    return probe;
}

PPOResult ppo_train(Policy& policy, const RewardModel& rm, const std::vector<TaskInstance>& prompts,
                    const std::vector<TaskInstance>& eval_tasks, const PPOConfig& config,
                    const std::function<void(const PPOMetrics&)>& on_iteration) {
    config.validate();
    if (prompts.empty()) throw ParameterError("PPO needs at least one training prompt");
    PPOResult result{{}, critic_from_reward_model(rm)};
    RewardModel& critic = result.critic;
    Adam policy_opt(policy.model.param_count(), {.lr = config.lr});
    Adam critic_opt(critic.param_count(), {.lr = config.lr});
    CotOptions probe_options;
    probe_options.max_new_tokens = config.max_new_tokens;

    auto evaluate = [&](PPOMetrics& m) {
        if (eval_tasks.empty()) return;
        const GreedyProbe g = greedy_probe(policy, rm, eval_tasks, probe_options);
        m.mean_disparity_eval = g.mean_disparity;
        m.greedy_reward_eval = g.mean_reward;
        m.accuracy_eval = g.accuracy;
    };
    auto emit = [&](const PPOMetrics& m) {
        result.metrics.push_back(m);
        if (on_iteration) on_iteration(m);
    };

    PPOMetrics start;
    evaluate(start);
    emit(start);

    Rng prompt_rng = Rng::derived(config.seed, 0x70726f6d7074ULL);
    std::vector<std::size_t> prompt_order(prompts.size());
    std::iota(prompt_order.begin(), prompt_order.end(), 0);
    prompt_rng.shuffle(std::span(prompt_order));
    std::size_t cursor = 0;
    int kl_streak = 0;

    for (int it = 1; it <= config.iterations; ++it) {
        std::vector<TaskInstance> batch_prompts;
        for (int b = 0; b < config.batch_size; ++b) {
            if (cursor == prompt_order.size()) {
                prompt_rng.shuffle(std::span(prompt_order));
                cursor = 0;
            }
            batch_prompts.push_back(prompts[prompt_order[cursor++]]);
        }
        std::vector<Trajectory> trajs = rollout(policy, rm, batch_prompts, config.temperature, config.max_new_tokens,
                                                config.seed, static_cast<std::uint64_t>(it));
        assign_values(critic, trajs);
        for (Trajectory& tr : trajs) {
            GaeResult g = gae(tr.rewards, tr.values, 0.0, config.gamma, config.lambda);
            tr.advantages = std::move(g.advantages);
            tr.returns = std::move(g.returns);
        }
        if (config.normalize_advantages) {
            double sum = 0, sq = 0;
            std::size_t n = 0;
            for (const Trajectory& tr : trajs) {
                for (double a : tr.advantages) {
                    sum += a;
                    sq += a * a;
                    ++n;
                }
            }
            const double mean = sum / static_cast<double>(n);
            const double sd = std::sqrt(std::max(0.0, sq / static_cast<double>(n) - mean * mean));
            for (Trajectory& tr : trajs) {
                for (double& a : tr.advantages) a = (a - mean) / (sd + 1e-8);
            }
        }

        PPOMetrics m;
        m.iteration = it;
        double reward_sum = 0;
        for (const Trajectory& tr : trajs) reward_sum += tr.rewards.back();
        m.mean_terminal_reward = reward_sum / static_cast<double>(trajs.size());

        Rng mb_rng = Rng::derived(config.seed, 0x6d62ULL, static_cast<std::uint64_t>(it));
        std::vector<std::size_t> order(trajs.size());
        std::iota(order.begin(), order.end(), 0);
        double kl_sum = 0, clip_sum = 0, value_sum = 0;
        int steps = 0;
        std::vector<double> grad(policy.model.param_count());
        for (int epoch = 0; epoch < config.epochs; ++epoch) {
            mb_rng.shuffle(std::span(order));
            for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.minibatch_size)) {
                const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.minibatch_size));
                std::vector<const Trajectory*> mb;
                for (std::size_t j = start; j < end; ++j) mb.push_back(&trajs[order[j]]);
                std::fill(grad.begin(), grad.end(), 0.0);
                std::span<double> g(grad);
                const SurrogateStats s = ppo_surrogate_loss(policy.model, mb, config.clip, config.kl_coef, &g);
                policy_opt.step(policy.model.params(), grad);
                ++policy.step;
                value_sum += critic_update(critic, mb, critic_opt);
                kl_sum += s.kl;
                clip_sum += s.clip_fraction;
                ++steps;
            }
        }
        m.mean_kl = kl_sum / steps;
        m.clip_fraction = clip_sum / steps;
        m.value_loss = value_sum / steps;

        kl_streak = *m.mean_kl > 10.0 * config.kl_coef ? kl_streak + 1 : 0;
        if (it % config.eval_interval == 0 || it == config.iterations) evaluate(m);
        emit(m);
        if (kl_streak >= 3) {
            throw NumericalError("PPO diverged: mean KL above " + std::to_string(10.0 * config.kl_coef) +
                                 " for three consecutive iterations (iteration " + std::to_string(it) + ")");
        }
    }
    return result;
}

void write_ppo_metrics_csv(const std::filesystem::path& path, const std::vector<PPOMetrics>& metrics) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "iteration,mean_terminal_reward,mean_kl,clip_fraction,value_loss,mean_disparity_eval,greedy_reward_eval,"
           "accuracy_eval\n";
    auto cell = [&](const std::optional<double>& v) {
        if (!v) return std::string();
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.10f", *v);
        return std::string(buf);
    };
    for (const auto& m : metrics) {
        out << m.iteration << ',' << cell(m.mean_terminal_reward) << ',' << cell(m.mean_kl) << ','
            << cell(m.clip_fraction) << ',' << cell(m.value_loss) << ',' << cell(m.mean_disparity_eval) << ','
            << cell(m.greedy_reward_eval) << ',' << cell(m.accuracy_eval) << '\n';
    }
}

double dpo_loss_from_delta(double delta, double label_smoothing) {
    return -(1.0 - label_smoothing) * log_sigmoid(delta) - label_smoothing * log_sigmoid(-delta);
}

double response_log_prob(const Transformer& model, const TokenSeq& prompt, const TokenSeq& response) {
    const std::vector<double> lp = sequence_log_probs(model, concat(prompt, response), prompt.size());
    return std::accumulate(lp.begin(), lp.end(), 0.0);
}

double dpo_delta(const Transformer& model, const Transformer& ref, const PreferencePair& pair, double beta) {
    return beta * ((response_log_prob(model, pair.prompt, pair.chosen) - response_log_prob(ref, pair.prompt, pair.chosen)) -
                   (response_log_prob(model, pair.prompt, pair.rejected) -
                    response_log_prob(ref, pair.prompt, pair.rejected)));
}

double dpo_loss(const Transformer& model, const Transformer& ref, const PreferencePair& pair, double beta,
                double label_smoothing) {
    return dpo_loss_from_delta(dpo_delta(model, ref, pair, beta), label_smoothing);
}

namespace {

struct ScoredSequence {
    TokenSeq tokens;
    std::size_t prompt_len = 0;
    Transformer::Cache cache;
    RowMatrix hidden;
    RowMatrix logp;
    double sum = 0.0;

    ScoredSequence(const Transformer& model, const TokenSeq& prompt, const TokenSeq& response)
        : tokens(concat(prompt, response)), prompt_len(prompt.size()) {
        hidden = model.forward(std::span<const TokenId>(tokens.data(), tokens.size() - 1), &cache);
        logp = log_softmax_rows(model.logits(hidden));
        for (std::size_t i = prompt_len; i < tokens.size(); ++i) sum += logp(static_cast<Eigen::Index>(i - 1), tokens[i]);
    }

    /// Accumulates coef * d(sum)/dtheta.
    void backward(const Transformer& model, double coef, std::span<double> grad) const {
        RowMatrix d_logits = RowMatrix::Zero(logp.rows(), logp.cols());
        for (std::size_t i = prompt_len; i < tokens.size(); ++i) {
            const auto row = static_cast<Eigen::Index>(i - 1);
            d_logits.row(row) = -coef * logp.row(row).array().exp();
            d_logits(row, tokens[i]) += coef;
        }
        model.backward(cache, model.logits_backward(hidden, d_logits, grad), grad);
    }
};

}  // namespace

double dpo_loss_and_gradient(const Transformer& model, double ref_chosen, double ref_rejected,
                             const PreferencePair& pair, double beta, double label_smoothing, std::span<double> grad,
                             double weight, double* delta_out) {
    const ScoredSequence chosen(model, pair.prompt, pair.chosen);
    const ScoredSequence rejected(model, pair.prompt, pair.rejected);
    const double delta = beta * ((chosen.sum - ref_chosen) - (rejected.sum - ref_rejected));
    const double g = weight * (sigmoid(delta) - (1.0 - label_smoothing));  // d loss / d delta
    chosen.backward(model, g * beta, grad);
    rejected.backward(model, -g * beta, grad);
    if (delta_out) *delta_out = delta;
    return weight * dpo_loss_from_delta(delta, label_smoothing);
}

double mean_dpo_delta(const Transformer& model, const Transformer& ref, const PreferenceDataset& data, double beta) {
    if (data.pairs.empty()) throw ParameterError("mean delta of an empty preference set");
    std::vector<double> d(data.pairs.size());
    parallel_for(d.size(), [&](std::size_t i) { d[i] = dpo_delta(model, ref, data.pairs[i], beta); });
    return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
}

DPOResult dpo_train(Policy& policy, const Policy& ref, const PreferenceDataset& data, const DPOConfig& config) {
    config.validate();
    const auto& pairs = data.pairs;
    if (pairs.empty()) throw ParameterError("DPO needs at least one preference pair");
    std::vector<double> ref_chosen(pairs.size()), ref_rejected(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t i) {
        ref_chosen[i] = response_log_prob(ref.model, pairs[i].prompt, pairs[i].chosen);
        ref_rejected[i] = response_log_prob(ref.model, pairs[i].prompt, pairs[i].rejected);
    });
    DPOResult result;
    result.mean_delta_before = mean_dpo_delta(policy.model, ref.model, data, config.beta);
    Adam opt(policy.model.param_count(), {.lr = config.lr});
    Rng rng = Rng::derived(config.seed, 0x64706fULL);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> grad(policy.model.param_count());
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(std::span(order));
        double sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t n = std::min(order.size() - start, static_cast<std::size_t>(config.batch_size));
            const double w = 1.0 / static_cast<double>(n);
            std::fill(grad.begin(), grad.end(), 0.0);
            const double loss = accumulate_gradients(n, grad, [&](std::size_t i, std::span<double> g) {
                const std::size_t k = order[start + i];
                return dpo_loss_and_gradient(policy.model, ref_chosen[k], ref_rejected[k], pairs[k], config.beta,
                                             config.label_smoothing, g, w);
            });
            if (!std::isfinite(loss)) throw NumericalError("non-finite DPO loss");
            opt.step(policy.model.params(), grad);
            ++policy.step;
            result.step_losses.push_back(loss);
            sum += loss;
            ++steps;
        }
        result.epoch_losses.push_back(sum / static_cast<double>(steps));
    }
    result.mean_delta_after = mean_dpo_delta(policy.model, ref.model, data, config.beta);
    return result;
}

}  // namespace rlsf
