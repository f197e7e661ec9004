#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "rlsf/corpus.hpp"
#include "rlsf/rl.hpp"
#include "support.hpp"

using namespace rlsf;
using Catch::Approx;

namespace {

// A_t = sum_{l>=0} (gamma lambda)^l delta_{t+l}, written as an explicit double sum.
std::vector<double> oracle_gae(const std::vector<double>& r, const std::vector<double>& v, double gamma, double lambda) {
    const std::size_t n = r.size();
    std::vector<double> out(n, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t l = 0; t + l < n; ++l) {
            const std::size_t k = t + l;
            const double next = k + 1 < n ? v[k + 1] : 0.0;
            const double delta = r[k] + gamma * next - v[k];
            out[t] += std::pow(gamma * lambda, static_cast<double>(l)) * delta;
        }
    }
    return out;
}

RewardModel fitted_rm(const Policy& base, std::uint64_t seed) {
    RewardModel rm = RewardModel::from_policy(base);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 0.5);
    for (double& w : rm.head) w = n(rng);
    rm.scale = RewardScale::fit(std::vector<double>{-2.0, 2.0});
    return rm;
}

std::vector<TaskInstance> prompts(std::size_t n, std::uint64_t seed = 1) {
    TaskMix mix;
    mix.max_operand = 9;
    return generate_tasks(seed, 0, n, mix);
}

std::vector<const Trajectory*> pointers(const std::vector<Trajectory>& ts) {
    std::vector<const Trajectory*> out;
    for (const auto& t : ts) out.push_back(&t);
    return out;
}

void random_advantages(std::vector<Trajectory>& ts, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& t : ts) {
        t.advantages.resize(t.response_len());
        for (double& a : t.advantages) a = n(rng);
    }
}

PreferencePair dpo_pair(const Vocabulary& v, const std::string& a, const std::string& b) {
    PreferencePair p;
    p.prompt_text = "Q: 3 + 3";
    p.prompt = encode_prompt(v, p.prompt_text);
    p.chosen = v.encode(a);
    p.chosen.push_back(v.eos());
    p.rejected = v.encode(b);
    p.rejected.push_back(v.eos());
    return p;
}

}  // namespace

TEST_CASE("GAE matches the explicit double sum", "[rl][property]") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 1.0);
    const double grid[] = {0.0, 0.5, 0.95, 0.98, 1.0};
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t len = 1 + rng() % 20;
        std::vector<double> r(len), v(len);
        for (auto& x : r) x = n(rng);
        for (auto& x : v) x = n(rng);
        for (double gamma : grid) {
            for (double lambda : grid) {
                const GaeResult g = gae(r, v, 0.0, gamma, lambda);
                const auto want = oracle_gae(r, v, gamma, lambda);
                for (std::size_t t = 0; t < len; ++t) {
                    CHECK(std::abs(g.advantages[t] - want[t]) < 1e-9);
                    CHECK(g.returns[t] == Approx(g.advantages[t] + v[t]).margin(1e-12));
                }
            }
        }
    }
}

TEST_CASE("GAE on a terminal-only reward", "[rl]") {
    const std::vector<double> r{0.0, 0.0, 1.0};
    const std::vector<double> v{0.0, 0.0, 0.0};
    const GaeResult g = gae(r, v, 0.0, 1.0, 1.0);
    CHECK(g.advantages == std::vector<double>{1.0, 1.0, 1.0});
    const GaeResult d = gae(r, v, 0.0, 0.98, 1.0);
    CHECK(d.advantages[0] == Approx(0.98 * 0.98).margin(1e-15));
    CHECK(d.advantages[0] != g.advantages[0]);
    CHECK_THROWS_AS(gae(r, std::vector<double>{0.0}, 0.0, 1.0, 1.0), ParameterError);
}

TEST_CASE("GAE worked example", "[rl]") {
    const std::vector<double> r{0.0, 0.0, 1.0};
    const std::vector<double> v{0.5, 0.6, 0.7};
    const GaeResult g = gae(r, v, 0.0, 0.98, 0.95);
    CHECK(g.advantages[2] == Approx(0.3).margin(1e-12));
    CHECK(g.advantages[1] == Approx(0.3653).margin(1e-12));
    CHECK(g.advantages[0] == Approx(0.4280943).margin(1e-12));
    CHECK(g.returns[0] == Approx(0.9280943).margin(1e-12));
    const GaeResult l0 = gae(r, v, 0.0, 0.98, 0.0);
    CHECK(l0.advantages[0] == Approx(0.088).margin(1e-12));
    CHECK(l0.advantages[1] == Approx(0.086).margin(1e-12));
}

TEST_CASE("surrogate equals minus the mean advantage at the old policy", "[rl]") {
    const Policy p = test::tiny_policy(2, 3.0);
    const RewardModel rm = fitted_rm(p, 2);
    auto ts = rollout(p, rm, prompts(4), 0.7, 12, 5, 1);
    random_advantages(ts, 3);
    const auto batch = pointers(ts);
    const SurrogateStats s = ppo_surrogate_loss(p.model, batch, 0.2, 0.05);
    double sum = 0;
    std::size_t n = 0;
    for (const auto& t : ts) {
        sum += std::accumulate(t.advantages.begin(), t.advantages.end(), 0.0);
        n += t.advantages.size();
    }
    CHECK(s.tokens == n);
    CHECK(s.kl == 0.0);
    CHECK(s.clip_fraction == 0.0);
    CHECK(s.loss == Approx(-sum / static_cast<double>(n)).margin(1e-9));
}

TEST_CASE("clipped objective terms", "[rl]") {
    // One-token trajectory whose old log-prob is shifted so the ratio is chosen exactly.
    const Policy p = test::tiny_policy(4, 3.0);
    const RewardModel rm = fitted_rm(p, 4);
    auto ts = rollout(p, rm, prompts(1), 1.0, 1, 9, 1);
    Trajectory& t = ts[0];
    REQUIRE(t.response_len() == 1);
    const std::vector<const Trajectory*> batch{&t};
    const double logp = t.behavior_logprobs[0];
    auto objective = [&](double ratio, double adv) {
        t.behavior_logprobs[0] = logp - std::log(ratio);
        t.advantages = {adv};
        return ppo_surrogate_loss(p.model, batch, 0.2, 0.0).objective;
    };
    CHECK(objective(1.3, 1.0) == Approx(1.2).margin(1e-12));
    CHECK(objective(0.5, -1.0) == Approx(-0.8).margin(1e-12));
    CHECK(objective(1.1, 1.0) == Approx(1.1).margin(1e-12));
    CHECK(objective(0.5, 1.0) == Approx(0.5).margin(1e-12));
}

TEST_CASE("PPO surrogate gradient matches finite differences", "[rl][gradient]") {
    const Policy p = test::tiny_policy(6, 3.0);
    const RewardModel rm = fitted_rm(p, 6);
    auto ts = rollout(p, rm, prompts(3), 0.7, 10, 7, 1);
    random_advantages(ts, 8);
    // Move away from the old policy so ratios and KL are non-trivial, keeping every ratio inside the clip band.
    Transformer model = p.model;
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.0, 0.01);
    for (double& w : model.params()) w += n(rng);
    const auto batch = pointers(ts);
    const double clip = 10.0;
    std::vector<double> grad(model.param_count(), 0.0);
    std::span<double> g(grad);
    const SurrogateStats s = ppo_surrogate_loss(model, batch, clip, 0.3, &g);
    CHECK(s.kl > 0.0);
    const auto coords = test::pick_coords(grad, 40, 10);
    REQUIRE(coords.size() >= 20);
    const double err = test::worst_fd_error(
        model.params(), [&] { return ppo_surrogate_loss(model, batch, clip, 0.3).loss; }, grad, coords);
    CHECK(err <= 1e-3);
}

TEST_CASE("clipped tokens pass no objective gradient", "[rl]") {
    const Policy p = test::tiny_policy(7, 3.0);
    const RewardModel rm = fitted_rm(p, 7);
    auto ts = rollout(p, rm, prompts(2), 0.7, 8, 7, 1);
    for (auto& t : ts) {
        t.advantages.assign(t.response_len(), 1.0);
        for (double& lp : t.behavior_logprobs) lp -= std::log(2.0);  // ratio 2 > 1 + clip
    }
    const auto batch = pointers(ts);
    std::vector<double> grad(p.model.param_count(), 0.0);
    std::span<double> g(grad);
    const SurrogateStats s = ppo_surrogate_loss(p.model, batch, 0.2, 0.0, &g);
    CHECK(s.clip_fraction == 1.0);
    CHECK(std::all_of(grad.begin(), grad.end(), [](double x) { return x == 0.0; }));
}

TEST_CASE("rollouts are reproducible and terminally rewarded", "[rl]") {
    const Policy p = test::tiny_policy(11, 3.0);
    const RewardModel rm = fitted_rm(p, 11);
    const auto a = rollout(p, rm, prompts(5), 0.7, 12, 3, 2);
    const auto b = rollout(p, rm, prompts(5), 0.7, 12, 3, 2);
    const auto c = rollout(p, rm, prompts(5), 0.7, 12, 4, 2);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].tokens == b[i].tokens);
        differs |= a[i].tokens != c[i].tokens;
        for (std::size_t t = 0; t + 1 < a[i].rewards.size(); ++t) CHECK(a[i].rewards[t] == 0.0);
        CHECK(a[i].rewards.back() == score(rm, a[i].tokens));
        CHECK(a[i].truncated == (a[i].tokens.back() != p.vocab.eos()));
        CHECK(static_cast<std::size_t>(a[i].old_log_probs.rows()) == a[i].response_len());
    }
    CHECK(differs);
}

TEST_CASE("the critic starts at the scaled reward", "[rl]") {
    const Policy p = test::tiny_policy(12, 3.0);
    RewardModel rm = fitted_rm(p, 12);
    rm.scale = RewardScale::fit(std::vector<double>{-0.7, 1.9});
    const RewardModel critic = critic_from_reward_model(rm);
    const TokenSeq seq = encode_prompt(p.vocab, "Q: 1 + 2\nSo the answer is 3.");
    const auto raw = rm.raw_outputs(seq);
    const auto values = critic.raw_outputs(seq);
    for (std::size_t t = 0; t < seq.size(); ++t) {
        CHECK(values[t] == Approx(2.0 * (raw[t] - rm.scale.lo) / (rm.scale.hi - rm.scale.lo) - 1.0).margin(1e-12));
    }
    CHECK_THROWS_AS(critic_from_reward_model(RewardModel::from_policy(p)), ParameterError);
}

TEST_CASE("critic updates reduce value error", "[rl]") {
    const Policy p = test::tiny_policy(13, 3.0);
    const RewardModel rm = fitted_rm(p, 13);
    RewardModel critic = critic_from_reward_model(rm);
    auto ts = rollout(p, rm, prompts(4), 0.7, 10, 1, 1);
    for (auto& t : ts) {
        t.returns.assign(t.response_len(), 0.5);
    }
    const auto batch = pointers(ts);
    Adam opt(critic.param_count(), {.lr = 1e-3});
    const double before = value_loss(critic, batch);
    for (int i = 0; i < 30; ++i) critic_update(critic, batch, opt);
    CHECK(value_loss(critic, batch) < before);
}

TEST_CASE("DPO loss closed forms", "[rl]") {
    CHECK(dpo_loss_from_delta(0.0, 0.0) == Approx(std::log(2.0)).margin(1e-12));
    CHECK(dpo_loss_from_delta(0.0, 0.01) == Approx(std::log(2.0)).margin(1e-12));
    CHECK(dpo_loss_from_delta(0.0, 0.3) == Approx(std::log(2.0)).margin(1e-12));
    CHECK(dpo_loss_from_delta(1.0, 0.0) == Approx(std::log1p(std::exp(-1.0))).margin(1e-12));
    CHECK(dpo_loss_from_delta(50.0, 0.0) < 1e-20);

    const Policy p = test::tiny_policy(14, 3.0);
    const auto pair = dpo_pair(p.vocab, "3 + 3 = 6\nSo the answer is 6.", "So the answer is 7.");
    CHECK(dpo_delta(p.model, p.model, pair, 0.2) == 0.0);
    CHECK(dpo_loss(p.model, p.model, pair, 0.2, 0.01) == Approx(std::log(2.0)).margin(1e-12));
    const double lp = response_log_prob(p.model, pair.prompt, pair.chosen);
    const auto per = sequence_log_probs(p.model, concat(pair.prompt, pair.chosen), pair.prompt.size());
    CHECK(lp == Approx(std::accumulate(per.begin(), per.end(), 0.0)).margin(1e-12));
}

TEST_CASE("DPO gradient matches finite differences", "[rl][gradient]") {
    const Policy ref = test::tiny_policy(15, 3.0);
    Transformer model = ref.model;
    std::mt19937_64 rng(15);
    std::normal_distribution<double> n(0.0, 0.05);
    for (double& w : model.params()) w += n(rng);
    const auto pair = dpo_pair(ref.vocab, "3 + 3 = 6\nSo the answer is 6.", "So the answer is 9.");
    const double rc = response_log_prob(ref.model, pair.prompt, pair.chosen);
    const double rr = response_log_prob(ref.model, pair.prompt, pair.rejected);
    std::vector<double> grad(model.param_count(), 0.0);
    double delta = 0;
    const double loss = dpo_loss_and_gradient(model, rc, rr, pair, 0.2, 0.01, grad, 1.0, &delta);
    CHECK(loss == Approx(dpo_loss(model, ref.model, pair, 0.2, 0.01)).epsilon(1e-12));
    CHECK(delta == Approx(dpo_delta(model, ref.model, pair, 0.2)).epsilon(1e-12));
    const auto coords = test::pick_coords(grad, 40, 16);
    REQUIRE(coords.size() >= 20);
    const double err = test::worst_fd_error(
        model.params(), [&] { return dpo_loss(model, ref.model, pair, 0.2, 0.01); }, grad, coords);
    CHECK(err <= 1e-3);
}

TEST_CASE("DPO training raises the preference margin", "[rl]") {
    Policy policy = test::tiny_policy(17, 2.0);
    const Policy ref = policy;
    PreferenceDataset ds;
    for (int i = 0; i < 4; ++i) {
        ds.pairs.push_back(dpo_pair(policy.vocab, "So the answer is " + std::to_string(i) + ".", "So the answer is 0" + std::to_string(i) + "."));
    }
    const DPOConfig cfg{.lr = 1e-3, .epochs = 3, .beta = 0.2, .label_smoothing = 0.01, .batch_size = 2, .seed = 1};
    const DPOResult res = dpo_train(policy, ref, ds, cfg);
    CHECK(res.mean_delta_before == 0.0);
    CHECK(res.mean_delta_after > 0.0);
    CHECK(res.epoch_losses.size() == 3);
    CHECK(res.step_losses.front() == Approx(std::log(2.0)).margin(1e-12));
    CHECK(res.mean_delta_after == Approx(mean_dpo_delta(policy.model, ref.model, ds, 0.2)).margin(1e-12));
}

TEST_CASE("PPO runs end to end and logs every iteration", "[rl]") {
    Policy policy = test::tiny_policy(18, 2.0);
    const RewardModel rm = fitted_rm(policy, 18);
    PPOConfig cfg;
    cfg.iterations = 2;
    cfg.batch_size = 4;
    cfg.minibatch_size = 2;
    cfg.epochs = 1;
    cfg.max_new_tokens = 8;
    cfg.eval_interval = 1;
    cfg.seed = 3;
    std::vector<int> seen;
    Policy copy = policy;
    const PPOResult res = ppo_train(policy, rm, prompts(6), prompts(3, 2), cfg, [&](const PPOMetrics& m) { seen.push_back(m.iteration); });
    CHECK(seen == std::vector<int>{0, 1, 2});
    REQUIRE(res.metrics.size() == 3);
    CHECK_FALSE(res.metrics[0].mean_kl);
    CHECK(res.metrics[0].mean_disparity_eval);
    CHECK(res.metrics[2].mean_kl);
    CHECK(res.metrics[2].accuracy_eval);
    CHECK(policy.step == 4);

    // Same seed, same trajectory of metrics.
    const PPOResult again = ppo_train(copy, rm, prompts(6), prompts(3, 2), cfg);
    CHECK(*again.metrics[2].mean_kl == *res.metrics[2].mean_kl);
    CHECK(std::equal(copy.model.params().begin(), copy.model.params().end(), policy.model.params().begin()));
}

TEST_CASE("a runaway KL aborts PPO", "[rl]") {
    Policy policy = test::tiny_policy(19, 2.0);
    const RewardModel rm = fitted_rm(policy, 19);
    PPOConfig cfg;
    cfg.iterations = 6;
    cfg.batch_size = 4;
    cfg.minibatch_size = 4;
    cfg.epochs = 4;
    cfg.max_new_tokens = 8;
    cfg.eval_interval = 100;
    cfg.kl_coef = 1e-9;
    cfg.lr = 0.05;
    CHECK_THROWS_AS(ppo_train(policy, rm, prompts(4), {}, cfg), NumericalError);
}

TEST_CASE("RL configs validate their ranges", "[rl]") {
    PPOConfig p;
    CHECK_NOTHROW(p.validate());
    p.clip = 0.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = PPOConfig{};
    p.gamma = 1.5;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    DPOConfig d;
    d.label_smoothing = 0.5;
    CHECK_THROWS_AS(d.validate(), ConfigError);
}

TEST_CASE("metrics CSV leaves missing cells blank", "[rl][io]") {
    test::TempDir dir("metrics");
    PPOMetrics a;
    a.mean_disparity_eval = 0.5;
    PPOMetrics b;
    b.iteration = 1;
    b.mean_terminal_reward = 0.25;
    b.mean_kl = 0.0;
    b.clip_fraction = 0.0;
    b.value_loss = 1.0;
    write_ppo_metrics_csv(dir / "m.csv", {a, b});
    std::ifstream in(dir / "m.csv");
    std::string header, first, second;
    std::getline(in, header);
    std::getline(in, first);
    std::getline(in, second);
    CHECK(header.rfind("iteration,mean_terminal_reward,mean_kl,clip_fraction,value_loss,mean_disparity_eval", 0) == 0);
    CHECK(first == "0,,,,,0.5000000000,,");
    CHECK(second == "1,0.2500000000,0.0000000000,0.0000000000,1.0000000000,,,");
}
