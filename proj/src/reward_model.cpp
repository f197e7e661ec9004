#include "rlsf/reward_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rlsf/mathutil.hpp"
#include "rlsf/parallel.hpp"
#include "rlsf/rng.hpp"

namespace rlsf {

RewardScale RewardScale::fit(std::span<const double> raw) {
    if (raw.empty()) throw ParameterError("cannot fit a reward scale on zero outputs");
    const auto [mn, mx] = std::minmax_element(raw.begin(), raw.end());
    RewardScale s{*mn, *mx, true};
    if (!(s.hi - s.lo > 1e-12)) {
        s.lo = *mn - 0.5;
        s.hi = *mn + 0.5;
    }
    return s;
}

double RewardScale::apply(double raw) const {
    if (!fitted) throw ParameterError("reward scale has not been fitted");
    return std::clamp(2.0 * (raw - lo) / (hi - lo) - 1.0, -1.0, 1.0);
}

RewardModel RewardModel::from_policy(const Policy& policy) {
    RewardModel rm{policy.vocab, policy.model, {}, {}, 0};
    rm.head.assign(static_cast<std::size_t>(policy.model.config().width) + 1, 0.0);
    return rm;
}

std::vector<double> RewardModel::raw_outputs(std::span<const TokenId> seq, RowMatrix* hidden,
                                             Transformer::Cache* cache) const {
    if (seq.empty()) throw ParameterError("cannot score an empty sequence");
    const RowMatrix h = backbone.forward(seq, cache);
    const auto d = static_cast<Eigen::Index>(head.size() - 1);
    const Eigen::Map<const Eigen::VectorXd> w(head.data(), d);
    const Eigen::VectorXd out = (h * w).array() + head.back();
    if (hidden) *hidden = h;
    return {out.data(), out.data() + out.size()};
}

double RewardModel::raw_score(std::span<const TokenId> seq) const { return raw_outputs(seq).back(); }

void RewardModel::backward(const Transformer::Cache& cache, const RowMatrix& hidden, std::span<const double> d_raw,
                           std::span<double> grad) const {
    const std::size_t p = backbone.param_count();
    const auto d = static_cast<Eigen::Index>(head.size() - 1);
    const Eigen::Map<const Eigen::RowVectorXd> w(head.data(), d);
    Eigen::Map<Eigen::RowVectorXd> g_w(grad.data() + p, d);
    RowMatrix d_hidden = RowMatrix::Zero(hidden.rows(), hidden.cols());
    for (Eigen::Index t = 0; t < hidden.rows(); ++t) {
        const double g = d_raw[static_cast<std::size_t>(t)];
        if (g == 0.0) continue;
        d_hidden.row(t) = g * w;
        g_w += g * hidden.row(t);
        grad[p + static_cast<std::size_t>(d)] += g;
    }
    backbone.backward(cache, d_hidden, grad.first(p));
}

void RewardModel::apply_step(Adam& optimizer, std::span<const double> grad) {
    std::vector<double> flat(backbone.params().begin(), backbone.params().end());
    flat.insert(flat.end(), head.begin(), head.end());
    optimizer.step(flat, grad);
    std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(backbone.param_count()),
              backbone.params().begin());
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(backbone.param_count()), flat.end(), head.begin());
    ++step;
}

double score(const RewardModel& rm, std::span<const TokenId> seq) { return rm.scale.apply(rm.raw_score(seq)); }

std::vector<double> per_token_rewards(const RewardModel& rm, std::span<const TokenId> seq) {
    std::vector<double> out = rm.raw_outputs(seq);
    for (double& x : out) x = rm.scale.apply(x);
    return out;
}

TokenSeq concat(const TokenSeq& prompt, const TokenSeq& response) {
    TokenSeq out = prompt;
    out.insert(out.end(), response.begin(), response.end());
    return out;
}

double bt_loss(const RewardModel& rm, const PreferencePair& pair) {
    const double delta = rm.raw_score(concat(pair.prompt, pair.chosen)) - rm.raw_score(concat(pair.prompt, pair.rejected));
    return -log_sigmoid(delta);
}

double bt_loss_and_gradient(const RewardModel& rm, const PreferencePair& pair, std::span<double> grad, double weight) {
    const TokenSeq a = concat(pair.prompt, pair.chosen);
    const TokenSeq b = concat(pair.prompt, pair.rejected);
    Transformer::Cache cache_a, cache_b;
    RowMatrix hidden_a, hidden_b;
    const double ra = rm.raw_outputs(a, &hidden_a, &cache_a).back();
    const double rb = rm.raw_outputs(b, &hidden_b, &cache_b).back();
    const double delta = ra - rb;
    const double g = weight * (sigmoid(delta) - 1.0);  // d(-log sigmoid(delta)) / d delta
    std::vector<double> d_raw(a.size(), 0.0);
    d_raw.back() = g;
    rm.backward(cache_a, hidden_a, d_raw, grad);
    d_raw.assign(b.size(), 0.0);
    d_raw.back() = -g;
    rm.backward(cache_b, hidden_b, d_raw, grad);
    return -log_sigmoid(delta) * weight;
}

RewardTrainResult train_reward_model(RewardModel& rm, const PreferenceDataset& data, const RewardTrainConfig& config) {
    const auto& pairs = data.pairs;
    if (pairs.empty()) throw ParameterError("reward model training needs at least one pair");
    if (config.epochs < 1 || config.batch_size < 1) throw ParameterError("epochs and batch size must be >= 1");
    Adam optimizer(rm.param_count(), {.lr = config.lr});
    Rng rng = Rng::derived(config.seed, 0x726d, 0);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    RewardTrainResult result;
    std::vector<double> grad(rm.param_count());
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(std::span(order));
        double epoch_sum = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t n = std::min(order.size() - start, static_cast<std::size_t>(config.batch_size));
            const double weight = 1.0 / static_cast<double>(n);
            std::fill(grad.begin(), grad.end(), 0.0);
            const double loss = accumulate_gradients(n, grad, [&](std::size_t i, std::span<double> g) {
                return bt_loss_and_gradient(rm, pairs[order[start + i]], g, weight);
            });
            if (!std::isfinite(loss)) throw NumericalError("non-finite reward model loss");
            rm.apply_step(optimizer, grad);
            result.step_losses.push_back(loss);
            epoch_sum += loss;
            ++epoch_steps;
        }
        result.epoch_losses.push_back(epoch_sum / static_cast<double>(epoch_steps));
    }

    std::vector<double> raw(pairs.size() * 2);
    parallel_for(pairs.size(), [&](std::size_t i) {
        raw[2 * i] = rm.raw_score(concat(pairs[i].prompt, pairs[i].chosen));
        raw[2 * i + 1] = rm.raw_score(concat(pairs[i].prompt, pairs[i].rejected));
    });
    rm.scale = RewardScale::fit(raw);
    return result;
}

double pairwise_accuracy(const RewardModel& rm, const std::vector<LabeledPair>& pairs) {
    if (pairs.empty()) throw ParameterError("pairwise accuracy of an empty pair set");
    std::vector<double> credit(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t i) {
        const double a = rm.raw_score(pairs[i].preferred);
        const double b = rm.raw_score(pairs[i].other);
        credit[i] = a > b ? 1.0 : (a == b ? 0.5 : 0.0);
    });
    return std::accumulate(credit.begin(), credit.end(), 0.0) / static_cast<double>(pairs.size());
}

Checkpoint to_checkpoint(const RewardModel& rm, CheckpointKind kind) {
    Checkpoint c;
    c.kind = kind;
    c.config = rm.backbone.config();
    c.step = rm.step;
    c.vocabulary = rm.vocab.tokens();
    c.params.assign(rm.backbone.params().begin(), rm.backbone.params().end());
    c.head = rm.head;
    if (rm.scale.fitted) c.scale = std::make_pair(rm.scale.lo, rm.scale.hi);
    return c;
}

RewardModel reward_model_from_checkpoint(const Checkpoint& c) {
    if (c.kind == CheckpointKind::Policy) throw ParseError("expected a reward or critic checkpoint, got a policy");
    Checkpoint as_policy = c;
    as_policy.kind = CheckpointKind::Policy;
    Policy p = policy_from_checkpoint(as_policy);
    if (c.head.size() != static_cast<std::size_t>(c.config.width) + 1) throw ParseError("reward head size mismatch");
    RewardModel rm{std::move(p.vocab), std::move(p.model), c.head, {}, c.step};
    if (c.scale) rm.scale = RewardScale{c.scale->first, c.scale->second, true};
    return rm;
}

void save_reward_model(const std::filesystem::path& path, const RewardModel& rm, CheckpointKind kind) {
    write_checkpoint(path, to_checkpoint(rm, kind));
}

RewardModel load_reward_model(const std::filesystem::path& path) {
    return reward_model_from_checkpoint(read_checkpoint(path));
}

}  // namespace rlsf
