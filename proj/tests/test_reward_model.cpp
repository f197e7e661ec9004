#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "rlsf/reward_model.hpp"
#include "support.hpp"

using namespace rlsf;
using Catch::Approx;

namespace {

RewardModel random_rm(std::uint64_t seed, double head_scale = 0.5) {
    RewardModel rm = RewardModel::from_policy(test::tiny_policy(seed, 4.0));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, head_scale);
    for (double& w : rm.head) w = n(rng);
    return rm;
}

TokenSeq random_tokens(std::mt19937_64& rng, std::size_t n, const Vocabulary& v) {
    std::uniform_int_distribution<TokenId> tok(3, v.size() - 1);
    TokenSeq s;
    for (std::size_t i = 0; i < n; ++i) s.push_back(tok(rng));
    return s;
}

PreferencePair make_pair(const Vocabulary& v, const std::string& prompt, const std::string& a, const std::string& b) {
    PreferencePair p;
    p.prompt_text = prompt;
    p.prompt = encode_prompt(v, prompt);
    p.chosen = v.encode(a);
    p.chosen.push_back(v.eos());
    p.rejected = v.encode(b);
    p.rejected.push_back(v.eos());
    return p;
}

double& coord(RewardModel& rm, std::size_t i) {
    const std::size_t n = rm.backbone.param_count();
    return i < n ? rm.backbone.params()[i] : rm.head[i - n];
}

}  // namespace

TEST_CASE("reward scale maps the fitted range onto [-1, 1]", "[reward]") {
    const std::vector<double> raw{1.0, 3.0, 2.5};
    const RewardScale s = RewardScale::fit(raw);
    CHECK(s.apply(1.0) == -1.0);
    CHECK(s.apply(3.0) == 1.0);
    CHECK(s.apply(2.0) == 0.0);
    CHECK(s.apply(10.0) == 1.0);
    CHECK(s.apply(-4.0) == -1.0);
    for (double x = -1; x < 4; x += 0.25) CHECK(s.apply(x) <= s.apply(x + 0.25));

    const std::vector<double> flat{2.0, 2.0};
    const RewardScale d = RewardScale::fit(flat);
    CHECK(d.apply(2.0) == 0.0);
    CHECK_THROWS_AS(RewardScale{}.apply(0.0), ParameterError);
    CHECK_THROWS_AS(RewardScale::fit(std::vector<double>{}), ParameterError);
}

TEST_CASE("Bradley-Terry loss closed forms", "[reward]") {
    RewardModel rm = RewardModel::from_policy(test::tiny_policy(2));
    const auto pair = make_pair(rm.vocab, "Q: 1 + 1", "So the answer is 2.", "So the answer is 3.");
    CHECK(bt_loss(rm, pair) == Approx(std::log(2.0)).margin(1e-9));

    // Moving the head bias shifts both raw scores equally.
    RewardModel shifted = random_rm(3);
    const double before = bt_loss(shifted, pair);
    shifted.head.back() += 7.0;
    CHECK(bt_loss(shifted, pair) == Approx(before).margin(1e-12));

    // A head that reads one hidden feature gives a controllable difference.
    RewardModel r = random_rm(4);
    const double diff = r.raw_score(concat(pair.prompt, pair.chosen)) - r.raw_score(concat(pair.prompt, pair.rejected));
    CHECK(bt_loss(r, pair) == Approx(std::log1p(std::exp(-diff))).epsilon(1e-12));
    CHECK(std::log1p(std::exp(-1.0)) == Approx(0.313262).margin(1e-6));
}

TEST_CASE("Bradley-Terry gradient matches finite differences", "[reward][gradient]") {
    RewardModel rm = random_rm(5);
    const auto pair = make_pair(rm.vocab, "Q: 4 - 9", "4 - 9 = -5\nSo the answer is -5.", "So the answer is 5.");
    std::vector<double> grad(rm.param_count(), 0.0);
    const double loss = bt_loss_and_gradient(rm, pair, grad);
    CHECK(loss == Approx(bt_loss(rm, pair)).epsilon(1e-12));

    const auto coords = test::pick_coords(grad, 40, 2);
    REQUIRE(coords.size() >= 20);
    double worst = 0;
    for (std::size_t i : coords) {
        double& w = coord(rm, i);
        const double saved = w;
        w = saved + 1e-4;
        const double up = bt_loss(rm, pair);
        w = saved - 1e-4;
        const double down = bt_loss(rm, pair);
        w = saved;
        const double fd = (up - down) / 2e-4;
        worst = std::max(worst, std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}));
    }
    CHECK(worst <= 1e-3);
}

TEST_CASE("scores and per-token rewards", "[reward]") {
    RewardModel rm = random_rm(6);
    std::mt19937_64 rng(6);
    std::vector<double> raw;
    std::vector<TokenSeq> seqs;
    for (int i = 0; i < 8; ++i) {
        seqs.push_back(random_tokens(rng, 12, rm.vocab));
        raw.push_back(rm.raw_score(seqs.back()));
    }
    rm.scale = RewardScale::fit(raw);
    for (const auto& s : seqs) {
        const double sc = score(rm, s);
        CHECK(sc >= -1.0);
        CHECK(sc <= 1.0);
        const auto per = per_token_rewards(rm, s);
        REQUIRE(per.size() == s.size());
        CHECK(per.back() == Approx(sc).margin(1e-12));
        CHECK(per[4] == Approx(score(rm, std::span<const TokenId>(s).first(5))).margin(1e-12));
    }
    // Ordering by score equals ordering by raw output.
    const auto best_raw = std::max_element(raw.begin(), raw.end()) - raw.begin();
    std::vector<double> scored;
    for (const auto& s : seqs) scored.push_back(score(rm, s));
    CHECK(std::max_element(scored.begin(), scored.end()) - scored.begin() == best_raw);

    RewardModel flat = RewardModel::from_policy(test::tiny_policy(7));
    flat.head.back() = 0.3;
    flat.scale = RewardScale::fit(std::vector<double>{0.3});
    for (double r : per_token_rewards(flat, seqs[0])) CHECK(r == 0.0);
    CHECK_THROWS_AS(score(RewardModel::from_policy(test::tiny_policy(7)), seqs[0]), ParameterError);
}

TEST_CASE("pairwise accuracy tie rule and bounds", "[reward]") {
    RewardModel constant = RewardModel::from_policy(test::tiny_policy(8));
    std::mt19937_64 rng(8);
    std::vector<LabeledPair> pairs;
    for (int i = 0; i < 50; ++i) pairs.push_back({random_tokens(rng, 10, constant.vocab), random_tokens(rng, 10, constant.vocab)});
    CHECK(pairwise_accuracy(constant, pairs) == 0.5);
    CHECK_THROWS_AS(pairwise_accuracy(constant, {}), ParameterError);

    // Perfect separator: the preferred member always has the larger raw output.
    RewardModel rm = random_rm(9);
    std::vector<LabeledPair> sorted;
    for (const auto& p : pairs) {
        const bool first = rm.raw_score(p.preferred) > rm.raw_score(p.other);
        sorted.push_back(first ? p : LabeledPair{p.other, p.preferred});
    }
    CHECK(pairwise_accuracy(rm, sorted) == 1.0);

    // Random models on randomly labelled pairs stay near chance.
    for (std::uint64_t seed : {11, 12, 13}) {
        std::vector<LabeledPair> balanced;
        std::mt19937_64 r(seed);
        for (int i = 0; i < 200; ++i) balanced.push_back({random_tokens(r, 10, rm.vocab), random_tokens(r, 10, rm.vocab)});
        const double acc = pairwise_accuracy(random_rm(seed), balanced);
        CHECK(std::abs(acc - 0.5) <= 0.1);
    }
}

TEST_CASE("reward training overfits a single pair", "[reward]") {
    RewardModel rm = RewardModel::from_policy(test::tiny_policy(14, 2.0));
    PreferenceDataset ds;
    ds.pairs.push_back(make_pair(rm.vocab, "Q: 2 + 5", "2 + 5 = 7\nSo the answer is 7.", "So the answer is 8."));
    const auto res = train_reward_model(rm, ds, {.lr = 1e-3, .epochs = 60, .batch_size = 1, .seed = 1});
    CHECK(res.step_losses.size() == 60);
    CHECK(res.epoch_losses.front() == Approx(std::log(2.0)).margin(1e-9));
    CHECK(bt_loss(rm, ds.pairs[0]) < 0.1);
    CHECK(rm.scale.fitted);
    CHECK(score(rm, concat(ds.pairs[0].prompt, ds.pairs[0].chosen)) == 1.0);
    CHECK(score(rm, concat(ds.pairs[0].prompt, ds.pairs[0].rejected)) == -1.0);
}

TEST_CASE("reward training is reproducible", "[reward]") {
    const Policy base = test::tiny_policy(15, 2.0);
    PreferenceDataset ds;
    for (int i = 0; i < 6; ++i) {
        ds.pairs.push_back(make_pair(base.vocab, "Q: " + std::to_string(i), "A " + std::to_string(i), "B"));
    }
    RewardModel a = RewardModel::from_policy(base);
    RewardModel b = RewardModel::from_policy(base);
    const RewardTrainConfig cfg{.lr = 1e-3, .epochs = 2, .batch_size = 4, .seed = 3};
    CHECK(train_reward_model(a, ds, cfg).step_losses == train_reward_model(b, ds, cfg).step_losses);
    CHECK(a.head == b.head);
    CHECK_THROWS_AS(train_reward_model(a, PreferenceDataset{}, cfg), ParameterError);
}

TEST_CASE("reward checkpoints round-trip", "[reward][io]") {
    test::TempDir dir("rm");
    RewardModel rm = random_rm(16);
    rm.scale = RewardScale::fit(std::vector<double>{-0.25, 1.5});
    rm.step = 12;
    save_reward_model(dir / "rm.ckpt", rm);
    const RewardModel back = load_reward_model(dir / "rm.ckpt");
    CHECK(back.head == rm.head);
    CHECK(back.scale == rm.scale);
    CHECK(back.step == 12);
    CHECK(std::equal(back.backbone.params().begin(), back.backbone.params().end(), rm.backbone.params().begin()));
    CHECK_THROWS_AS(load_policy(dir / "rm.ckpt"), ParseError);
}
