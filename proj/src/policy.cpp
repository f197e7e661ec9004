#include "rlsf/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "rlsf/parallel.hpp"

namespace rlsf {

Policy Policy::initialized(ModelConfig config, std::uint64_t seed) {
    Vocabulary vocab = Vocabulary::character_level();
    config.vocab_size = vocab.size();
    return Policy{std::move(vocab), Transformer::initialized(config, seed), 0, Rng(seed).state()};
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
    if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
    std::vector<double> p(logits.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (double l : logits) mx = std::max(mx, l / temperature);
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] / temperature - mx);
        sum += p[i];
    }
    for (double& x : p) x /= sum;
    return p;
}

std::vector<double> softmax(const RowVector& logits, double temperature) {
    return softmax(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())), temperature);
}

RowMatrix log_softmax_rows(const RowMatrix& logits) {
    RowMatrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
        out.row(i) = logits.row(i).array() - lse;
    }
    return out;
}

TokenId argmax(std::span<const double> xs) {
    if (xs.empty()) throw ParameterError("argmax of empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < xs.size(); ++i) {
        if (xs[i] > xs[best]) best = i;
    }
    return static_cast<TokenId>(best);
}

std::vector<TokenId> top_k(std::span<const double> xs, std::size_t k) {
    if (k > xs.size()) throw ParameterError("k exceeds the number of entries");
    std::vector<TokenId> idx(xs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](TokenId a, TokenId b) {
        return xs[static_cast<std::size_t>(a)] > xs[static_cast<std::size_t>(b)];
    });
    idx.resize(k);
    return idx;
}

RowVector prefill(Transformer::Session& session, const TokenSeq& prompt) {
    if (prompt.empty()) throw ParameterError("empty prompt");
    RowVector logits;
    for (TokenId t : prompt) logits = session.step(t);
    return logits;
}

std::vector<double> next_token_distribution(const Policy& policy, const TokenSeq& context, double temperature) {
    if (static_cast<int>(context.size()) > policy.model.config().context) {
        throw LengthError("context longer than the model's maximum");
    }
    Transformer::Session session(policy.model);
    return softmax(prefill(session, context), temperature);
}

TokenSeq greedy_continue(const Policy& policy, Transformer::Session& session, RowVector logits, int max_new_tokens) {
    TokenSeq out;
    const int limit = policy.model.config().context;
    for (int i = 0; i < max_new_tokens; ++i) {
        const TokenId next = argmax(softmax(logits));
        out.push_back(next);
        if (next == policy.vocab.eos() || session.position() >= limit) break;
        logits = session.step(next);
    }
    return out;
}

TokenSeq greedy_decode(const Policy& policy, const TokenSeq& prompt, int max_new_tokens) {
    if (max_new_tokens < 1) throw ParameterError("max_new_tokens must be >= 1");
    if (static_cast<int>(prompt.size()) > policy.model.config().context) {
        throw LengthError("prompt longer than the model's maximum context");
    }
    Transformer::Session session(policy.model);
    const RowVector logits = prefill(session, prompt);
    TokenSeq out = prompt;
    const TokenSeq cont = greedy_continue(policy, session, logits, max_new_tokens);
    out.insert(out.end(), cont.begin(), cont.end());
    return out;
}

TokenSeq sample_decode(const Policy& policy, const TokenSeq& prompt, int max_new_tokens, double temperature, Rng& rng) {
    if (max_new_tokens < 1) throw ParameterError("max_new_tokens must be >= 1");
    if (static_cast<int>(prompt.size()) > policy.model.config().context) {
        throw LengthError("prompt longer than the model's maximum context");
    }
    Transformer::Session session(policy.model);
    RowVector logits = prefill(session, prompt);
    TokenSeq out = prompt;
    const int limit = policy.model.config().context;
    for (int i = 0; i < max_new_tokens; ++i) {
        const std::vector<double> p = softmax(logits, temperature);
        double u = rng.uniform();
        TokenId next = static_cast<TokenId>(p.size() - 1);
        for (std::size_t j = 0; j < p.size(); ++j) {
            u -= p[j];
            if (u < 0.0) {
                next = static_cast<TokenId>(j);
                break;
            }
        }
        out.push_back(next);
        if (next == policy.vocab.eos() || session.position() >= limit) break;
        logits = session.step(next);
    }
    return out;
}

std::vector<double> sequence_log_probs(const Transformer& model, const TokenSeq& full, std::size_t prompt_len) {
    if (prompt_len == 0 || prompt_len >= full.size()) throw ParameterError("prompt_len out of range");
    const std::span<const TokenId> inputs(full.data(), full.size() - 1);
    const RowMatrix logp = log_softmax_rows(model.logits(model.forward(inputs)));
    std::vector<double> out;
    out.reserve(full.size() - prompt_len);
    for (std::size_t i = prompt_len; i < full.size(); ++i) {
        out.push_back(logp(static_cast<Eigen::Index>(i - 1), full[i]));
    }
    return out;
}

TokenSeq encode_prompt(const Vocabulary& vocab, std::string_view text) {
    TokenSeq out{vocab.bos()};
    const TokenSeq body = vocab.encode(text);
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

EncodedExample encode_example(const Vocabulary& vocab, const SftExample& example) {
    EncodedExample ex{encode_prompt(vocab, example.prompt_text), 0};
    ex.prompt_len = ex.tokens.size();
    const TokenSeq target = vocab.encode(example.target_text);
    ex.tokens.insert(ex.tokens.end(), target.begin(), target.end());
    ex.tokens.push_back(vocab.eos());
    return ex;
}

namespace {

double sft_example(const Transformer& model, const EncodedExample& ex, double weight, std::span<double>* grad) {
    Transformer::Cache cache;
    const std::span<const TokenId> inputs(ex.tokens.data(), ex.tokens.size() - 1);
    const RowMatrix hidden = model.forward(inputs, grad ? &cache : nullptr);
    const RowMatrix logits = model.logits(hidden);
    const RowMatrix logp = log_softmax_rows(logits);
    RowMatrix d_logits;
    if (grad) d_logits = RowMatrix::Zero(logits.rows(), logits.cols());
    double loss = 0.0;
    for (std::size_t i = ex.prompt_len; i < ex.tokens.size(); ++i) {
        const auto row = static_cast<Eigen::Index>(i - 1);
        const TokenId target = ex.tokens[i];
        loss -= logp(row, target) * weight;
        if (grad) {
            d_logits.row(row) = logp.row(row).array().exp() * weight;
            d_logits(row, target) -= weight;
        }
    }
    if (grad) {
        const RowMatrix d_hidden = model.logits_backward(hidden, d_logits, *grad);
        model.backward(cache, d_hidden, *grad);
    }
    return loss;
}

double sft_impl(const Transformer& model, std::span<const EncodedExample> batch, std::span<double>* grad) {
    if (batch.empty()) throw ParameterError("empty SFT batch");
    std::size_t total = 0;
    for (const auto& ex : batch) {
        if (ex.prompt_len == 0 || ex.prompt_len >= ex.tokens.size()) throw ParameterError("example has no target");
        total += ex.tokens.size() - ex.prompt_len;
    }
    const double weight = 1.0 / static_cast<double>(total);
    double loss = 0.0;
    if (grad) {
        loss = accumulate_gradients(batch.size(), *grad, [&](std::size_t i, std::span<double> g) {
            return sft_example(model, batch[i], weight, &g);
        });
    } else {
        for (const auto& ex : batch) loss += sft_example(model, ex, weight, nullptr);
    }
    if (!std::isfinite(loss)) throw NumericalError("non-finite SFT loss");
    return loss;
}

}  // namespace

double sft_loss(const Transformer& model, std::span<const EncodedExample> batch) {
    return sft_impl(model, batch, nullptr);
}

double sft_loss_and_gradient(const Transformer& model, std::span<const EncodedExample> batch, std::span<double> grad) {
    return sft_impl(model, batch, &grad);
}

double sft_step(Policy& policy, std::span<const EncodedExample> batch, Adam& optimizer) {
    std::vector<double> grad(policy.model.param_count(), 0.0);
    const double loss = sft_loss_and_gradient(policy.model, batch, grad);
    optimizer.step(policy.model.params(), grad);
    ++policy.step;
    return loss;
}

}  // namespace rlsf
