#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rlsf/common.hpp"
#include "rlsf/corpus.hpp"
#include "rlsf/optim.hpp"
#include "rlsf/rng.hpp"
#include "rlsf/transformer.hpp"
#include "rlsf/vocabulary.hpp"

namespace rlsf {

/// The token policy: a transformer plus the vocabulary it was trained on.
struct Policy {
    Vocabulary vocab;
    Transformer model;
    std::uint64_t step = 0;
    std::string rng_state;

    static Policy initialized(ModelConfig config, std::uint64_t seed);
};

/// softmax(logits / temperature), accumulated in double.
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);
std::vector<double> softmax(const RowVector& logits, double temperature = 1.0);

/// Row-wise log-softmax at temperature 1.
RowMatrix log_softmax_rows(const RowMatrix& logits);

/// Index of the largest entry; ties go to the lowest index.
TokenId argmax(std::span<const double> xs);

/// Indices of the `k` largest entries, descending, ties by lowest index.
std::vector<TokenId> top_k(std::span<const double> xs, std::size_t k);

/// Distribution of the token following `context`.
std::vector<double> next_token_distribution(const Policy& policy, const TokenSeq& context, double temperature = 1.0);

/// Prefills a decoding session with `prompt`; returns the logits after its last token.
RowVector prefill(Transformer::Session& session, const TokenSeq& prompt);

/// prompt followed by argmax continuations until eos, `max_new_tokens`, or the context limit.
TokenSeq greedy_decode(const Policy& policy, const TokenSeq& prompt, int max_new_tokens);

/// Same loop as greedy_decode, starting from an already-prefilled session.
TokenSeq greedy_continue(const Policy& policy, Transformer::Session& session, RowVector logits, int max_new_tokens);

/// prompt followed by tokens sampled at `temperature`.
TokenSeq sample_decode(const Policy& policy, const TokenSeq& prompt, int max_new_tokens, double temperature, Rng& rng);

/// log pi(full[i] | full[:i]) for i = prompt_len .. size-1, at temperature 1.
std::vector<double> sequence_log_probs(const Transformer& model, const TokenSeq& full, std::size_t prompt_len);

/// bos followed by the encoded text.
TokenSeq encode_prompt(const Vocabulary& vocab, std::string_view text);

struct EncodedExample {
    TokenSeq tokens;         // bos, prompt, target, eos
    std::size_t prompt_len;  // bos + prompt
};

EncodedExample encode_example(const Vocabulary& vocab, const SftExample& example);

/// Mean negative log-likelihood over every target token in the batch.
double sft_loss(const Transformer& model, std::span<const EncodedExample> batch);

/// As sft_loss, also accumulating dL/dtheta into `grad`.
double sft_loss_and_gradient(const Transformer& model, std::span<const EncodedExample> batch, std::span<double> grad);

/// One Adam step on the batch; returns the pre-step loss.
double sft_step(Policy& policy, std::span<const EncodedExample> batch, Adam& optimizer);

}  // namespace rlsf
