#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "rlsf/common.hpp"

namespace rlsf {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;

struct ModelConfig {
    int layers = 2;
    int width = 64;
    int heads = 4;
    int context = 256;
    int vocab_size = 99;
    int mlp_width = 256;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Decoder-only transformer (pre-LayerNorm, GELU MLP, learned positions,
/// untied output head). All parameters live in one flat vector so that
/// optimizers, checkpoints and finite-difference checks see a single array.
class Transformer {
public:
    explicit Transformer(ModelConfig config);

    /// Gaussian init (std 0.02, residual projections scaled by 1/sqrt(2 * layers)).
    static Transformer initialized(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    std::size_t param_count() const { return params_.size(); }
    std::span<double> params() { return params_; }
    std::span<const double> params() const { return params_; }

    /// Activations kept by forward() for backward().
    struct Cache {
        struct Layer {
            RowMatrix x_in, ln1_hat, ln1_out, qkv, attn_out, x_mid, ln2_hat, ln2_out, mlp_pre, mlp_act;
            Eigen::VectorXd ln1_rstd, ln2_rstd;
            std::vector<RowMatrix> probs;  // one T x T causal attention matrix per head
        };
        std::vector<TokenId> tokens;
        std::vector<Layer> layers;
        RowMatrix final_hat;
        Eigen::VectorXd final_rstd;
    };

    /// Final normalized hidden state for every position (T x width).
    RowMatrix forward(std::span<const TokenId> tokens, Cache* cache = nullptr) const;

    /// Output-head logits for every row of `hidden` (T x vocab).
    RowMatrix logits(const RowMatrix& hidden) const;

    /// Accumulates output-head parameter gradients and returns dL/dhidden.
    RowMatrix logits_backward(const RowMatrix& hidden, const RowMatrix& d_logits, std::span<double> grad) const;

    /// Accumulates backbone parameter gradients from dL/dhidden.
    void backward(const Cache& cache, const RowMatrix& d_hidden, std::span<double> grad) const;

    /// Incremental single-sequence decoder with cached keys and values.
    /// Copyable, so a shared prefix can be prefilled once and then branched.
    class Session {
    public:
        explicit Session(const Transformer& model);

        /// Feeds one token and returns the final hidden state at its position.
        RowVector step_hidden(TokenId token);
        /// Feeds one token and returns next-token logits.
        RowVector step(TokenId token);

        int position() const { return position_; }

    private:
        const Transformer* model_;
        int position_ = 0;
        std::vector<RowMatrix> keys_;
        std::vector<RowMatrix> values_;
    };

private:
    struct LayerOffsets {
        std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2;
    };

    ModelConfig config_;
    std::vector<double> params_;
    std::size_t wte_ = 0, wpe_ = 0, lnf_g_ = 0, lnf_b_ = 0, w_out_ = 0, b_out_ = 0;
    std::vector<LayerOffsets> layer_offsets_;

    using ConstMap = Eigen::Map<const RowMatrix>;
    using Map = Eigen::Map<RowMatrix>;
    using ConstVecMap = Eigen::Map<const RowVector>;
    using VecMap = Eigen::Map<RowVector>;

    ConstMap mat(std::size_t offset, int rows, int cols) const {
        return ConstMap(params_.data() + offset, rows, cols);
    }
    ConstVecMap vec(std::size_t offset, int n) const { return ConstVecMap(params_.data() + offset, n); }
    static Map gmat(std::span<double> g, std::size_t offset, int rows, int cols) {
        return Map(g.data() + offset, rows, cols);
    }
    static VecMap gvec(std::span<double> g, std::size_t offset, int n) { return VecMap(g.data() + offset, n); }

    friend class Session;
};

}  // namespace rlsf
