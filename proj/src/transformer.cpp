#include "rlsf/transformer.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "rlsf/rng.hpp"

namespace rlsf {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u))); }

double gelu_grad(double u) {
    const double t = std::tanh(kGeluC * (u + kGeluA * u * u * u));
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * u * u);
}

// y = xhat * gamma + beta, row by row.
template <typename G, typename B>
RowMatrix layer_norm(const RowMatrix& x, const G& gamma, const B& beta, RowMatrix& xhat, Eigen::VectorXd& rstd) {
    const auto rows = x.rows();
    const auto cols = static_cast<double>(x.cols());
    xhat.resize(rows, x.cols());
    rstd.resize(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const double mean = x.row(i).sum() / cols;
        const RowVector centered = x.row(i).array() - mean;
        const double var = centered.squaredNorm() / cols;
        rstd(i) = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(i) = centered * rstd(i);
    }
    RowMatrix y = xhat.array().rowwise() * gamma.array();
    y.rowwise() += beta;
    return y;
}

template <typename G, typename DG, typename DB>
RowMatrix layer_norm_backward(const RowMatrix& dy, const RowMatrix& xhat, const Eigen::VectorXd& rstd, const G& gamma,
                              DG&& d_gamma, DB&& d_beta) {
    d_gamma += (dy.array() * xhat.array()).colwise().sum().matrix();
    d_beta += dy.colwise().sum();
    const RowMatrix dxhat = dy.array().rowwise() * gamma.array();
    RowMatrix dx(dy.rows(), dy.cols());
    const auto cols = static_cast<double>(dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double mean_d = dxhat.row(i).sum() / cols;
        const double mean_dx = dxhat.row(i).dot(xhat.row(i)) / cols;
        dx.row(i) = rstd(i) * (dxhat.row(i).array() - mean_d - xhat.row(i).array() * mean_dx);
    }
    return dx;
}

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1 || width < 1 || heads < 1 || context < 2 || vocab_size < 16 || mlp_width < 1) {
        throw ParameterError("model config fields must be positive (vocab >= 16, context >= 2)");
    }
    if (width % heads != 0) throw ParameterError("width must be divisible by heads");
}

Transformer::Transformer(ModelConfig config) : config_(config) {
    config_.validate();
    const auto d = static_cast<std::size_t>(config_.width);
    const auto f = static_cast<std::size_t>(config_.mlp_width);
    const auto v = static_cast<std::size_t>(config_.vocab_size);
    std::size_t off = 0;
    auto take = [&](std::size_t n) {
        const std::size_t at = off;
        off += n;
        return at;
    };
    wte_ = take(v * d);
    wpe_ = take(static_cast<std::size_t>(config_.context) * d);
    for (int l = 0; l < config_.layers; ++l) {
        LayerOffsets o{};
        o.ln1_g = take(d);
        o.ln1_b = take(d);
        o.w_qkv = take(d * 3 * d);
        o.b_qkv = take(3 * d);
        o.w_o = take(d * d);
        o.b_o = take(d);
        o.ln2_g = take(d);
        o.ln2_b = take(d);
        o.w_1 = take(d * f);
        o.b_1 = take(f);
        o.w_2 = take(f * d);
        o.b_2 = take(d);
        layer_offsets_.push_back(o);
    }
    lnf_g_ = take(d);
    lnf_b_ = take(d);
    w_out_ = take(d * v);
    b_out_ = take(v);
    params_.assign(off, 0.0);
}

Transformer Transformer::initialized(ModelConfig config, std::uint64_t seed) {
    Transformer m(config);
    Rng rng(seed);
    const double std_base = 0.02;
    const double std_resid = 0.02 / std::sqrt(2.0 * config.layers);
    const auto d = static_cast<std::size_t>(config.width);
    const auto f = static_cast<std::size_t>(config.mlp_width);
    auto fill_normal = [&](std::size_t off, std::size_t n, double s) {
        for (std::size_t i = 0; i < n; ++i) m.params_[off + i] = s * rng.normal();
    };
    auto fill_const = [&](std::size_t off, std::size_t n, double c) {
        for (std::size_t i = 0; i < n; ++i) m.params_[off + i] = c;
    };
    fill_normal(m.wte_, static_cast<std::size_t>(config.vocab_size) * d, std_base);
    fill_normal(m.wpe_, static_cast<std::size_t>(config.context) * d, std_base);
    for (const auto& o : m.layer_offsets_) {
        fill_const(o.ln1_g, d, 1.0);
        fill_normal(o.w_qkv, d * 3 * d, std_base);
        fill_normal(o.w_o, d * d, std_resid);
        fill_const(o.ln2_g, d, 1.0);
        fill_normal(o.w_1, d * f, std_base);
        fill_normal(o.w_2, f * d, std_resid);
    }
    fill_const(m.lnf_g_, d, 1.0);
    fill_normal(m.w_out_, d * static_cast<std::size_t>(config.vocab_size), std_base);
    return m;
}

RowMatrix Transformer::forward(std::span<const TokenId> tokens, Cache* cache) const {
    const int n = static_cast<int>(tokens.size());
    if (n == 0) throw ParameterError("forward on an empty sequence");
    if (n > config_.context) {
        throw LengthError("sequence of " + std::to_string(n) + " tokens exceeds context " +
                          std::to_string(config_.context));
    }
    const int d = config_.width;
    const int hd = d / config_.heads;
    const int f = config_.mlp_width;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    const auto wte = mat(wte_, config_.vocab_size, d);
    const auto wpe = mat(wpe_, config_.context, d);
    RowMatrix x(n, d);
    for (int t = 0; t < n; ++t) {
        const TokenId tok = tokens[static_cast<std::size_t>(t)];
        if (tok < 0 || tok >= config_.vocab_size) throw ParameterError("token id out of range");
        x.row(t) = wte.row(tok) + wpe.row(t);
    }

    if (cache) {
        cache->tokens.assign(tokens.begin(), tokens.end());
        cache->layers.resize(layer_offsets_.size());
    }
    Cache::Layer scratch;
    for (std::size_t l = 0; l < layer_offsets_.size(); ++l) {
        const auto& o = layer_offsets_[l];
        Cache::Layer& c = cache ? cache->layers[l] : scratch;
        if (cache) c.x_in = x;
        c.ln1_out = layer_norm(x, vec(o.ln1_g, d), vec(o.ln1_b, d), c.ln1_hat, c.ln1_rstd);
        c.qkv = c.ln1_out * mat(o.w_qkv, d, 3 * d);
        c.qkv.rowwise() += vec(o.b_qkv, 3 * d);

        c.attn_out.resize(n, d);
        c.probs.resize(static_cast<std::size_t>(config_.heads));
        for (int h = 0; h < config_.heads; ++h) {
            const auto q = c.qkv.middleCols(h * hd, hd);
            const auto k = c.qkv.middleCols(d + h * hd, hd);
            const auto v = c.qkv.middleCols(2 * d + h * hd, hd);
            RowMatrix& p = c.probs[static_cast<std::size_t>(h)];
            p = (q * k.transpose()) * scale;
            for (int i = 0; i < n; ++i) {
                const double mx = p.row(i).head(i + 1).maxCoeff();
                double sum = 0.0;
                for (int j = 0; j <= i; ++j) {
                    p(i, j) = std::exp(p(i, j) - mx);
                    sum += p(i, j);
                }
                p.row(i).head(i + 1) /= sum;
                p.row(i).tail(n - i - 1).setZero();
            }
            c.attn_out.middleCols(h * hd, hd).noalias() = p * v;
        }
        x.noalias() += c.attn_out * mat(o.w_o, d, d);
        x.rowwise() += vec(o.b_o, d);
        if (cache) c.x_mid = x;

        c.ln2_out = layer_norm(x, vec(o.ln2_g, d), vec(o.ln2_b, d), c.ln2_hat, c.ln2_rstd);
        c.mlp_pre = c.ln2_out * mat(o.w_1, d, f);
        c.mlp_pre.rowwise() += vec(o.b_1, f);
        c.mlp_act = c.mlp_pre.unaryExpr([](double u) { return gelu(u); });
        x.noalias() += c.mlp_act * mat(o.w_2, f, d);
        x.rowwise() += vec(o.b_2, d);
    }

    RowMatrix final_hat;
    Eigen::VectorXd final_rstd;
    RowMatrix hidden = layer_norm(x, vec(lnf_g_, d), vec(lnf_b_, d), final_hat, final_rstd);
    if (cache) {
        cache->final_hat = std::move(final_hat);
        cache->final_rstd = std::move(final_rstd);
    }
    return hidden;
}

RowMatrix Transformer::logits(const RowMatrix& hidden) const {
    RowMatrix out = hidden * mat(w_out_, config_.width, config_.vocab_size);
    out.rowwise() += vec(b_out_, config_.vocab_size);
    return out;
}

RowMatrix Transformer::logits_backward(const RowMatrix& hidden, const RowMatrix& d_logits,
                                       std::span<double> grad) const {
    const int d = config_.width;
    const int v = config_.vocab_size;
    gmat(grad, w_out_, d, v).noalias() += hidden.transpose() * d_logits;
    gvec(grad, b_out_, v) += d_logits.colwise().sum();
    return d_logits * mat(w_out_, d, v).transpose();
}

void Transformer::backward(const Cache& cache, const RowMatrix& d_hidden, std::span<double> grad) const {
    if (grad.size() != params_.size()) throw ParameterError("gradient buffer size mismatch");
    const int n = static_cast<int>(cache.tokens.size());
    const int d = config_.width;
    const int hd = d / config_.heads;
    const int f = config_.mlp_width;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    RowMatrix dx = layer_norm_backward(d_hidden, cache.final_hat, cache.final_rstd, vec(lnf_g_, d),
                                       gvec(grad, lnf_g_, d), gvec(grad, lnf_b_, d));

    for (std::size_t li = layer_offsets_.size(); li-- > 0;) {
        const auto& o = layer_offsets_[li];
        const auto& c = cache.layers[li];

        // MLP residual branch.
        gmat(grad, o.w_2, f, d).noalias() += c.mlp_act.transpose() * dx;
        gvec(grad, o.b_2, d) += dx.colwise().sum();
        RowMatrix d_pre = dx * mat(o.w_2, f, d).transpose();
        d_pre.array() *= c.mlp_pre.unaryExpr([](double u) { return gelu_grad(u); }).array();
        gmat(grad, o.w_1, d, f).noalias() += c.ln2_out.transpose() * d_pre;
        gvec(grad, o.b_1, f) += d_pre.colwise().sum();
        const RowMatrix d_ln2 = d_pre * mat(o.w_1, d, f).transpose();
        dx += layer_norm_backward(d_ln2, c.ln2_hat, c.ln2_rstd, vec(o.ln2_g, d), gvec(grad, o.ln2_g, d),
                                  gvec(grad, o.ln2_b, d));

        // Attention residual branch.
        gmat(grad, o.w_o, d, d).noalias() += c.attn_out.transpose() * dx;
        gvec(grad, o.b_o, d) += dx.colwise().sum();
        const RowMatrix d_attn = dx * mat(o.w_o, d, d).transpose();

        RowMatrix d_qkv(n, 3 * d);
        for (int h = 0; h < config_.heads; ++h) {
            const auto q = c.qkv.middleCols(h * hd, hd);
            const auto k = c.qkv.middleCols(d + h * hd, hd);
            const auto v = c.qkv.middleCols(2 * d + h * hd, hd);
            const RowMatrix& p = c.probs[static_cast<std::size_t>(h)];
            const auto d_out = d_attn.middleCols(h * hd, hd);

            d_qkv.middleCols(2 * d + h * hd, hd).noalias() = p.transpose() * d_out;
            RowMatrix d_p = d_out * v.transpose();
            const Eigen::VectorXd row_dot = (d_p.array() * p.array()).rowwise().sum();
            RowMatrix d_s = p.array() * (d_p.colwise() - row_dot).array();
            d_s *= scale;
            d_qkv.middleCols(h * hd, hd).noalias() = d_s * k;
            d_qkv.middleCols(d + h * hd, hd).noalias() = d_s.transpose() * q;
        }
        gmat(grad, o.w_qkv, d, 3 * d).noalias() += c.ln1_out.transpose() * d_qkv;
        gvec(grad, o.b_qkv, 3 * d) += d_qkv.colwise().sum();
        const RowMatrix d_ln1 = d_qkv * mat(o.w_qkv, d, 3 * d).transpose();
        dx += layer_norm_backward(d_ln1, c.ln1_hat, c.ln1_rstd, vec(o.ln1_g, d), gvec(grad, o.ln1_g, d),
                                  gvec(grad, o.ln1_b, d));
    }

    auto d_wte = gmat(grad, wte_, config_.vocab_size, d);
    auto d_wpe = gmat(grad, wpe_, config_.context, d);
    for (int t = 0; t < n; ++t) {
        d_wte.row(cache.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
        d_wpe.row(t) += dx.row(t);
    }
}

Transformer::Session::Session(const Transformer& model) : model_(&model) {
    const auto& cfg = model.config_;
    keys_.assign(static_cast<std::size_t>(cfg.layers), RowMatrix(cfg.context, cfg.width));
    values_.assign(static_cast<std::size_t>(cfg.layers), RowMatrix(cfg.context, cfg.width));
}

RowVector Transformer::Session::step_hidden(TokenId token) {
    const Transformer& m = *model_;
    const auto& cfg = m.config_;
    if (position_ >= cfg.context) throw LengthError("decoding past context " + std::to_string(cfg.context));
    if (token < 0 || token >= cfg.vocab_size) throw ParameterError("token id out of range");
    const int d = cfg.width;
    const int hd = d / cfg.heads;
    const int f = cfg.mlp_width;
    const int t = position_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    RowMatrix x = m.mat(m.wte_, cfg.vocab_size, d).row(token) + m.mat(m.wpe_, cfg.context, d).row(t);
    RowMatrix hat;
    Eigen::VectorXd rstd;
    for (std::size_t l = 0; l < m.layer_offsets_.size(); ++l) {
        const auto& o = m.layer_offsets_[l];
        const RowMatrix a = layer_norm(x, m.vec(o.ln1_g, d), m.vec(o.ln1_b, d), hat, rstd);
        RowMatrix qkv = a * m.mat(o.w_qkv, d, 3 * d);
        qkv += m.vec(o.b_qkv, 3 * d);
        keys_[l].row(t) = qkv.middleCols(d, d);
        values_[l].row(t) = qkv.middleCols(2 * d, d);

        RowMatrix attn(1, d);
        for (int h = 0; h < cfg.heads; ++h) {
            const auto q = qkv.middleCols(h * hd, hd);
            const auto k = keys_[l].block(0, h * hd, t + 1, hd);
            const auto v = values_[l].block(0, h * hd, t + 1, hd);
            RowVector s = (q * k.transpose()) * scale;
            s = (s.array() - s.maxCoeff()).exp();
            s /= s.sum();
            attn.middleCols(h * hd, hd).noalias() = s * v;
        }
        x.noalias() += attn * m.mat(o.w_o, d, d);
        x += m.vec(o.b_o, d);
        const RowMatrix mm = layer_norm(x, m.vec(o.ln2_g, d), m.vec(o.ln2_b, d), hat, rstd);
        RowMatrix pre = mm * m.mat(o.w_1, d, f);
        pre += m.vec(o.b_1, f);
        const RowMatrix act = pre.unaryExpr([](double u) { return gelu(u); });
        x.noalias() += act * m.mat(o.w_2, f, d);
        x += m.vec(o.b_2, d);
    }
    ++position_;
    return layer_norm(x, m.vec(m.lnf_g_, d), m.vec(m.lnf_b_, d), hat, rstd);
}

RowVector Transformer::Session::step(TokenId token) {
    const RowVector h = step_hidden(token);
    const auto& cfg = model_->config_;
    RowVector out = h * model_->mat(model_->w_out_, cfg.width, cfg.vocab_size);
    out += model_->vec(model_->b_out_, cfg.vocab_size);
    return out;
}

}  // namespace rlsf
