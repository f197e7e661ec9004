#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace rlsf {

/// Adam with global-norm gradient clipping. This is the only optimizer in
/// the project; every trainer (SFT, reward model, critic, PPO, DPO) uses it.
class Adam {
public:
    struct Options {
        double lr = 5e-5;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double clip_norm = 1.0;  // <= 0 disables clipping
    };

    Adam(std::size_t n, Options options);

    /// Throws NumericalError if the gradient or the updated parameters are non-finite.
    void step(std::span<double> params, std::span<const double> grad);

    std::uint64_t steps() const { return t_; }
    const Options& options() const { return options_; }
    void set_lr(double lr) { options_.lr = lr; }

private:
    Options options_;
    std::vector<double> m_, v_;
    std::uint64_t t_ = 0;
};

bool all_finite(std::span<const double> xs);

}  // namespace rlsf
