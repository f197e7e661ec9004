#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rlsf/policy.hpp"
#include "rlsf/vocabulary.hpp"

namespace test {

/// A model small enough that exhaustive and finite-difference checks stay fast.
inline rlsf::ModelConfig tiny_config(int context = 96) {
    rlsf::ModelConfig c;
    c.layers = 1;
    c.width = 16;
    c.heads = 2;
    c.context = context;
    c.mlp_width = 32;
    c.vocab_size = rlsf::Vocabulary::character_level().size();
    return c;
}

/// Random init with a larger weight scale, so distributions are far from uniform.
inline rlsf::Policy tiny_policy(std::uint64_t seed, double scale = 8.0, int context = 96) {
    rlsf::Policy p = rlsf::Policy::initialized(tiny_config(context), seed);
    for (double& w : p.model.params()) w *= scale;
    return p;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("rlsf_test_" + tag + "_" + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Central differences of `loss` at `coords` with step h, compared against `analytic`.
/// Returns the worst relative error max|a - n| / max(|a|, |n|, floor).
inline double worst_fd_error(std::span<double> params, const std::function<double()>& loss,
                             std::span<const double> analytic, const std::vector<std::size_t>& coords,
                             double h = 1e-4, double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i : coords) {
        const double saved = params[i];
        params[i] = saved + h;
        const double up = loss();
        params[i] = saved - h;
        const double down = loss();
        params[i] = saved;
        const double numeric = (up - down) / (2 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

/// `count` distinct coordinates, biased toward ones with a non-negligible gradient.
inline std::vector<std::size_t> pick_coords(std::span<const double> grad, std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (std::abs(grad[i]) > 1e-5) live.push_back(i);
    }
    std::shuffle(live.begin(), live.end(), rng);
    if (live.size() > count) live.resize(count);
    return live;
}

}  // namespace test
