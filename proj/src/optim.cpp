#include "rlsf/optim.hpp"

#include <cmath>

#include "rlsf/common.hpp"

namespace rlsf {

bool all_finite(std::span<const double> xs) {
    for (double x : xs) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

Adam::Adam(std::size_t n, Options options) : options_(options), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size()) throw ParameterError("Adam: size mismatch");
    double norm2 = 0.0;
    for (double g : grad) norm2 += g * g;
    if (!std::isfinite(norm2)) throw NumericalError("non-finite gradient");
    const double norm = std::sqrt(norm2);
    const double scale = (options_.clip_norm > 0.0 && norm > options_.clip_norm) ? options_.clip_norm / norm : 1.0;

    ++t_;
    const double b1 = options_.beta1;
    const double b2 = options_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grad[i] * scale;
        m_[i] = b1 * m_[i] + (1.0 - b1) * g;
        v_[i] = b2 * v_[i] + (1.0 - b2) * g * g;
        params[i] -= options_.lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + options_.eps);
    }
    if (!all_finite(params)) throw NumericalError("non-finite parameters after update");
}

}  // namespace rlsf
