#include "rlsf/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace rlsf {

int thread_count() {
    const char* env = std::getenv("RLSF_THREADS");
    if (!env || !*env) return 1;
    try {
        return std::clamp(std::stoi(env), 1, 64);
    } catch (const std::exception&) {
        return 1;
    }
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(thread_count()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

double accumulate_gradients(std::size_t n, std::span<double> grad,
                            const std::function<double(std::size_t, std::span<double>)>& item) {
    const std::size_t p = grad.size();
    std::vector<double> losses(n, 0.0);
    std::vector<std::vector<double>> parts(n);
    parallel_for(n, [&](std::size_t i) {
        parts[i].assign(p, 0.0);
        losses[i] = item(i, parts[i]);
    });
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        loss += losses[i];
        for (std::size_t j = 0; j < p; ++j) grad[j] += parts[i][j];
    }
    return loss;
}

}  // namespace rlsf
