#include "waterseg/optim.hpp"

#include <cmath>

#include "waterseg/errors.hpp"

namespace waterseg {

template <typename T>
void adamw_step(std::span<BasicTensor<T>> params, AdamWState<T>& state, const AdamWConfig& config) {
    if (state.first_moment.empty() && state.step == 0) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
            state.second_moment.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
        }
    }
    if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
        throw StateError("adamw_step: optimizer state has " + std::to_string(state.first_moment.size()) +
                         " slots for " + std::to_string(params.size()) + " parameters");
    }
    ++state.step;
    const double bias1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bias2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    const auto b1 = static_cast<T>(config.beta1);
    const auto b2 = static_cast<T>(config.beta2);
    const auto step_size = static_cast<T>(config.lr / bias1);
    const auto inv_sqrt_bias2 = static_cast<T>(1.0 / std::sqrt(bias2));
    const auto eps = static_cast<T>(config.eps);
    const auto decay = static_cast<T>(1.0 - config.lr * config.weight_decay);

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        if (static_cast<int64_t>(m.size()) != p.numel()) {
            throw StateError("adamw_step: state slot " + std::to_string(i) + " does not match parameter shape " +
                             shape_str(p.shape()));
        }
        if (!p.requires_grad() || !p.has_grad()) continue;
        auto data = p.data();
        const auto grad = p.grad();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const T g = grad[j];
            m[j] = b1 * m[j] + (T(1) - b1) * g;
            v[j] = b2 * v[j] + (T(1) - b2) * g * g;
            data[j] *= decay;
            data[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bias2 + eps);
        }
    }
}

template void adamw_step<float>(std::span<BasicTensor<float>>, AdamWState<float>&, const AdamWConfig&);
template void adamw_step<double>(std::span<BasicTensor<double>>, AdamWState<double>&, const AdamWConfig&);

} // namespace waterseg
