#include "bloodnet/adam.hpp"

#include <cmath>

namespace bloodnet {

void AdamConfig::validate() const {
    if (!(base_lr > 0.0)) throw std::invalid_argument("adam: base_lr must be positive");
    if (!(decay_rate > 0.0 && decay_rate <= 1.0)) throw std::invalid_argument("adam: decay_rate must be in (0,1]");
    if (decay_period == 0) throw std::invalid_argument("adam: decay_period must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw std::invalid_argument("adam: beta1 must be in (0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("adam: beta2 must be in (0,1)");
    if (!(epsilon > 0.0)) throw std::invalid_argument("adam: epsilon must be positive");
}

double staircase_lr(const AdamConfig& config, std::uint64_t global_step) {
    const auto periods = static_cast<double>(global_step / config.decay_period);
    return config.base_lr * std::pow(config.decay_rate, periods);
}

template <typename T>
double AdamState<T>::effective_lr() const {
    return staircase_lr(config, schedule_offset + step);
}

template <typename T>
void adam_step(std::span<const ParamSlot<T>> slots, AdamState<T>& state) {
    for (const ParamSlot<T>& s : slots) {
        if (s.value->shape() != s.grad->shape()) {
            throw ShapeError("adam: gradient shape " + shape_str(s.grad->shape()) + " does not match parameter " +
                             s.name + " " + shape_str(s.value->shape()));
        }
        if (auto it = state.first_moment.find(s.name);
            it != state.first_moment.end() && it->second.shape() != s.value->shape()) {
            throw ShapeError("adam: moment shape mismatch for " + s.name);
        }
        for (T g : s.grad->data()) {
            if (!std::isfinite(g)) {
                throw NumericalError("adam: non-finite gradient for parameter " + s.name + "; step rejected");
            }
        }
    }

    const double lr = state.effective_lr();
    state.step += 1;
    const auto t = static_cast<double>(state.step);
    const auto& c = state.config;
    const T b1 = static_cast<T>(c.beta1);
    const T b2 = static_cast<T>(c.beta2);
    const T correction1 = static_cast<T>(1.0 - std::pow(c.beta1, t));
    const T correction2 = static_cast<T>(1.0 - std::pow(c.beta2, t));
    const T step_size = static_cast<T>(lr);
    const T eps = static_cast<T>(c.epsilon);

    for (const ParamSlot<T>& s : slots) {
        auto m = state.first_moment.try_emplace(s.name, s.value->shape(), T(0)).first->second.data();
        auto v = state.second_moment.try_emplace(s.name, s.value->shape(), T(0)).first->second.data();
        auto p = s.value->data();
        auto g = s.grad->data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            const T m_hat = m[i] / correction1;
            const T v_hat = v[i] / correction2;
            p[i] -= step_size * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(std::span<const ParamSlot<float>>, AdamState<float>&);
template void adam_step<double>(std::span<const ParamSlot<double>>, AdamState<double>&);

}  // namespace bloodnet
