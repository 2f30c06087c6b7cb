#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "bloodnet/tensor.hpp"

namespace bloodnet {

struct AdamConfig {
    double base_lr = 1e-4;
    double decay_rate = 0.96;
    std::uint64_t decay_period = 1;  // optimizer steps per decay
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const;
};

// Adam with bias correction and a staircase exponential learning-rate decay:
//   lr(step) = base_lr * decay_rate ^ ((schedule_offset + step) / decay_period)
// `step` counts updates applied with this state and drives bias correction;
// `schedule_offset` lets a fresh state continue a schedule started elsewhere.
template <typename T>
struct AdamState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::uint64_t schedule_offset = 0;
    std::map<std::string, Tensor<T>> first_moment;
    std::map<std::string, Tensor<T>> second_moment;

    AdamState() = default;
    explicit AdamState(AdamConfig cfg, std::uint64_t offset = 0) : config(cfg), schedule_offset(offset) {
        config.validate();
    }

    // Learning rate the next call to adam_step will use.
    double effective_lr() const;
};

double staircase_lr(const AdamConfig& config, std::uint64_t global_step);

template <typename T>
struct ParamSlot {
    std::string name;
    Tensor<T>* value;
    const Tensor<T>* grad;
};

// Applies one Adam update to every slot. Throws NumericalError, leaving params
// and state untouched, if any gradient holds NaN or Inf; throws ShapeError on
// misaligned shapes.
template <typename T>
void adam_step(std::span<const ParamSlot<T>> slots, AdamState<T>& state);

}  // namespace bloodnet
