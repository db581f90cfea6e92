#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "langalign/tensor.hpp"

namespace langalign {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const;
};

template <typename T>
struct AdamState {
    AdamConfig config;
    std::int64_t step_count = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    // Zero moments shaped like `params`.
    static AdamState init(std::span<const Tensor<T>> params, AdamConfig config = {});
};

// One bias-corrected Adam update using each parameter's accumulated grad.
// Parameters are updated in place. Throws on shape mismatch or a non-finite
// gradient; nothing is modified in that case.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, double lr);

// Scales all grads so their global L2 norm is at most max_norm. Returns the
// norm before scaling.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>> params, double max_norm);

enum class ScheduleKind { cosine, linear, constant };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& name);

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::cosine;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 1;
    double peak_lr = 1e-3;
    double min_lr = 0.0;

    // Warmup of 10% of total steps, the default when none is configured.
    static std::int64_t default_warmup(std::int64_t total_steps);
    void validate() const;
};

// Linear warmup 0 -> peak, then cosine or linear decay to min_lr at total_steps.
double lr_at(const ScheduleSpec& spec, std::int64_t step);

}  // namespace langalign
