#include "langalign/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace langalign {

void AdamConfig::validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0)) {
        throw std::invalid_argument("adam beta1 must lie in (0, 1)");
    }
    if (!(beta2 > 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("adam beta2 must lie in (0, 1)");
    }
    if (!(epsilon > 0.0)) {
        throw std::invalid_argument("adam epsilon must be positive");
    }
}

template <typename T>
AdamState<T> AdamState<T>::init(std::span<const Tensor<T>> params, AdamConfig config) {
    config.validate();
    AdamState state;
    state.config = config;
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const auto& p : params) {
        state.m.emplace_back(p.numel(), T(0));
        state.v.emplace_back(p.numel(), T(0));
    }
    return state;
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, double lr) {
    if (params.size() != state.m.size() || params.size() != state.v.size()) {
        throw std::invalid_argument("adam_step: optimizer state tracks " +
                                    std::to_string(state.m.size()) + " tensors, got " +
                                    std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (state.m[i].size() != p.numel()) {
            throw std::invalid_argument("adam_step: state shape mismatch for parameter " +
                                        std::to_string(i));
        }
        if (p.has_grad() && !all_finite(p.grad())) {
            throw NonFiniteError("adam_step: non-finite gradient in parameter " +
                                 std::to_string(i));
        }
    }

    state.step_count += 1;
    const double b1 = state.config.beta1;
    const double b2 = state.config.beta2;
    const double correction1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    const double correction2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
    const double eps = state.config.epsilon;

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.has_grad()) {
            continue;
        }
        auto w = p.mutable_data();
        auto g = p.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
            const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double m_hat = mj / correction1;
            const double v_hat = vj / correction2;
            w[j] = static_cast<T>(static_cast<double>(w[j]) -
                                  lr * m_hat / (std::sqrt(v_hat) + eps));
        }
    }
}

template <typename T>
double clip_grad_norm(std::span<Tensor<T>> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (T g : p.grad()) {
            sq += static_cast<double>(g) * static_cast<double>(g);
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double factor = max_norm / (norm + 1e-6);
        for (auto& p : params) {
            if (!p.has_grad()) {
                continue;
            }
            for (auto& g : p.mutable_grad()) {
                g = static_cast<T>(static_cast<double>(g) * factor);
            }
        }
    }
    return norm;
}

std::string to_string(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::cosine:
            return "cosine";
        case ScheduleKind::linear:
            return "linear";
        case ScheduleKind::constant:
            return "constant";
    }
    return "unknown";
}

ScheduleKind parse_schedule_kind(const std::string& name) {
    if (name == "cosine") {
        return ScheduleKind::cosine;
    }
    if (name == "linear") {
        return ScheduleKind::linear;
    }
    if (name == "constant") {
        return ScheduleKind::constant;
    }
    throw std::invalid_argument("unknown schedule kind '" + name + "'");
}

std::int64_t ScheduleSpec::default_warmup(std::int64_t total_steps) {
    return total_steps / 10;
}

void ScheduleSpec::validate() const {
    if (total_steps <= 0) {
        throw std::invalid_argument("schedule total_steps must be positive");
    }
    if (warmup_steps < 0 || warmup_steps >= total_steps) {
        throw std::invalid_argument("schedule warmup_steps must satisfy 0 <= warmup < total");
    }
    if (!(peak_lr > 0.0)) {
        throw std::invalid_argument("schedule peak_lr must be positive");
    }
    if (min_lr < 0.0 || min_lr > peak_lr) {
        throw std::invalid_argument("schedule min_lr must satisfy 0 <= min_lr <= peak_lr");
    }
}

double lr_at(const ScheduleSpec& spec, std::int64_t step) {
    spec.validate();
    if (step < 0 || step > spec.total_steps) {
        throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(spec.total_steps) + "]");
    }
    if (step < spec.warmup_steps) {
        return spec.peak_lr * static_cast<double>(step) / static_cast<double>(spec.warmup_steps);
    }
    if (spec.kind == ScheduleKind::constant) {
        return spec.peak_lr;
    }
    const double progress = static_cast<double>(step - spec.warmup_steps) /
                            static_cast<double>(spec.total_steps - spec.warmup_steps);
    if (progress <= 0.0) {
        return spec.peak_lr;
    }
    if (progress >= 1.0) {
        return spec.min_lr;
    }
    if (spec.kind == ScheduleKind::cosine) {
        return spec.min_lr + 0.5 * (spec.peak_lr - spec.min_lr) *
                                 (1.0 + std::cos(std::numbers::pi * progress));
    }
    return spec.peak_lr - progress * (spec.peak_lr - spec.min_lr);
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::span<Tensor<float>>, AdamState<float>&, double);
template void adam_step(std::span<Tensor<double>>, AdamState<double>&, double);
template double clip_grad_norm(std::span<Tensor<float>>, double);
template double clip_grad_norm(std::span<Tensor<double>>, double);

}  // namespace langalign
