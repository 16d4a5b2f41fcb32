#pragma once

// Learning-rate schedules and the two optimizers (Nesterov SGD, Adam).

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "regda/tensor.hpp"

namespace regda {

// eta_p = eta_0 * (1 + alpha * p)^(-beta)
inline double lr_schedule(std::size_t step, double lr0, double alpha, double beta) {
    return lr0 * std::pow(1.0 + alpha * static_cast<double>(step), -beta);
}

// lr0 multiplied by gamma once per milestone reached.
inline double milestone_schedule(std::size_t step, double lr0, std::span<const std::size_t> milestones, double gamma) {
    double lr = lr0;
    for (auto m : milestones)
        if (step >= m) lr *= gamma;
    return lr;
}

namespace detail {

template <typename T>
void check_step_inputs(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, const char* who) {
    if (params.size() != grads.size()) throw std::invalid_argument(std::string(who) + ": params/grads count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != grads[i].shape())
            throw ShapeError(std::string(who) + ": gradient " + std::to_string(i) + " has shape " +
                             to_string(grads[i].shape()) + ", parameter " + to_string(params[i]->shape()));
        for (auto g : grads[i].vec())
            if (!std::isfinite(g))
                throw NumericalError(std::string(who) + ": non-finite gradient for parameter " + std::to_string(i));
    }
}

template <typename T>
void ensure_buffers(std::vector<Tensor<T>>& buffers, std::span<Tensor<T>* const> params) {
    if (buffers.empty())
        for (auto* p : params) buffers.emplace_back(p->shape());
    if (buffers.size() != params.size()) throw std::invalid_argument("optimizer state does not match parameters");
}

}  // namespace detail

template <typename T>
struct SgdState {
    std::vector<Tensor<T>> velocity;
    std::size_t steps = 0;
};

// v <- mu * v + g; nesterov update uses g + mu * v, plain momentum uses v.
template <typename T>
void sgd_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, SgdState<T>& state, double lr,
              double momentum = 0.9, bool nesterov = true) {
    detail::check_step_inputs(params, grads, "sgd_step");
    detail::ensure_buffers(state.velocity, params);
    const T mu = static_cast<T>(momentum), rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i];
        auto& v = state.velocity[i];
        const auto& g = grads[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = mu * v[j] + g[j];
            const T update = nesterov ? g[j] + mu * v[j] : v[j];
            p[j] -= rate * update;
        }
    }
    ++state.steps;
}

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> first;
    std::vector<Tensor<T>> second;
    std::size_t steps = 0;
};

template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, AdamState<T>& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    detail::check_step_inputs(params, grads, "adam_step");
    detail::ensure_buffers(state.first, params);
    detail::ensure_buffers(state.second, params);
    ++state.steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.steps));
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = *params[i];
        auto& m = state.first[i];
        auto& v = state.second[i];
        const auto& g = grads[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = b1 * m[j] + (T{1} - b1) * g[j];
            v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
            const double m_hat = static_cast<double>(m[j]) / c1;
            const double v_hat = static_cast<double>(v[j]) / c2;
            p[j] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + eps));
        }
    }
}

enum class OptimizerKind { sgd, adam };

// One optimizer over several parameter groups, each with its own LR multiplier.
template <typename T>
class Optimizer {
public:
    struct Group {
        std::vector<Tensor<T>*> params;
        double lr_mult = 1.0;
    };

    Optimizer(OptimizerKind kind, double momentum = 0.9, bool nesterov = true)
        : kind_(kind), momentum_(momentum), nesterov_(nesterov) {}

    std::size_t add_group(std::vector<Tensor<T>*> params, double lr_mult) {
        groups_.push_back({std::move(params), lr_mult});
        sgd_.emplace_back();
        adam_.emplace_back();
        return groups_.size() - 1;
    }

    // grads[g][i] pairs with groups[g].params[i].
    void step(const std::vector<std::vector<Tensor<T>>>& grads, double lr) {
        if (grads.size() != groups_.size()) throw std::invalid_argument("Optimizer: gradient group count mismatch");
        // Validate every group before touching any parameter.
        for (std::size_t g = 0; g < groups_.size(); ++g)
            detail::check_step_inputs(std::span<Tensor<T>* const>(groups_[g].params), std::span<const Tensor<T>>(grads[g]),
                                      "Optimizer");
        for (std::size_t g = 0; g < groups_.size(); ++g) {
            std::span<Tensor<T>* const> p(groups_[g].params);
            std::span<const Tensor<T>> gr(grads[g]);
            if (kind_ == OptimizerKind::sgd)
                sgd_step(p, gr, sgd_[g], lr * groups_[g].lr_mult, momentum_, nesterov_);
            else
                adam_step(p, gr, adam_[g], lr * groups_[g].lr_mult);
        }
    }

    OptimizerKind kind() const { return kind_; }
    const std::vector<Group>& groups() const { return groups_; }
    std::vector<SgdState<T>>& sgd_states() { return sgd_; }
    std::vector<AdamState<T>>& adam_states() { return adam_; }

private:
    OptimizerKind kind_;
    double momentum_;
    bool nesterov_;
    std::vector<Group> groups_;
    std::vector<SgdState<T>> sgd_;
    std::vector<AdamState<T>> adam_;
};

}  // namespace regda
