#pragma once

#include "popgrid/nn/tensor.hpp"

#include <span>
#include <vector>

namespace popgrid::nn {

/// Adam with bias correction and a learning rate per parameter group.
class Adam {
public:
    explicit Adam(std::vector<Param*> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    /// Applies one update using each parameter's accumulated gradient, then clears the gradients.
    /// `group_lr[p->group]` is the step size for parameter p.
    void step(std::span<const double> group_lr);
    void zero_grad();
    const std::vector<Param*>& params() const { return params_; }

private:
    std::vector<Param*> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_;
    long long t_ = 0;
};

/// Log-uniform learning rates from `bottom` (group 0) to `top` (last group).
std::vector<double> discriminative_learning_rates(int n_groups, double bottom, double top);

}  // namespace popgrid::nn
