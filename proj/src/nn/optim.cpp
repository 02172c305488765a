#include "popgrid/nn/optim.hpp"

#include "popgrid/common.hpp"

#include <algorithm>
#include <cmath>

namespace popgrid::nn {

Adam::Adam(std::vector<Param*> params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params) {
        if (!p->trainable) continue;
        params_.push_back(p);
        m_.emplace_back(p->numel(), 0.0);
        v_.emplace_back(p->numel(), 0.0);
    }
}

void Adam::step(std::span<const double> group_lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = *params_[k];
        if (p.group < 0 || static_cast<std::size_t>(p.group) >= group_lr.size()) {
            throw Error("optimizer: parameter '" + p.name + "' has no learning rate for group " + std::to_string(p.group));
        }
        const double lr = group_lr[p.group];
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double g = p.grad[i];
            m[i] = beta1_ * m[i] + (1 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1 - beta2_) * g * g;
            p.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
        p.zero_grad();
    }
}

void Adam::zero_grad() {
    for (auto* p : params_) p->zero_grad();
}

std::vector<double> discriminative_learning_rates(int n_groups, double bottom, double top) {
    if (n_groups < 1) throw Error("need at least one learning-rate group");
    if (!(bottom > 0 && top > 0 && bottom <= top)) throw Error("learning rates must satisfy 0 < bottom <= top");
    std::vector<double> lr(n_groups, top);
    if (n_groups == 1) return lr;
    const double lb = std::log(bottom), lt = std::log(top);
    for (int g = 0; g < n_groups; ++g) lr[g] = std::exp(lb + (lt - lb) * g / (n_groups - 1));
    lr.back() = top;
    lr.front() = bottom;
    return lr;
}

}  // namespace popgrid::nn
