#include "gnet/optim.hpp"

#include <cmath>

#include "gnet/error.hpp"

namespace gnet {

void OptimizerConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("optimizer: lr must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("optimizer: Adam betas must be in [0,1)");
    if (eps <= 0.0) throw ConfigError("optimizer: eps must be > 0");
    if (decay_factor <= 0.0) throw ConfigError("optimizer: decay_factor must be > 0");
    for (size_t i = 1; i < milestones.size(); ++i)
        if (milestones[i] <= milestones[i - 1])
            throw ConfigError("optimizer: milestones must be strictly increasing");
}

double OptimizerConfig::lr_at_epoch(int64_t epoch) const {
    double out = lr;
    for (int64_t ms : milestones)
        if (epoch >= ms) out *= decay_factor;
    return out;
}

Optimizer::Optimizer(OptimizerConfig cfg, const std::vector<Var>& params)
    : cfg_(std::move(cfg)), params_(params) {
    cfg_.validate();
    slots_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        slots_[i].m = Tensor(params_[i]->value.shape);
        if (cfg_.kind == OptKind::Adam) slots_[i].v = Tensor(params_[i]->value.shape);
    }
}

void Optimizer::step() {
    ++step_;
    const double lr = current_lr();
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t p = 0; p < params_.size(); ++p) {
        Node& param = *params_[p];
        if (!param.grad_ready) continue;
        bool finite = param.grad.all_finite();
        if (!finite) {
            if (cfg_.nonfinite == NonFinitePolicy::Reject)
                throw NumericError("optimizer: non-finite gradient at step " +
                                   std::to_string(step_));
            continue;  // SkipParameter: leave weights and moments untouched
        }
        ParamSlot& slot = slots_[p];
        for (int64_t i = 0; i < param.value.size(); ++i) {
            double g = param.grad[i];
            if (cfg_.weight_decay != 0.0) g += cfg_.weight_decay * param.value[i];
            if (cfg_.kind == OptKind::Adam) {
                slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g;
                slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g * g;
                double mhat = slot.m[i] / bc1;
                double vhat = slot.v[i] / bc2;
                param.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            } else {
                slot.m[i] = cfg_.momentum * slot.m[i] + g;
                param.value[i] -= lr * slot.m[i];
            }
        }
    }
}

}  // namespace gnet
