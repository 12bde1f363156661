#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gnet/tape.hpp"
#include "gnet/tensor.hpp"

namespace gnet {

enum class OptKind { Adam, SgdMomentum };
enum class NonFinitePolicy { Reject, SkipParameter };

struct OptimizerConfig {
    OptKind kind = OptKind::Adam;
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::vector<int64_t> milestones;  // epochs at which lr is multiplied by decay_factor
    double decay_factor = 0.1;
    NonFinitePolicy nonfinite = NonFinitePolicy::Reject;

    void validate() const;
    double lr_at_epoch(int64_t epoch) const;
};

// Per-parameter Adam moments (or SGD velocity in `m`).
struct ParamSlot {
    Tensor m;
    Tensor v;
};

class Optimizer {
public:
    Optimizer(OptimizerConfig cfg, const std::vector<Var>& params);

    void set_epoch(int64_t epoch) { epoch_ = epoch; }
    int64_t step_count() const { return step_; }
    double current_lr() const { return cfg_.lr_at_epoch(epoch_); }

    // Applies one update from the gradients stored on the parameter nodes.
    // A parameter whose grad was never touched this pass is left unchanged.
    void step();

private:
    OptimizerConfig cfg_;
    std::vector<Var> params_;
    std::vector<ParamSlot> slots_;
    int64_t step_ = 0;
    int64_t epoch_ = 0;
};

}  // namespace gnet
