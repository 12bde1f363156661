#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "gnet/quant.hpp"
#include "gnet/tensor.hpp"

namespace gnet {

// Quantizer nodes run in one of two modes. Hard is the training forward
// (sign / alpha*sign / grid rounding) with the surrogate gradient as the
// backward rule. Surrogate replaces each quantizer by the smooth function
// whose true derivative equals that backward rule, so the whole graph becomes
// checkable against finite differences.
enum class QuantMode { Hard, Surrogate };

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;  // grad tensor allocated and zeroed this pass
    std::vector<Var> inputs;
    std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into inputs
    const char* op = "leaf";
};

Var make_param(Tensor value);
Var make_const(Tensor value);

// Accumulate g into n->grad, allocating on first touch.
void accumulate_grad(Node& n, const Tensor& g);

// Reverse-mode sweep from a scalar loss. Visits each reachable node exactly
// once in reverse topological order; gradients of fan-out nodes accumulate
// additively. Throws if loss is not scalar.
void backward(const Var& loss);

struct Conv2dOpts {
    int64_t stride = 1;
    int64_t padding = 0;
    int64_t dilation = 1;
    double pad_value = 0.0;  // -1 for convolutions operating on sign tensors
};

// input (N, C_in, H, W), weight (C_out, C_in, kh, kw) -> (N, C_out, Ho, Wo).
Var conv2d(const Var& input, const Var& weight, const Conv2dOpts& opts);

// x (N, C_in), weight (C_out, C_in) -> (N, C_out). No bias term.
Var linear(const Var& x, const Var& weight);

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(int64_t channels = 0)
        : running_mean(static_cast<size_t>(channels), 0.0),
          running_var(static_cast<size_t>(channels), 1.0) {}
    void validate() const;
};

// x (N, C, H, W). Training mode normalizes by batch statistics and updates
// the running estimates in `state`; eval mode normalizes by the running
// statistics.
Var batchnorm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
              bool training);

Var relu(const Var& x);
Var tanh_act(const Var& x);
Var sigmoid(const Var& x);
// Same shape, or one operand scalar (broadcast over the other).
Var add(const Var& a, const Var& b);
Var scale(const Var& x, double c);

// sum_i coeffs[i] * xs[i]; coeffs is a length-K vector node (lambda).
Var affine_combine(const std::vector<Var>& xs, const Var& coeffs);

// c = sigmoid(theta[idx]); c*straight + (1-c)*aggregated.
Var gate_mix(const Var& straight, const Var& aggregated, const Var& theta, int64_t idx);

// Quantizer nodes (custom backward rules, ordinary nodes to the tape).
Var sign_act(const Var& x, QuantMode mode);
Var binarize(const Var& w, const QuantSpec& spec, QuantMode mode);
Var uniform_quant(const Var& y, int bits, double beta, QuantMode mode);

Var global_avg_pool(const Var& x);                 // (N,C,H,W) -> (N,C)
Var upsample_nearest(const Var& x, int64_t factor);

// Mean cross-entropy with softmax over the class dim. Classification:
// logits (N, C) with labels length N. Segmentation: logits (N, C, H, W)
// with labels length N*H*W in row-major (n, h, w) order.
Var softmax_cross_entropy(const Var& logits, std::vector<int64_t> labels);

Var reduce_sum(const Var& x);
Var reduce_mean(const Var& x);

// Plain-tensor helpers shared by the float and packed forward paths.
Tensor conv2d_forward(const Tensor& input, const Tensor& weight, const Conv2dOpts& opts);
Tensor batchnorm_eval_forward(const Tensor& x, const std::vector<double>& gamma,
                              const std::vector<double>& beta, const BatchNormState& state);
Tensor softmax2d(const Tensor& logits);

}  // namespace gnet
