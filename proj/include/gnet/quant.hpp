#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gnet/bitcore.hpp"
#include "gnet/tensor.hpp"

namespace gnet {

enum class WeightScheme { Binary };
enum class ActScheme { BinarySign, UniformKBit, FullPrecision };
enum class ScaleGranularity { PerTensor, PerOutputChannel };

struct QuantSpec {
    WeightScheme weight_scheme = WeightScheme::Binary;
    ActScheme activation_scheme = ActScheme::BinarySign;
    int activation_bits = 2;              // used when activation_scheme == UniformKBit
    double clip_bound = 1.0;              // beta, fixed (not learned)
    ScaleGranularity weight_scale_granularity = ScaleGranularity::PerOutputChannel;
    std::optional<double> ste_clip;       // zero weight gradients where |w| > ste_clip

    void validate() const;
};

struct BinarizedWeights {
    BitTensor bits;                 // sign pattern of w
    std::vector<double> alpha;      // length 1 (per-tensor) or c_out (per-output-channel)
};

// w ~ alpha * sign(w), alpha = mean(|w|) over the granularity unit. For
// per-output-channel granularity the leading dimension of w indexes filters.
BinarizedWeights binarize_weights(const Tensor& w, const QuantSpec& spec);

// Effective forward weights alpha * sign(w) as a real tensor (what the
// float-simulated training graph convolves with).
Tensor binarized_weight_values(const Tensor& w, const QuantSpec& spec);

// Straight-through estimator: gradient passes unchanged; with ste_clip set,
// entries where |w| > clip are zeroed.
Tensor weight_ste_backward(const Tensor& grad_out, const Tensor& w, const QuantSpec& spec);

// Elementwise sign with sign(0) = +1.
Tensor sign_activation(const Tensor& x);

// d(sign)/dx surrogate: 2+2x on [-1,0), 2-2x on [0,1), 0 otherwise.
double sign_backward_factor(double x);
Tensor sign_activation_backward(const Tensor& grad_out, const Tensor& saved_x);

// Antiderivative of the backward factor: the smooth stand-in whose true
// gradient is sign_backward_factor. Used by the gradient-check surrogate mode.
double sign_surrogate(double x);

// round-half-away-from-zero, the fixed tie rule for all quantizers.
double round_half_away(double v);

// clip to [0, beta], then round onto the (2^bits - 1)-level uniform grid.
Tensor uniform_quantize(const Tensor& y, int bits, double beta);
double uniform_quantize_scalar(double y, int bits, double beta);
// STE: pass gradient inside [0, beta], zero outside.
Tensor uniform_quantize_backward(const Tensor& grad_out, const Tensor& saved_y, double beta);

// Nearest odd integer in [-(2^bits - 1), 2^bits - 1]: the level set spanned
// by a +-1 bit-plane expansion sum_i 2^i * b_i.
int64_t quantize_to_level(double v, int bits);

// Fixed-point bitwise inner product: encode both operands into `bits` +-1
// planes and sum 2^(i+j) * xnor_popcount plane dots. Equals the direct
// product of the quantized operands.
int64_t fixedpoint_dot(std::span<const double> w, std::span<const double> x, int bits,
                       BinOpCounter* counter = nullptr);

}  // namespace gnet
