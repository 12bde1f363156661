#include "gnet/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gnet/error.hpp"

namespace gnet {

void QuantSpec::validate() const {
    if (activation_scheme == ActScheme::UniformKBit && activation_bits < 2)
        throw InvalidArgument("QuantSpec: activation_bits must be >= 2 for uniform-kbit "
                              "(1-bit activations are the binary-sign scheme)");
    if (clip_bound <= 0.0) throw InvalidArgument("QuantSpec: clip_bound must be > 0");
    if (ste_clip && *ste_clip <= 0.0) throw InvalidArgument("QuantSpec: ste_clip must be > 0");
}

BinarizedWeights binarize_weights(const Tensor& w, const QuantSpec& spec) {
    if (!w.all_finite()) throw InvalidArgument("binarize_weights: non-finite weights");
    BinarizedWeights out;
    out.bits = pack_signs(w);
    if (spec.weight_scale_granularity == ScaleGranularity::PerTensor || w.shape.size() < 2) {
        double s = 0.0;
        for (double v : w.data) s += std::fabs(v);
        out.alpha.assign(1, w.size() > 0 ? s / static_cast<double>(w.size()) : 0.0);
    } else {
        int64_t filters = w.shape[0];
        int64_t per = w.size() / filters;
        out.alpha.assign(static_cast<size_t>(filters), 0.0);
        for (int64_t f = 0; f < filters; ++f) {
            double s = 0.0;
            for (int64_t i = 0; i < per; ++i) s += std::fabs(w[f * per + i]);
            out.alpha[static_cast<size_t>(f)] = s / static_cast<double>(per);
        }
    }
    return out;
}

Tensor binarized_weight_values(const Tensor& w, const QuantSpec& spec) {
    BinarizedWeights bw = binarize_weights(w, spec);
    Tensor out(w.shape);
    int64_t per = out.size();
    int64_t filters = 1;
    if (bw.alpha.size() > 1) {
        filters = static_cast<int64_t>(bw.alpha.size());
        per = out.size() / filters;
    }
    for (int64_t f = 0; f < filters; ++f) {
        double a = bw.alpha[static_cast<size_t>(bw.alpha.size() > 1 ? f : 0)];
        for (int64_t i = 0; i < per; ++i) {
            int64_t idx = f * per + i;
            out[idx] = bw.bits.get(idx) ? a : -a;
        }
    }
    return out;
}

Tensor weight_ste_backward(const Tensor& grad_out, const Tensor& w, const QuantSpec& spec) {
    if (!grad_out.same_shape(w)) throw InvalidArgument("weight_ste_backward: shape mismatch");
    Tensor g = grad_out;
    if (spec.ste_clip) {
        double c = *spec.ste_clip;
        for (int64_t i = 0; i < g.size(); ++i)
            if (std::fabs(w[i]) > c) g[i] = 0.0;
    }
    return g;
}

Tensor sign_activation(const Tensor& x) {
    if (!x.all_finite()) throw InvalidArgument("sign_activation: non-finite input");
    Tensor out(x.shape);
    for (int64_t i = 0; i < x.size(); ++i) out[i] = x[i] >= 0.0 ? 1.0 : -1.0;
    return out;
}

double sign_backward_factor(double x) {
    if (x >= -1.0 && x < 0.0) return 2.0 + 2.0 * x;
    if (x >= 0.0 && x < 1.0) return 2.0 - 2.0 * x;
    return 0.0;
}

Tensor sign_activation_backward(const Tensor& grad_out, const Tensor& saved_x) {
    if (!grad_out.same_shape(saved_x))
        throw InvalidArgument("sign_activation_backward: shape mismatch");
    Tensor g(grad_out.shape);
    for (int64_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * sign_backward_factor(saved_x[i]);
    return g;
}

double sign_surrogate(double x) {
    if (x < -1.0) return -1.0;
    if (x < 0.0) return x * x + 2.0 * x;
    if (x < 1.0) return 2.0 * x - x * x;
    return 1.0;
}

double round_half_away(double v) {
    // std::round already rounds halfway cases away from zero; kept behind a
    // named wrapper because the tie rule is part of the serialization contract.
    return std::round(v);
}

double uniform_quantize_scalar(double y, int bits, double beta) {
    double levels = static_cast<double>((int64_t{1} << bits) - 1);
    double clipped = std::clamp(y, 0.0, beta);
    return round_half_away(clipped * levels / beta) * beta / levels;
}

Tensor uniform_quantize(const Tensor& y, int bits, double beta) {
    if (bits < 2) throw InvalidArgument("uniform_quantize: bits must be >= 2");
    if (beta <= 0.0) throw InvalidArgument("uniform_quantize: beta must be > 0");
    Tensor out(y.shape);
    for (int64_t i = 0; i < y.size(); ++i) out[i] = uniform_quantize_scalar(y[i], bits, beta);
    return out;
}

Tensor uniform_quantize_backward(const Tensor& grad_out, const Tensor& saved_y, double beta) {
    if (!grad_out.same_shape(saved_y))
        throw InvalidArgument("uniform_quantize_backward: shape mismatch");
    Tensor g(grad_out.shape);
    for (int64_t i = 0; i < g.size(); ++i)
        g[i] = (saved_y[i] >= 0.0 && saved_y[i] <= beta) ? grad_out[i] : 0.0;
    return g;
}

int64_t quantize_to_level(double v, int bits) {
    int64_t top = (int64_t{1} << bits) - 1;
    // Nearest odd integer; ties away from zero, and 0 maps to +1 like sign(0).
    int64_t level = 2 * static_cast<int64_t>(round_half_away((v + 1.0) / 2.0)) - 1;
    return std::clamp(level, -top, top);
}

int64_t fixedpoint_dot(std::span<const double> w, std::span<const double> x, int bits,
                       BinOpCounter* counter) {
    if (bits < 1) throw InvalidArgument("fixedpoint_dot: bits must be >= 1");
    if (w.size() != x.size()) throw InvalidArgument("fixedpoint_dot: length mismatch");
    const int64_t m = static_cast<int64_t>(w.size());
    const int64_t nw = (m + 63) >> 6;
    const int64_t offset = (int64_t{1} << bits) - 1;

    // Plane i of a level L holds bit i of the unsigned index (L + 2^bits - 1)/2,
    // mapped to +-1, so that L = sum_i 2^i * plane_i.
    auto encode = [&](std::span<const double> v) {
        std::vector<std::vector<uint64_t>> planes(
            static_cast<size_t>(bits), std::vector<uint64_t>(static_cast<size_t>(nw), 0));
        for (int64_t e = 0; e < m; ++e) {
            uint64_t idx = static_cast<uint64_t>((quantize_to_level(v[static_cast<size_t>(e)], bits) + offset) / 2);
            for (int i = 0; i < bits; ++i)
                if ((idx >> i) & 1u)
                    planes[static_cast<size_t>(i)][static_cast<size_t>(e >> 6)] |=
                        uint64_t{1} << (e & 63);
        }
        return planes;
    };

    auto wp = encode(w);
    auto xp = encode(x);
    int64_t total = 0;
    for (int i = 0; i < bits; ++i)
        for (int j = 0; j < bits; ++j)
            total += (int64_t{1} << (i + j)) *
                     xnor_popcount_dot(wp[static_cast<size_t>(i)], xp[static_cast<size_t>(j)], m,
                                       counter);
    return total;
}

}  // namespace gnet
