#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <vector>

#include "gnet/tensor.hpp"

namespace gnet {

// +1 is encoded as bit 1, -1 as bit 0. sign(0) defaults to +1 so the encoding
// is total and 2*popcount(xnor) - n stays exact.
enum class ZeroRule { PlusOne, MinusOne };

// How padded positions enter the binary convolution. NegOne treats the pad
// ring as -1 bits (the accumulator keeps a fixed fan-in M and parity M mod 2);
// Exclude drops padded taps from the dot product, matching a zero-padded
// float reference.
enum class PadMode { NegOne, Exclude };

// Counts xnor-popcount dot invocations so analytical op counts can be checked
// against what the kernels actually executed.
struct BinOpCounter {
    int64_t xnor_dot_calls = 0;
    int64_t word_ops = 0;
};

// Sign tensor packed into 64-bit words: element i lives at bit (i % 64) of
// word (i / 64), LSB first, row-major over the logical shape. Pad bits past
// element n-1 are always zero.
struct BitTensor {
    Shape shape;
    std::vector<uint64_t> words;

    int64_t count() const { return numel(shape); }
    int64_t word_count() const { return static_cast<int64_t>(words.size()); }

    bool get(int64_t i) const { return (words[static_cast<size_t>(i >> 6)] >> (i & 63)) & 1u; }
    void set(int64_t i, bool bit) {
        uint64_t mask = uint64_t{1} << (i & 63);
        if (bit)
            words[static_cast<size_t>(i >> 6)] |= mask;
        else
            words[static_cast<size_t>(i >> 6)] &= ~mask;
    }
    double sign_at(int64_t i) const { return get(i) ? 1.0 : -1.0; }

    bool pad_bits_zero() const;
};

BitTensor pack_signs(const Tensor& t, ZeroRule zero_rule = ZeroRule::PlusOne);
Tensor unpack(const BitTensor& b);

// 2*popcount(xnor(a,b) masked to n bits) - n: the dot product of two packed
// +-1 vectors of length n.
int64_t xnor_popcount_dot(std::span<const uint64_t> a, std::span<const uint64_t> b, int64_t n,
                          BinOpCounter* counter = nullptr);
int64_t xnor_popcount_dot(const BitTensor& a, const BitTensor& b,
                          BinOpCounter* counter = nullptr);

struct ConvGeometry {
    int64_t in_channels = 0;
    int64_t out_channels = 0;
    int64_t kernel_h = 0;
    int64_t kernel_w = 0;
    int64_t stride = 1;
    int64_t padding = 0;
    int64_t dilation = 1;
    int64_t input_h = 0;
    int64_t input_w = 0;
    int64_t output_h = 0;
    int64_t output_w = 0;

    int64_t fan_in() const { return in_channels * kernel_h * kernel_w; }
    void validate() const;
};

// out = floor((in + 2*padding - dilation*(kernel-1) - 1) / stride) + 1
int64_t conv_output_extent(int64_t in, int64_t kernel, int64_t stride, int64_t padding,
                           int64_t dilation);
ConvGeometry make_geometry(int64_t c_in, int64_t c_out, int64_t kh, int64_t kw, int64_t h_in,
                           int64_t w_in, int64_t stride, int64_t padding, int64_t dilation);

// Weight bits repacked so each output filter owns word-aligned rows over
// (c_in, k_h, k_w); the convolution is then one aligned xnor dot per output
// position and filter.
struct PackedFilterBank {
    int64_t filters = 0;
    int64_t fan_in = 0;
    int64_t row_words = 0;
    std::vector<uint64_t> words;

    std::span<const uint64_t> row(int64_t f) const {
        return {words.data() + f * row_words, static_cast<size_t>(row_words)};
    }
};

PackedFilterBank repack_filters(const BitTensor& weight, int64_t c_out, int64_t fan_in);

// input logically (c_in, h_in, w_in); weight logically (c_out, c_in, k_h, k_w).
// Returns integer accumulators of shape (c_out, h_out, w_out).
IntTensor binary_conv2d(const BitTensor& input, const BitTensor& weight, const ConvGeometry& geom,
                        PadMode pad_mode = PadMode::NegOne, BinOpCounter* counter = nullptr);
IntTensor binary_conv2d(const BitTensor& input, const PackedFilterBank& bank,
                        const ConvGeometry& geom, PadMode pad_mode = PadMode::NegOne,
                        BinOpCounter* counter = nullptr);

// Elementwise sum_i scales[i] * accumulators[i].
Tensor scaled_branch_sum(const std::vector<IntTensor>& accumulators,
                         const std::vector<double>& scales);

}  // namespace gnet
