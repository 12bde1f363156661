#include "gnet/bitcore.hpp"

#include <algorithm>
#include <string>

#include "gnet/error.hpp"

namespace gnet {

namespace {

inline int64_t words_for(int64_t n) { return (n + 63) >> 6; }

// Mask covering the valid bits of the last word holding n elements.
inline uint64_t tail_mask(int64_t n) {
    int64_t rem = n & 63;
    return rem == 0 ? ~uint64_t{0} : ((uint64_t{1} << rem) - 1);
}

}  // namespace

bool BitTensor::pad_bits_zero() const {
    int64_t n = count();
    if (words.empty()) return true;
    return (words.back() & ~tail_mask(n)) == 0;
}

BitTensor pack_signs(const Tensor& t, ZeroRule zero_rule) {
    if (!t.all_finite()) throw InvalidArgument("pack_signs: input contains non-finite values");
    BitTensor b;
    b.shape = t.shape;
    int64_t n = t.size();
    b.words.assign(static_cast<size_t>(words_for(n)), 0);
    for (int64_t i = 0; i < n; ++i) {
        double v = t[i];
        bool bit = v > 0.0 || (v == 0.0 && zero_rule == ZeroRule::PlusOne);
        if (bit) b.words[static_cast<size_t>(i >> 6)] |= uint64_t{1} << (i & 63);
    }
    return b;
}

Tensor unpack(const BitTensor& b) {
    Tensor t(b.shape);
    int64_t n = b.count();
    for (int64_t i = 0; i < n; ++i) t[i] = b.sign_at(i);
    return t;
}

int64_t xnor_popcount_dot(std::span<const uint64_t> a, std::span<const uint64_t> b, int64_t n,
                          BinOpCounter* counter) {
    int64_t nw = words_for(n);
    int64_t pc = 0;
    for (int64_t w = 0; w < nw; ++w) {
        uint64_t x = ~(a[static_cast<size_t>(w)] ^ b[static_cast<size_t>(w)]);
        if (w == nw - 1) x &= tail_mask(n);
        pc += std::popcount(x);
    }
    if (counter) {
        counter->xnor_dot_calls += 1;
        counter->word_ops += nw;
    }
    return 2 * pc - n;
}

int64_t xnor_popcount_dot(const BitTensor& a, const BitTensor& b, BinOpCounter* counter) {
    if (a.count() != b.count())
        throw InvalidArgument("xnor_popcount_dot: valid counts differ (" +
                              std::to_string(a.count()) + " vs " + std::to_string(b.count()) +
                              ")");
    return xnor_popcount_dot(a.words, b.words, a.count(), counter);
}

int64_t conv_output_extent(int64_t in, int64_t kernel, int64_t stride, int64_t padding,
                           int64_t dilation) {
    return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

void ConvGeometry::validate() const {
    auto positive = [](int64_t v, const char* name) {
        if (v <= 0) throw InvalidArgument(std::string("ConvGeometry: ") + name + " must be > 0");
    };
    positive(in_channels, "in_channels");
    positive(out_channels, "out_channels");
    positive(kernel_h, "kernel_h");
    positive(kernel_w, "kernel_w");
    positive(stride, "stride");
    positive(dilation, "dilation");
    positive(input_h, "input_h");
    positive(input_w, "input_w");
    if (padding < 0) throw InvalidArgument("ConvGeometry: padding must be >= 0");
    if (output_h != conv_output_extent(input_h, kernel_h, stride, padding, dilation) ||
        output_w != conv_output_extent(input_w, kernel_w, stride, padding, dilation))
        throw InvalidArgument("ConvGeometry: output dims inconsistent with input/kernel/stride");
    if (output_h <= 0 || output_w <= 0)
        throw InvalidArgument("ConvGeometry: kernel does not fit input");
}

ConvGeometry make_geometry(int64_t c_in, int64_t c_out, int64_t kh, int64_t kw, int64_t h_in,
                           int64_t w_in, int64_t stride, int64_t padding, int64_t dilation) {
    ConvGeometry g;
    g.in_channels = c_in;
    g.out_channels = c_out;
    g.kernel_h = kh;
    g.kernel_w = kw;
    g.stride = stride;
    g.padding = padding;
    g.dilation = dilation;
    g.input_h = h_in;
    g.input_w = w_in;
    g.output_h = conv_output_extent(h_in, kh, stride, padding, dilation);
    g.output_w = conv_output_extent(w_in, kw, stride, padding, dilation);
    g.validate();
    return g;
}

PackedFilterBank repack_filters(const BitTensor& weight, int64_t c_out, int64_t fan_in) {
    if (weight.count() != c_out * fan_in)
        throw InvalidArgument("repack_filters: weight bit count != c_out * fan_in");
    PackedFilterBank bank;
    bank.filters = c_out;
    bank.fan_in = fan_in;
    bank.row_words = words_for(fan_in);
    bank.words.assign(static_cast<size_t>(c_out * bank.row_words), 0);
    for (int64_t f = 0; f < c_out; ++f) {
        uint64_t* row = bank.words.data() + f * bank.row_words;
        for (int64_t k = 0; k < fan_in; ++k)
            if (weight.get(f * fan_in + k)) row[k >> 6] |= uint64_t{1} << (k & 63);
    }
    return bank;
}

IntTensor binary_conv2d(const BitTensor& input, const BitTensor& weight, const ConvGeometry& geom,
                        PadMode pad_mode, BinOpCounter* counter) {
    if (weight.count() != geom.out_channels * geom.fan_in())
        throw InvalidArgument("binary_conv2d: weight element count does not match geometry");
    return binary_conv2d(input, repack_filters(weight, geom.out_channels, geom.fan_in()), geom,
                         pad_mode, counter);
}

IntTensor binary_conv2d(const BitTensor& input, const PackedFilterBank& bank,
                        const ConvGeometry& geom, PadMode pad_mode, BinOpCounter* counter) {
    geom.validate();
    if (input.count() != geom.in_channels * geom.input_h * geom.input_w)
        throw InvalidArgument("binary_conv2d: input element count does not match geometry");
    if (bank.filters != geom.out_channels || bank.fan_in != geom.fan_in())
        throw InvalidArgument("binary_conv2d: filter bank does not match geometry");

    const int64_t M = geom.fan_in();
    const int64_t row_words = bank.row_words;
    IntTensor out(Shape{geom.out_channels, geom.output_h, geom.output_w});

    // Per-position im2col row: patch bits over (c_in, ky, kx) in the same
    // order as the filter rows. With PadMode::Exclude a validity mask tracks
    // which taps are real input.
    std::vector<uint64_t> patch(static_cast<size_t>(row_words));
    std::vector<uint64_t> valid(static_cast<size_t>(row_words));

    for (int64_t oy = 0; oy < geom.output_h; ++oy) {
        for (int64_t ox = 0; ox < geom.output_w; ++ox) {
            std::fill(patch.begin(), patch.end(), 0);
            std::fill(valid.begin(), valid.end(), 0);
            int64_t k = 0;
            for (int64_t ci = 0; ci < geom.in_channels; ++ci) {
                for (int64_t ky = 0; ky < geom.kernel_h; ++ky) {
                    int64_t iy = oy * geom.stride + ky * geom.dilation - geom.padding;
                    for (int64_t kx = 0; kx < geom.kernel_w; ++kx, ++k) {
                        int64_t ix = ox * geom.stride + kx * geom.dilation - geom.padding;
                        if (iy < 0 || iy >= geom.input_h || ix < 0 || ix >= geom.input_w)
                            continue;  // pad tap: bit 0 (-1) and invalid
                        valid[static_cast<size_t>(k >> 6)] |= uint64_t{1} << (k & 63);
                        int64_t idx = (ci * geom.input_h + iy) * geom.input_w + ix;
                        if (input.get(idx))
                            patch[static_cast<size_t>(k >> 6)] |= uint64_t{1} << (k & 63);
                    }
                }
            }
            for (int64_t f = 0; f < geom.out_channels; ++f) {
                auto wrow = bank.row(f);
                int64_t acc;
                if (pad_mode == PadMode::NegOne) {
                    acc = xnor_popcount_dot(patch, wrow, M, counter);
                } else {
                    // Restrict the dot to valid taps: 2*pc(xnor & valid) - n_valid.
                    int64_t pc = 0, nvalid = 0;
                    int64_t nw = row_words;
                    for (int64_t w = 0; w < nw; ++w) {
                        uint64_t x = ~(patch[static_cast<size_t>(w)] ^ wrow[static_cast<size_t>(w)]);
                        uint64_t vm = valid[static_cast<size_t>(w)];
                        if (w == nw - 1) {
                            uint64_t tm =
                                (M & 63) ? ((uint64_t{1} << (M & 63)) - 1) : ~uint64_t{0};
                            vm &= tm;
                        }
                        pc += std::popcount(x & vm);
                        nvalid += std::popcount(vm);
                    }
                    if (counter) {
                        counter->xnor_dot_calls += 1;
                        counter->word_ops += nw;
                    }
                    acc = 2 * pc - nvalid;
                }
                out.data[static_cast<size_t>((f * geom.output_h + oy) * geom.output_w + ox)] =
                    static_cast<int32_t>(acc);
            }
        }
    }
    return out;
}

Tensor scaled_branch_sum(const std::vector<IntTensor>& accumulators,
                         const std::vector<double>& scales) {
    if (accumulators.empty()) throw InvalidArgument("scaled_branch_sum: empty accumulator list");
    if (accumulators.size() != scales.size())
        throw InvalidArgument("scaled_branch_sum: list lengths differ");
    for (const auto& a : accumulators)
        if (!a.same_shape(accumulators.front()))
            throw InvalidArgument("scaled_branch_sum: accumulator shape mismatch");
    Tensor out(accumulators.front().shape);
    for (size_t b = 0; b < accumulators.size(); ++b)
        for (int64_t i = 0; i < out.size(); ++i) out[i] += scales[b] * accumulators[b][i];
    return out;
}

}  // namespace gnet
