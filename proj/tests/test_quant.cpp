#include "gnet/quant.hpp"

#include <cmath>
#include <random>

#include "doctest.h"
#include "gnet/error.hpp"
#include "oracles.hpp"

using namespace gnet;

TEST_CASE("binarize_weights per-tensor example") {
    QuantSpec spec;
    spec.weight_scale_granularity = ScaleGranularity::PerTensor;
    Tensor w(Shape{3}, {0.5, -0.3, 0.2});
    auto bw = binarize_weights(w, spec);
    REQUIRE(bw.alpha.size() == 1);
    CHECK(bw.alpha[0] == doctest::Approx(1.0 / 3.0));
    CHECK(bw.bits.get(0));
    CHECK_FALSE(bw.bits.get(1));
    CHECK(bw.bits.get(2));

    Tensor zeros(Shape{4}, 0.0);
    auto bz = binarize_weights(zeros, spec);
    CHECK(bz.alpha[0] == 0.0);
    for (int64_t i = 0; i < 4; ++i) CHECK(bz.bits.get(i));  // sign(0) = +1
}

TEST_CASE("binarize_weights per-output-channel matches mean-abs oracle") {
    QuantSpec spec;  // default per-output-channel
    Rng rng(5);
    Tensor w = randn(Shape{4, 3, 3, 3}, rng);
    auto bw = binarize_weights(w, spec);
    REQUIRE(bw.alpha.size() == 4);
    int64_t per = 27;
    for (int64_t f = 0; f < 4; ++f) {
        double s = 0.0;
        for (int64_t i = 0; i < per; ++i) s += std::fabs(w[f * per + i]);
        CHECK(bw.alpha[static_cast<size_t>(f)] == doctest::Approx(s / per).epsilon(1e-12));
    }
}

TEST_CASE("alpha = mean|w| minimizes L2 error for the fixed sign pattern") {
    Rng rng(17);
    QuantSpec spec;
    spec.weight_scale_granularity = ScaleGranularity::PerTensor;
    for (int trial = 0; trial < 50; ++trial) {
        Tensor w = randn(Shape{40}, rng);
        auto bw = binarize_weights(w, spec);
        double alpha = bw.alpha[0];
        auto err = [&](double a) {
            double e = 0.0;
            for (int64_t i = 0; i < w.size(); ++i) {
                double r = w[i] - a * bw.bits.sign_at(i);
                e += r * r;
            }
            return e;
        };
        double base = err(alpha);
        for (double eps : {1e-3, 1e-2, 0.1}) {
            CHECK(base <= err(alpha + eps) + 1e-12);
            CHECK(base <= err(alpha - eps) + 1e-12);
        }
    }
}

TEST_CASE("weight STE backward") {
    QuantSpec spec;
    Rng rng(2);
    Tensor w = randn(Shape{10}, rng);
    Tensor g = randn(Shape{10}, rng);
    Tensor out = weight_ste_backward(g, w, spec);
    for (int64_t i = 0; i < 10; ++i) CHECK(out[i] == g[i]);

    spec.ste_clip = 1.0;
    Tensor w2(Shape{3}, {0.5, 1.5, -2.0});
    Tensor g2(Shape{3}, {1.0, 1.0, 1.0});
    Tensor out2 = weight_ste_backward(g2, w2, spec);
    CHECK(out2[0] == 1.0);
    CHECK(out2[1] == 0.0);
    CHECK(out2[2] == 0.0);
}

TEST_CASE("sign activation forward") {
    Tensor x(Shape{4}, {-2.0, -0.5, 0.0, 0.5});
    Tensor s = sign_activation(x);
    CHECK(s[0] == -1.0);
    CHECK(s[1] == -1.0);
    CHECK(s[2] == 1.0);
    CHECK(s[3] == 1.0);
    // idempotent on +-1
    Tensor ss = sign_activation(s);
    for (int64_t i = 0; i < 4; ++i) CHECK(ss[i] == s[i]);

    Rng rng(31);
    Tensor r = randn(Shape{100}, rng);
    Tensor sr = sign_activation(r);
    auto ref = oracle::sign_of(r);
    for (int64_t i = 0; i < 100; ++i) CHECK(sr[i] == ref[static_cast<size_t>(i)]);
}

TEST_CASE("sign backward factor closed form") {
    CHECK(sign_backward_factor(-1.5) == 0.0);
    CHECK(sign_backward_factor(-0.5) == 1.0);
    CHECK(sign_backward_factor(0.0) == 2.0);
    CHECK(sign_backward_factor(0.5) == 1.0);
    CHECK(sign_backward_factor(1.5) == 0.0);

    Tensor g(Shape{2}, 0.0);
    Tensor x(Shape{2}, {0.3, -0.2});
    Tensor out = sign_activation_backward(g, x);
    CHECK(out[0] == 0.0);
    CHECK(out[1] == 0.0);
}

TEST_CASE("sign backward factor is the derivative of the surrogate") {
    // grid avoiding breakpoints -1, 0, 1
    for (double x = -1.9; x < 1.95; x += 0.1) {
        if (std::fabs(x) < 0.03 || std::fabs(std::fabs(x) - 1.0) < 0.03) continue;
        double fd = oracle::central_diff([](double v) { return sign_surrogate(v); }, x, 1e-6);
        CHECK(sign_backward_factor(x) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("sign backward factor integrates to 2 over [-1,1] and vanishes outside") {
    double integral = 0.0;
    int n = 200000;
    for (int i = 0; i < n; ++i) {
        double x = -1.0 + 2.0 * (i + 0.5) / n;
        integral += sign_backward_factor(x) * (2.0 / n);
    }
    CHECK(integral == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(sign_backward_factor(-1.0001) == 0.0);
    CHECK(sign_backward_factor(1.0) == 0.0);
}

TEST_CASE("uniform_quantize examples and properties") {
    CHECK(uniform_quantize_scalar(0.4, 2, 1.0) == doctest::Approx(1.0 / 3.0));
    CHECK(uniform_quantize_scalar(1.7, 2, 1.0) == doctest::Approx(1.0));
    // tie at 1.5 grid units rounds away from zero -> level 2 -> 2/3
    CHECK(uniform_quantize_scalar(0.5, 2, 1.0) == doctest::Approx(2.0 / 3.0));

    Rng rng(41);
    Tensor y = rand_uniform(Shape{200}, rng, -0.5, 1.5);
    Tensor q = uniform_quantize(y, 3, 1.0);
    Tensor qq = uniform_quantize(q, 3, 1.0);
    for (int64_t i = 0; i < q.size(); ++i) CHECK(q[i] == qq[i]);  // idempotent

    // monotone in y
    double prev = -1.0;
    for (double v = -0.2; v < 1.3; v += 0.013) {
        double cur = uniform_quantize_scalar(v, 2, 1.0);
        CHECK(cur >= prev);
        prev = cur;
    }

    CHECK_THROWS_AS(uniform_quantize(y, 1, 1.0), InvalidArgument);
    CHECK_THROWS_AS(uniform_quantize(y, 2, 0.0), InvalidArgument);
}

TEST_CASE("uniform_quantize backward clips outside [0, beta]") {
    Tensor y(Shape{4}, {-0.1, 0.2, 0.9, 1.4});
    Tensor g(Shape{4}, 1.0);
    Tensor out = uniform_quantize_backward(g, y, 1.0);
    CHECK(out[0] == 0.0);
    CHECK(out[1] == 1.0);
    CHECK(out[2] == 1.0);
    CHECK(out[3] == 0.0);
}

TEST_CASE("fixedpoint_dot K=1 hand cases") {
    std::vector<double> w{1.0}, x{-1.0};
    CHECK(fixedpoint_dot(w, x, 1) == -1);
    std::vector<double> a{1.0, 1.0};
    CHECK(fixedpoint_dot(a, a, 1) == 2);
    CHECK_THROWS_AS(fixedpoint_dot(a, a, 0), InvalidArgument);
}

TEST_CASE("fixedpoint_dot equals quantize-then-multiply on random cases") {
    Rng rng(53);
    std::uniform_int_distribution<int> kdist(2, 3);
    std::uniform_int_distribution<int64_t> mdist(1, 64);
    for (int trial = 0; trial < 500; ++trial) {
        int bits = kdist(rng);
        int64_t m = mdist(rng);
        double range = static_cast<double>((1 << bits) - 1) + 1.0;
        std::uniform_real_distribution<double> vdist(-range, range);
        std::vector<double> w(static_cast<size_t>(m)), x(static_cast<size_t>(m));
        for (auto& v : w) v = vdist(rng);
        for (auto& v : x) v = vdist(rng);
        int64_t want = 0;
        for (int64_t i = 0; i < m; ++i)
            want += quantize_to_level(w[static_cast<size_t>(i)], bits) *
                    quantize_to_level(x[static_cast<size_t>(i)], bits);
        BinOpCounter counter;
        int64_t got = fixedpoint_dot(w, x, bits, &counter);
        REQUIRE(got == want);
        CHECK(counter.xnor_dot_calls == static_cast<int64_t>(bits) * bits);
        // section-4 range bound
        int64_t top = (int64_t{1} << bits) - 1;
        CHECK(std::abs(got) <= top * top * m);
    }
}
