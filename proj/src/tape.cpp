#include "gnet/tape.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "gnet/bitcore.hpp"
#include "gnet/error.hpp"

namespace gnet {

Var make_param(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->op = "param";
    return n;
}

Var make_const(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = "const";
    return n;
}

void accumulate_grad(Node& n, const Tensor& g) {
    if (!n.grad_ready) {
        n.grad = Tensor(n.value.shape);
        n.grad_ready = true;
    }
    n.grad += g;
}

namespace {

Var new_node(Tensor value, std::vector<Var> inputs, const char* op,
             std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    n->op = op;
    for (const auto& in : n->inputs)
        if (in->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return n;
}

void topo_collect(const Var& root, std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next].get();
            ++next;
            if (!seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace

void backward(const Var& loss) {
    if (!loss) throw InvalidArgument("backward: null loss");
    if (loss->value.size() != 1) throw InvalidArgument("backward: loss must be scalar");
    std::vector<Node*> order;
    topo_collect(loss, order);
    for (Node* n : order) {
        n->grad_ready = false;
        n->grad = Tensor();
    }
    accumulate_grad(*loss, Tensor(loss->value.shape, 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->requires_grad && n->grad_ready && n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

Tensor pad_nchw(const Tensor& x, int64_t p, double value) {
    if (p == 0) return x;
    int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    Tensor out(Shape{n, c, h + 2 * p, w + 2 * p}, value);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t z = 0; z < w; ++z) out.at4(i, j, y + p, z + p) = x.at4(i, j, y, z);
    return out;
}

Tensor crop_nchw(const Tensor& xp, int64_t p, int64_t h, int64_t w) {
    if (p == 0) return xp;
    int64_t n = xp.shape[0], c = xp.shape[1];
    Tensor out(Shape{n, c, h, w});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t z = 0; z < w; ++z) out.at4(i, j, y, z) = xp.at4(i, j, y + p, z + p);
    return out;
}

void check_conv_shapes(const Tensor& input, const Tensor& weight, const Conv2dOpts& opts) {
    if (input.shape.size() != 4) throw InvalidArgument("conv2d: input must be (N,C,H,W)");
    if (weight.shape.size() != 4)
        throw InvalidArgument("conv2d: weight must be (Cout,Cin,kh,kw)");
    if (input.shape[1] != weight.shape[1])
        throw InvalidArgument("conv2d: channel mismatch, input " + shape_str(input.shape) +
                              " vs weight " + shape_str(weight.shape));
    if (opts.stride < 1 || opts.dilation < 1 || opts.padding < 0)
        throw InvalidArgument("conv2d: invalid stride/dilation/padding");
    int64_t ho = conv_output_extent(input.shape[2], weight.shape[2], opts.stride, opts.padding,
                                    opts.dilation);
    int64_t wo = conv_output_extent(input.shape[3], weight.shape[3], opts.stride, opts.padding,
                                    opts.dilation);
    if (ho <= 0 || wo <= 0) throw InvalidArgument("conv2d: kernel does not fit input");
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& weight, const Conv2dOpts& opts) {
    check_conv_shapes(input, weight, opts);
    const int64_t n = input.shape[0], cin = input.shape[1];
    const int64_t cout = weight.shape[0], kh = weight.shape[2], kw = weight.shape[3];
    const int64_t ho = conv_output_extent(input.shape[2], kh, opts.stride, opts.padding, opts.dilation);
    const int64_t wo = conv_output_extent(input.shape[3], kw, opts.stride, opts.padding, opts.dilation);
    Tensor xp = pad_nchw(input, opts.padding, opts.pad_value);
    const int64_t hp = xp.shape[2], wp = xp.shape[3];
    Tensor out(Shape{n, cout, ho, wo});
    const double* xd = xp.data.data();
    const double* wd = weight.data.data();
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t co = 0; co < cout; ++co) {
            for (int64_t oy = 0; oy < ho; ++oy) {
                for (int64_t ox = 0; ox < wo; ++ox) {
                    double acc = 0.0;
                    for (int64_t ci = 0; ci < cin; ++ci) {
                        const double* xrow = xd + ((i * cin + ci) * hp) * wp;
                        const double* wrow = wd + ((co * cin + ci) * kh) * kw;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            int64_t iy = oy * opts.stride + ky * opts.dilation;
                            const double* xr = xrow + iy * wp + ox * opts.stride;
                            const double* wr = wrow + ky * kw;
                            for (int64_t kx = 0; kx < kw; ++kx)
                                acc += xr[kx * opts.dilation] * wr[kx];
                        }
                    }
                    out.at4(i, co, oy, ox) = acc;
                }
            }
        }
    }
    return out;
}

Var conv2d(const Var& input, const Var& weight, const Conv2dOpts& opts) {
    Tensor out = conv2d_forward(input->value, weight->value, opts);
    auto bwd = [input, weight, opts](Node& self) {
        const Tensor& x = input->value;
        const Tensor& w = weight->value;
        const int64_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wdt = x.shape[3];
        const int64_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
        const int64_t ho = self.value.shape[2], wo = self.value.shape[3];
        Tensor xp = pad_nchw(x, opts.padding, opts.pad_value);
        Tensor dxp(xp.shape);
        Tensor dw(w.shape);
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t co = 0; co < cout; ++co) {
                for (int64_t oy = 0; oy < ho; ++oy) {
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        double g = self.grad.at4(i, co, oy, ox);
                        if (g == 0.0) continue;
                        for (int64_t ci = 0; ci < cin; ++ci) {
                            for (int64_t ky = 0; ky < kh; ++ky) {
                                int64_t iy = oy * opts.stride + ky * opts.dilation;
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    int64_t ix = ox * opts.stride + kx * opts.dilation;
                                    dxp.at4(i, ci, iy, ix) += g * w.at4(co, ci, ky, kx);
                                    dw.at4(co, ci, ky, kx) += g * xp.at4(i, ci, iy, ix);
                                }
                            }
                        }
                    }
                }
            }
        }
        if (input->requires_grad)
            accumulate_grad(*input, crop_nchw(dxp, opts.padding, h, wdt));
        if (weight->requires_grad) accumulate_grad(*weight, dw);
    };
    return new_node(std::move(out), {input, weight}, "conv2d", std::move(bwd));
}

Var linear(const Var& x, const Var& weight) {
    const Tensor& xv = x->value;
    const Tensor& wv = weight->value;
    if (xv.shape.size() != 2 || wv.shape.size() != 2 || xv.shape[1] != wv.shape[1])
        throw InvalidArgument("linear: expects (N,Cin) x (Cout,Cin)");
    int64_t n = xv.shape[0], cin = xv.shape[1], cout = wv.shape[0];
    Tensor out(Shape{n, cout});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < cout; ++o) {
            double acc = 0.0;
            for (int64_t c = 0; c < cin; ++c) acc += xv.at2(i, c) * wv.at2(o, c);
            out.at2(i, o) = acc;
        }
    auto bwd = [x, weight](Node& self) {
        const Tensor& xv = x->value;
        const Tensor& wv = weight->value;
        int64_t n = xv.shape[0], cin = xv.shape[1], cout = wv.shape[0];
        if (x->requires_grad) {
            Tensor dx(xv.shape);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t c = 0; c < cin; ++c) {
                    double acc = 0.0;
                    for (int64_t o = 0; o < cout; ++o) acc += self.grad.at2(i, o) * wv.at2(o, c);
                    dx.at2(i, c) = acc;
                }
            accumulate_grad(*x, dx);
        }
        if (weight->requires_grad) {
            Tensor dw(wv.shape);
            for (int64_t o = 0; o < cout; ++o)
                for (int64_t c = 0; c < cin; ++c) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < n; ++i) acc += self.grad.at2(i, o) * xv.at2(i, c);
                    dw.at2(o, c) = acc;
                }
            accumulate_grad(*weight, dw);
        }
    };
    return new_node(std::move(out), {x, weight}, "linear", std::move(bwd));
}

// ---------------------------------------------------------------------------
// Batch normalization

void BatchNormState::validate() const {
    if (eps <= 0.0) throw InvalidArgument("BatchNormState: eps must be > 0");
    if (momentum <= 0.0 || momentum >= 1.0)
        throw InvalidArgument("BatchNormState: momentum must be in (0,1)");
    for (double v : running_var)
        if (v < 0.0) throw InvalidArgument("BatchNormState: running variance must be >= 0");
}

Var batchnorm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
              bool training) {
    const Tensor& xv = x->value;
    if (xv.shape.size() != 4) throw InvalidArgument("batchnorm: input must be (N,C,H,W)");
    const int64_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
    if (n * h * w == 0) throw InvalidArgument("batchnorm: zero-size batch");
    if (static_cast<int64_t>(state.running_mean.size()) != c)
        throw InvalidArgument("batchnorm: state has " +
                              std::to_string(state.running_mean.size()) + " channels, input " +
                              std::to_string(c));
    state.validate();
    const double m = static_cast<double>(n * h * w);

    auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(c), 0.0);
    auto var = std::make_shared<std::vector<double>>(static_cast<size_t>(c), 0.0);
    if (training) {
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < c; ++j)
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t z = 0; z < w; ++z) (*mean)[static_cast<size_t>(j)] += xv.at4(i, j, y, z);
        for (double& v : *mean) v /= m;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < c; ++j)
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t z = 0; z < w; ++z) {
                        double d = xv.at4(i, j, y, z) - (*mean)[static_cast<size_t>(j)];
                        (*var)[static_cast<size_t>(j)] += d * d;
                    }
        for (double& v : *var) v /= m;
        for (int64_t j = 0; j < c; ++j) {
            auto k = static_cast<size_t>(j);
            state.running_mean[k] =
                (1.0 - state.momentum) * state.running_mean[k] + state.momentum * (*mean)[k];
            state.running_var[k] =
                (1.0 - state.momentum) * state.running_var[k] + state.momentum * (*var)[k];
        }
    } else {
        *mean = state.running_mean;
        *var = state.running_var;
    }

    Tensor out(xv.shape);
    const double eps = state.eps;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
            auto k = static_cast<size_t>(j);
            double inv = 1.0 / std::sqrt((*var)[k] + eps);
            double g = gamma->value[j], b = beta->value[j];
            for (int64_t y = 0; y < h; ++y)
                for (int64_t z = 0; z < w; ++z)
                    out.at4(i, j, y, z) = g * (xv.at4(i, j, y, z) - (*mean)[k]) * inv + b;
        }

    auto bwd = [x, gamma, beta, mean, var, training, eps, m](Node& self) {
        const Tensor& xv = x->value;
        const int64_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
        Tensor dgamma(gamma->value.shape);
        Tensor dbeta(beta->value.shape);
        Tensor dx(xv.shape);
        for (int64_t j = 0; j < c; ++j) {
            auto k = static_cast<size_t>(j);
            double mu = (*mean)[k];
            double inv = 1.0 / std::sqrt((*var)[k] + eps);
            double g = gamma->value[j];
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int64_t i = 0; i < n; ++i)
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t z = 0; z < w; ++z) {
                        double dy = self.grad.at4(i, j, y, z);
                        sum_dy += dy;
                        sum_dy_xhat += dy * (xv.at4(i, j, y, z) - mu) * inv;
                    }
            dbeta[j] = sum_dy;
            dgamma[j] = sum_dy_xhat;
            if (x->requires_grad) {
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t y = 0; y < h; ++y)
                        for (int64_t z = 0; z < w; ++z) {
                            double dy = self.grad.at4(i, j, y, z);
                            double xhat = (xv.at4(i, j, y, z) - mu) * inv;
                            double v;
                            if (training)
                                v = g * inv * (dy - sum_dy / m - xhat * sum_dy_xhat / m);
                            else
                                v = g * inv * dy;  // running stats are constants
                            dx.at4(i, j, y, z) = v;
                        }
            }
        }
        if (x->requires_grad) accumulate_grad(*x, dx);
        if (gamma->requires_grad) accumulate_grad(*gamma, dgamma);
        if (beta->requires_grad) accumulate_grad(*beta, dbeta);
    };
    return new_node(std::move(out), {x, gamma, beta}, "batchnorm", std::move(bwd));
}

Tensor batchnorm_eval_forward(const Tensor& x, const std::vector<double>& gamma,
                              const std::vector<double>& beta, const BatchNormState& state) {
    const int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    Tensor out(x.shape);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
            auto k = static_cast<size_t>(j);
            double inv = 1.0 / std::sqrt(state.running_var[k] + state.eps);
            for (int64_t y = 0; y < h; ++y)
                for (int64_t z = 0; z < w; ++z)
                    out.at4(i, j, y, z) =
                        gamma[k] * (x.at4(i, j, y, z) - state.running_mean[k]) * inv + beta[k];
        }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

Var unary(const Var& x, const char* name, double (*f)(double), double (*df)(double)) {
    Tensor out(x->value.shape);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = f(x->value[i]);
    auto bwd = [x, df](Node& self) {
        if (!x->requires_grad) return;
        Tensor dx(x->value.shape);
        for (int64_t i = 0; i < dx.size(); ++i) dx[i] = self.grad[i] * df(x->value[i]);
        accumulate_grad(*x, dx);
    };
    return new_node(std::move(out), {x}, name, std::move(bwd));
}

double sigmoid_scalar(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Var relu(const Var& x) {
    return unary(
        x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var tanh_act(const Var& x) {
    return unary(
        x, "tanh", [](double v) { return std::tanh(v); },
        [](double v) {
            double t = std::tanh(v);
            return 1.0 - t * t;
        });
}

Var sigmoid(const Var& x) {
    return unary(
        x, "sigmoid", sigmoid_scalar,
        [](double v) {
            double s = sigmoid_scalar(v);
            return s * (1.0 - s);
        });
}

Var add(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    bool a_scalar = av.size() == 1, b_scalar = bv.size() == 1;
    if (!a_scalar && !b_scalar && !av.same_shape(bv))
        throw InvalidArgument("add: shape mismatch " + shape_str(av.shape) + " vs " +
                              shape_str(bv.shape));
    const Tensor& big = b_scalar ? av : bv;
    Tensor out(big.shape);
    for (int64_t i = 0; i < out.size(); ++i)
        out[i] = (a_scalar ? av[0] : av[i]) + (b_scalar ? bv[0] : bv[i]);
    auto bwd = [a, b, a_scalar, b_scalar](Node& self) {
        if (a->requires_grad) {
            if (a_scalar && self.grad.size() != 1) {
                double s = 0.0;
                for (double g : self.grad.data) s += g;
                accumulate_grad(*a, Tensor(a->value.shape, s));
            } else {
                accumulate_grad(*a, self.grad);
            }
        }
        if (b->requires_grad) {
            if (b_scalar && self.grad.size() != 1) {
                double s = 0.0;
                for (double g : self.grad.data) s += g;
                accumulate_grad(*b, Tensor(b->value.shape, s));
            } else {
                accumulate_grad(*b, self.grad);
            }
        }
    };
    return new_node(std::move(out), {a, b}, "add", std::move(bwd));
}

Var scale(const Var& x, double c) {
    Tensor out = x->value;
    out *= c;
    auto bwd = [x, c](Node& self) {
        if (!x->requires_grad) return;
        Tensor dx = self.grad;
        dx *= c;
        accumulate_grad(*x, dx);
    };
    return new_node(std::move(out), {x}, "scale", std::move(bwd));
}

Var affine_combine(const std::vector<Var>& xs, const Var& coeffs) {
    if (xs.empty()) throw InvalidArgument("affine_combine: empty branch list");
    if (coeffs->value.size() != static_cast<int64_t>(xs.size()))
        throw InvalidArgument("affine_combine: coefficient count != branch count");
    for (const auto& x : xs)
        if (!x->value.same_shape(xs.front()->value))
            throw InvalidArgument("affine_combine: branch shape mismatch");
    Tensor out(xs.front()->value.shape);
    for (size_t k = 0; k < xs.size(); ++k) {
        double c = coeffs->value[static_cast<int64_t>(k)];
        for (int64_t i = 0; i < out.size(); ++i) out[i] += c * xs[k]->value[i];
    }
    std::vector<Var> inputs = xs;
    inputs.push_back(coeffs);
    auto xs_copy = xs;
    auto bwd = [xs_copy, coeffs](Node& self) {
        for (size_t k = 0; k < xs_copy.size(); ++k) {
            double c = coeffs->value[static_cast<int64_t>(k)];
            if (xs_copy[k]->requires_grad) {
                Tensor dx = self.grad;
                dx *= c;
                accumulate_grad(*xs_copy[k], dx);
            }
        }
        if (coeffs->requires_grad) {
            Tensor dc(coeffs->value.shape);
            for (size_t k = 0; k < xs_copy.size(); ++k) {
                double s = 0.0;
                for (int64_t i = 0; i < self.grad.size(); ++i)
                    s += self.grad[i] * xs_copy[k]->value[i];
                dc[static_cast<int64_t>(k)] = s;
            }
            accumulate_grad(*coeffs, dc);
        }
    };
    return new_node(std::move(out), std::move(inputs), "affine_combine", std::move(bwd));
}

Var gate_mix(const Var& straight, const Var& aggregated, const Var& theta, int64_t idx) {
    if (!straight->value.same_shape(aggregated->value))
        throw InvalidArgument("gate_mix: path shape mismatch");
    if (idx < 0 || idx >= theta->value.size())
        throw InvalidArgument("gate_mix: gate index out of range");
    double c = sigmoid_scalar(theta->value[idx]);
    Tensor out(straight->value.shape);
    for (int64_t i = 0; i < out.size(); ++i)
        out[i] = c * straight->value[i] + (1.0 - c) * aggregated->value[i];
    auto bwd = [straight, aggregated, theta, idx, c](Node& self) {
        if (straight->requires_grad) {
            Tensor d = self.grad;
            d *= c;
            accumulate_grad(*straight, d);
        }
        if (aggregated->requires_grad) {
            Tensor d = self.grad;
            d *= (1.0 - c);
            accumulate_grad(*aggregated, d);
        }
        if (theta->requires_grad) {
            double s = 0.0;
            for (int64_t i = 0; i < self.grad.size(); ++i)
                s += self.grad[i] * (straight->value[i] - aggregated->value[i]);
            Tensor dt(theta->value.shape);
            dt[idx] = s * c * (1.0 - c);
            accumulate_grad(*theta, dt);
        }
    };
    return new_node(std::move(out), {straight, aggregated, theta}, "gate_mix", std::move(bwd));
}

// ---------------------------------------------------------------------------
// Quantizer nodes

Var sign_act(const Var& x, QuantMode mode) {
    Tensor out(x->value.shape);
    if (mode == QuantMode::Hard) {
        out = sign_activation(x->value);
    } else {
        for (int64_t i = 0; i < out.size(); ++i) out[i] = sign_surrogate(x->value[i]);
    }
    auto bwd = [x](Node& self) {
        if (!x->requires_grad) return;
        accumulate_grad(*x, sign_activation_backward(self.grad, x->value));
    };
    return new_node(std::move(out), {x}, "sign_act", std::move(bwd));
}

Var binarize(const Var& w, const QuantSpec& spec, QuantMode mode) {
    Tensor out = mode == QuantMode::Hard ? binarized_weight_values(w->value, spec) : w->value;
    auto bwd = [w, spec](Node& self) {
        if (!w->requires_grad) return;
        accumulate_grad(*w, weight_ste_backward(self.grad, w->value, spec));
    };
    return new_node(std::move(out), {w}, "binarize", std::move(bwd));
}

Var uniform_quant(const Var& y, int bits, double beta, QuantMode mode) {
    Tensor out(y->value.shape);
    if (mode == QuantMode::Hard) {
        out = uniform_quantize(y->value, bits, beta);
    } else {
        for (int64_t i = 0; i < out.size(); ++i) out[i] = std::clamp(y->value[i], 0.0, beta);
    }
    auto bwd = [y, beta](Node& self) {
        if (!y->requires_grad) return;
        accumulate_grad(*y, uniform_quantize_backward(self.grad, y->value, beta));
    };
    return new_node(std::move(out), {y}, "uniform_quant", std::move(bwd));
}

// ---------------------------------------------------------------------------
// Pooling / reshaping / loss

Var global_avg_pool(const Var& x) {
    const Tensor& xv = x->value;
    if (xv.shape.size() != 4) throw InvalidArgument("global_avg_pool: input must be (N,C,H,W)");
    int64_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
    Tensor out(Shape{n, c});
    double inv = 1.0 / static_cast<double>(h * w);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
            double s = 0.0;
            for (int64_t y = 0; y < h; ++y)
                for (int64_t z = 0; z < w; ++z) s += xv.at4(i, j, y, z);
            out.at2(i, j) = s * inv;
        }
    auto bwd = [x, h, w, inv](Node& self) {
        if (!x->requires_grad) return;
        Tensor dx(x->value.shape);
        int64_t n = dx.shape[0], c = dx.shape[1];
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < c; ++j) {
                double g = self.grad.at2(i, j) * inv;
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t z = 0; z < w; ++z) dx.at4(i, j, y, z) = g;
            }
        accumulate_grad(*x, dx);
    };
    return new_node(std::move(out), {x}, "global_avg_pool", std::move(bwd));
}

Var upsample_nearest(const Var& x, int64_t factor) {
    const Tensor& xv = x->value;
    if (xv.shape.size() != 4) throw InvalidArgument("upsample_nearest: input must be (N,C,H,W)");
    if (factor < 1) throw InvalidArgument("upsample_nearest: factor must be >= 1");
    int64_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
    Tensor out(Shape{n, c, h * factor, w * factor});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j)
            for (int64_t y = 0; y < h * factor; ++y)
                for (int64_t z = 0; z < w * factor; ++z)
                    out.at4(i, j, y, z) = xv.at4(i, j, y / factor, z / factor);
    auto bwd = [x, factor](Node& self) {
        if (!x->requires_grad) return;
        Tensor dx(x->value.shape);
        int64_t n = dx.shape[0], c = dx.shape[1], h = dx.shape[2], w = dx.shape[3];
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < c; ++j)
                for (int64_t y = 0; y < h * factor; ++y)
                    for (int64_t z = 0; z < w * factor; ++z)
                        dx.at4(i, j, y / factor, z / factor) += self.grad.at4(i, j, y, z);
        accumulate_grad(*x, dx);
    };
    return new_node(std::move(out), {x}, "upsample_nearest", std::move(bwd));
}

Tensor softmax2d(const Tensor& logits) {
    // Class dim is dim 1; works for (N,C) and (N,C,H,W).
    int64_t n = logits.shape[0], c = logits.shape[1];
    int64_t hw = logits.size() / (n * c);
    Tensor p(logits.shape);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t s = 0; s < hw; ++s) {
            double mx = -1e300;
            for (int64_t j = 0; j < c; ++j) mx = std::max(mx, logits[(i * c + j) * hw + s]);
            double z = 0.0;
            for (int64_t j = 0; j < c; ++j) {
                double e = std::exp(logits[(i * c + j) * hw + s] - mx);
                p[(i * c + j) * hw + s] = e;
                z += e;
            }
            for (int64_t j = 0; j < c; ++j) p[(i * c + j) * hw + s] /= z;
        }
    return p;
}

Var softmax_cross_entropy(const Var& logits, std::vector<int64_t> labels) {
    const Tensor& lv = logits->value;
    if (lv.shape.size() != 2 && lv.shape.size() != 4)
        throw InvalidArgument("softmax_cross_entropy: logits must be (N,C) or (N,C,H,W)");
    int64_t n = lv.shape[0], c = lv.shape[1];
    int64_t hw = lv.size() / (n * c);
    if (static_cast<int64_t>(labels.size()) != n * hw)
        throw InvalidArgument("softmax_cross_entropy: label count mismatch");
    auto probs = std::make_shared<Tensor>(softmax2d(lv));
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t s = 0; s < hw; ++s) {
            int64_t y = labels[static_cast<size_t>(i * hw + s)];
            if (y < 0 || y >= c) throw InvalidArgument("softmax_cross_entropy: label out of range");
            loss -= std::log(std::max((*probs)[(i * c + y) * hw + s], 1e-300));
        }
    loss /= static_cast<double>(n * hw);
    auto labels_ptr = std::make_shared<std::vector<int64_t>>(std::move(labels));
    auto bwd = [logits, probs, labels_ptr, n, c, hw](Node& self) {
        if (!logits->requires_grad) return;
        double g = self.grad[0] / static_cast<double>(n * hw);
        Tensor dl(logits->value.shape);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t s = 0; s < hw; ++s) {
                int64_t y = (*labels_ptr)[static_cast<size_t>(i * hw + s)];
                for (int64_t j = 0; j < c; ++j) {
                    double p = (*probs)[(i * c + j) * hw + s];
                    dl[(i * c + j) * hw + s] = g * (p - (j == y ? 1.0 : 0.0));
                }
            }
        accumulate_grad(*logits, dl);
    };
    return new_node(Tensor(Shape{1}, loss), {logits}, "softmax_ce", std::move(bwd));
}

Var reduce_sum(const Var& x) {
    double s = 0.0;
    for (double v : x->value.data) s += v;
    auto bwd = [x](Node& self) {
        if (!x->requires_grad) return;
        accumulate_grad(*x, Tensor(x->value.shape, self.grad[0]));
    };
    return new_node(Tensor(Shape{1}, s), {x}, "reduce_sum", std::move(bwd));
}

Var reduce_mean(const Var& x) {
    double s = 0.0;
    for (double v : x->value.data) s += v;
    double inv = 1.0 / static_cast<double>(x->value.size());
    auto bwd = [x, inv](Node& self) {
        if (!x->requires_grad) return;
        accumulate_grad(*x, Tensor(x->value.shape, self.grad[0] * inv));
    };
    return new_node(Tensor(Shape{1}, s * inv), {x}, "reduce_mean", std::move(bwd));
}

}  // namespace gnet
