#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fedgate/rng.hpp"
#include "fedgate/tensor.hpp"

namespace fedgate {

template <typename S>
using TensorPtrT = std::shared_ptr<TensorT<S>>;

using TensorPtr = TensorPtrT<float>;

template <typename S>
TensorPtrT<S> make_leaf(TensorT<S> t, bool requires_grad = false) {
    auto p = std::make_shared<TensorT<S>>(std::move(t));
    p->requires_grad = requires_grad;
    return p;
}

struct Dim3 {
    int64_t t = 1, h = 1, w = 1;
};

// Reverse-mode tape. Ops append nodes during the forward pass; backward
// replays them in reverse. Gradients of tape-produced tensors are reset at
// the start of every backward pass while leaf gradients accumulate, so
// running backward twice doubles the leaf gradients exactly.
//
// A tape (and the tensors it references) is confined to one thread at a time;
// independent tapes may run in parallel without locking.
template <typename S>
class TapeT {
public:
    using TPtr = TensorPtrT<S>;

    void record(std::vector<TPtr> inputs, TPtr output, std::function<void()> fn) {
        nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(fn)});
    }

    void backward(const TPtr& output, const std::vector<S>& seed) {
        if (static_cast<int64_t>(seed.size()) != output->numel())
            throw ShapeError("backward seed length " + std::to_string(seed.size()) +
                             " does not match output " + shape_str(output->shape));
        for (auto& node : nodes_) {
            node.output->ensure_grad();
            node.output->zero_grad();
        }
        output->ensure_grad();
        for (size_t i = 0; i < seed.size(); ++i) output->grad[i] += seed[i];
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    }

    // Convenience for scalar outputs: seed gradient 1.
    void backward(const TPtr& output) {
        if (output->numel() != 1)
            throw ShapeError("default backward needs a scalar output, got " +
                             shape_str(output->shape));
        backward(output, std::vector<S>{S(1)});
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::vector<TPtr> inputs;
        TPtr output;
        std::function<void()> fn;
    };
    std::vector<Node> nodes_;
};

using Tape = TapeT<float>;

namespace detail {

template <typename S>
bool any_requires_grad(std::initializer_list<const TensorPtrT<S>*> ts) {
    for (auto* t : ts)
        if ((*t)->requires_grad) return true;
    return false;
}

// Geometry of one convolution, walking every (output, input, kernel) index
// triple that contributes a tap. Held by value inside the backward closure so
// nothing can dangle into the conv3d frame after it returns.
struct ConvTaps {
    int64_t N, Cout, Cg, cpg_out, To, Ho, Wo, kT, kH, kW, T, H, W, Cin;
    Dim3 stride, pad;

    template <typename Body>
    void for_each(Body&& body) const {
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Cout; ++co) {
                const int64_t ci0 = (co / cpg_out) * Cg;
                for (int64_t to = 0; to < To; ++to)
                    for (int64_t ho = 0; ho < Ho; ++ho)
                        for (int64_t wo = 0; wo < Wo; ++wo) {
                            const int64_t oidx =
                                (((n * Cout + co) * To + to) * Ho + ho) * Wo + wo;
                            for (int64_t cg = 0; cg < Cg; ++cg) {
                                const int64_t ci = ci0 + cg;
                                for (int64_t kt = 0; kt < kT; ++kt) {
                                    const int64_t ti = to * stride.t - pad.t + kt;
                                    if (ti < 0 || ti >= T) continue;
                                    for (int64_t kh = 0; kh < kH; ++kh) {
                                        const int64_t hi = ho * stride.h - pad.h + kh;
                                        if (hi < 0 || hi >= H) continue;
                                        for (int64_t kw = 0; kw < kW; ++kw) {
                                            const int64_t wi = wo * stride.w - pad.w + kw;
                                            if (wi < 0 || wi >= W) continue;
                                            const int64_t xidx =
                                                (((n * Cin + ci) * T + ti) * H + hi) * W + wi;
                                            const int64_t kidx =
                                                (((co * Cg + cg) * kT + kt) * kH + kh) * kW + kw;
                                            body(oidx, xidx, kidx);
                                        }
                                    }
                                }
                            }
                        }
            }
    }
};

} // namespace detail

// ---------------------------------------------------------------------------
// conv3d: cross-correlation over [N, C, T, H, W] with zero padding.
// kernel is [C_out, C_in/groups, kT, kH, kW]; depthwise = groups == C_in.
// ---------------------------------------------------------------------------
template <typename S>
TensorPtrT<S> conv3d(TapeT<S>& tape, const TensorPtrT<S>& input, const TensorPtrT<S>& kernel,
                     const TensorPtrT<S>& bias, Dim3 stride = {1, 1, 1}, Dim3 pad = {0, 0, 0},
                     int64_t groups = 1) {
    if (input->rank() != 5)
        throw ShapeError("conv3d input must be rank 5 [N,C,T,H,W], got " +
                         shape_str(input->shape));
    if (kernel->rank() != 5)
        throw ShapeError("conv3d kernel must be rank 5, got " + shape_str(kernel->shape));
    const int64_t N = input->dim(0), Cin = input->dim(1);
    const int64_t T = input->dim(2), H = input->dim(3), W = input->dim(4);
    const int64_t Cout = kernel->dim(0), Cg = kernel->dim(1);
    const int64_t kT = kernel->dim(2), kH = kernel->dim(3), kW = kernel->dim(4);
    if (groups < 1 || Cin % groups != 0 || Cout % groups != 0)
        throw ShapeError("conv3d channel axis: groups " + std::to_string(groups) +
                         " must divide C_in " + std::to_string(Cin) + " and C_out " +
                         std::to_string(Cout));
    if (Cg != Cin / groups)
        throw ShapeError("conv3d channel axis: kernel expects " + std::to_string(Cg) +
                         " input channels per group, input has " + std::to_string(Cin / groups));
    if (bias->rank() != 1 || bias->dim(0) != Cout)
        throw ShapeError("conv3d bias axis: expected [" + std::to_string(Cout) + "], got " +
                         shape_str(bias->shape));
    if (stride.t < 1 || stride.h < 1 || stride.w < 1)
        throw ShapeError("conv3d strides must be >= 1");
    auto check_extent = [](const char* axis, int64_t d, int64_t p, int64_t k) {
        if (k > d + 2 * p)
            throw ShapeError(std::string("conv3d ") + axis + " axis: kernel extent " +
                             std::to_string(k) + " exceeds padded input " +
                             std::to_string(d + 2 * p));
    };
    check_extent("temporal", T, pad.t, kT);
    check_extent("height", H, pad.h, kH);
    check_extent("width", W, pad.w, kW);

    const int64_t To = (T + 2 * pad.t - kT) / stride.t + 1;
    const int64_t Ho = (H + 2 * pad.h - kH) / stride.h + 1;
    const int64_t Wo = (W + 2 * pad.w - kW) / stride.w + 1;
    auto out = make_leaf(TensorT<S>({N, Cout, To, Ho, Wo}));
    out->requires_grad = detail::any_requires_grad<S>({&input, &kernel, &bias});

    const int64_t cpg_out = Cout / groups;
    const std::vector<S>& x = input->data;
    const std::vector<S>& k = kernel->data;
    std::vector<S>& y = out->data;

    const detail::ConvTaps taps{N,  Cout, Cg, cpg_out, To, Ho,  Wo,    kT,
                                kH, kW,   T,  H,       W,  Cin, stride, pad};

    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Cout; ++co) {
            const S b = bias->data[co];
            const int64_t base = (n * Cout + co) * To * Ho * Wo;
            for (int64_t i = 0; i < To * Ho * Wo; ++i) y[base + i] = b;
        }
    taps.for_each([&](int64_t oidx, int64_t xidx, int64_t kidx) { y[oidx] += x[xidx] * k[kidx]; });

    tape.record({input, kernel, bias}, out, [=]() {
        if (input->requires_grad) input->ensure_grad();
        if (kernel->requires_grad) kernel->ensure_grad();
        if (bias->requires_grad) bias->ensure_grad();
        const std::vector<S>& gy = out->grad;
        if (bias->requires_grad) {
            for (int64_t n = 0; n < N; ++n)
                for (int64_t co = 0; co < Cout; ++co) {
                    const int64_t base = (n * Cout + co) * To * Ho * Wo;
                    S acc = S(0);
                    for (int64_t i = 0; i < To * Ho * Wo; ++i) acc += gy[base + i];
                    bias->grad[co] += acc;
                }
        }
        if (input->requires_grad || kernel->requires_grad) {
            const bool gx = input->requires_grad, gk = kernel->requires_grad;
            taps.for_each([&](int64_t oidx, int64_t xidx, int64_t kidx) {
                const S g = gy[oidx];
                if (gx) input->grad[xidx] += g * kernel->data[kidx];
                if (gk) kernel->grad[kidx] += g * input->data[xidx];
            });
        }
    });
    return out;
}

// Depthwise-separable pseudo-3D convolution: per-channel spatial stage
// (1 x kH x kW), per-channel temporal stage (kT x 1 x 1), then a pointwise
// 1x1x1 channel-mixing stage. All stages stride 1 with same-padding (k/2),
// so spatial/temporal extents are preserved for odd kernel sizes.
template <typename S>
TensorPtrT<S> separable_conv3d(TapeT<S>& tape, const TensorPtrT<S>& input,
                               const TensorPtrT<S>& spatial_w, const TensorPtrT<S>& spatial_b,
                               const TensorPtrT<S>& temporal_w, const TensorPtrT<S>& temporal_b,
                               const TensorPtrT<S>& point_w, const TensorPtrT<S>& point_b) {
    const int64_t C = input->dim(1);
    if (spatial_w->rank() != 5 || spatial_w->dim(0) != C)
        throw ShapeError("separable_conv3d spatial stage expects " + std::to_string(C) +
                         " channels, got kernel " + shape_str(spatial_w->shape));
    if (temporal_w->rank() != 5 || temporal_w->dim(0) != C)
        throw ShapeError("separable_conv3d temporal stage expects " + std::to_string(C) +
                         " channels, got kernel " + shape_str(temporal_w->shape));
    const int64_t kH = spatial_w->dim(3), kW = spatial_w->dim(4);
    const int64_t kT = temporal_w->dim(2);
    auto s = conv3d(tape, input, spatial_w, spatial_b, {1, 1, 1}, {0, kH / 2, kW / 2}, C);
    auto t = conv3d(tape, s, temporal_w, temporal_b, {1, 1, 1}, {kT / 2, 0, 0}, C);
    return conv3d(tape, t, point_w, point_b, {1, 1, 1}, {0, 0, 0}, 1);
}

// ---------------------------------------------------------------------------
// maxpool3d: per-window maximum; gradient routed to the argmax, first
// occurrence in row-major (t, h, w) order on ties.
// ---------------------------------------------------------------------------
template <typename S>
TensorPtrT<S> maxpool3d(TapeT<S>& tape, const TensorPtrT<S>& input, Dim3 window, Dim3 stride) {
    if (input->rank() != 5)
        throw ShapeError("maxpool3d input must be rank 5, got " + shape_str(input->shape));
    const int64_t N = input->dim(0), C = input->dim(1);
    const int64_t T = input->dim(2), H = input->dim(3), W = input->dim(4);
    auto check = [](const char* axis, int64_t w, int64_t d) {
        if (w < 1 || w > d)
            throw ShapeError(std::string("maxpool3d ") + axis + " axis: window " +
                             std::to_string(w) + " invalid for input extent " + std::to_string(d));
    };
    check("temporal", window.t, T);
    check("height", window.h, H);
    check("width", window.w, W);
    if (stride.t < 1 || stride.h < 1 || stride.w < 1)
        throw ShapeError("maxpool3d strides must be >= 1");

    const int64_t To = (T - window.t) / stride.t + 1;
    const int64_t Ho = (H - window.h) / stride.h + 1;
    const int64_t Wo = (W - window.w) / stride.w + 1;
    auto out = make_leaf(TensorT<S>({N, C, To, Ho, Wo}));
    out->requires_grad = input->requires_grad;
    auto argmax = std::make_shared<std::vector<int64_t>>(out->data.size());

    const std::vector<S>& x = input->data;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t to = 0; to < To; ++to)
                for (int64_t ho = 0; ho < Ho; ++ho)
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                        S best{};
                        int64_t besti = -1;
                        for (int64_t kt = 0; kt < window.t; ++kt)
                            for (int64_t kh = 0; kh < window.h; ++kh)
                                for (int64_t kw = 0; kw < window.w; ++kw) {
                                    const int64_t ti = to * stride.t + kt;
                                    const int64_t hi = ho * stride.h + kh;
                                    const int64_t wi = wo * stride.w + kw;
                                    const int64_t xi =
                                        (((n * C + c) * T + ti) * H + hi) * W + wi;
                                    if (besti < 0 || x[xi] > best) {
                                        best = x[xi];
                                        besti = xi;
                                    }
                                }
                        const int64_t oi = (((n * C + c) * To + to) * Ho + ho) * Wo + wo;
                        out->data[oi] = best;
                        (*argmax)[oi] = besti;
                    }

    tape.record({input}, out, [=]() {
        if (!input->requires_grad) return;
        input->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) input->grad[(*argmax)[i]] += out->grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// dense: y[n,fo] = b[fo] + sum_fi x[n,fi] * w[fo,fi]
// ---------------------------------------------------------------------------
template <typename S>
TensorPtrT<S> dense(TapeT<S>& tape, const TensorPtrT<S>& input, const TensorPtrT<S>& weight,
                    const TensorPtrT<S>& bias) {
    if (input->rank() != 2)
        throw ShapeError("dense input must be rank 2 [N,F_in], got " + shape_str(input->shape));
    const int64_t N = input->dim(0), Fin = input->dim(1);
    if (weight->rank() != 2 || weight->dim(1) != Fin)
        throw ShapeError("dense feature axis: input has " + std::to_string(Fin) +
                         " features, weight is " + shape_str(weight->shape));
    const int64_t Fout = weight->dim(0);
    if (bias->rank() != 1 || bias->dim(0) != Fout)
        throw ShapeError("dense bias axis: expected [" + std::to_string(Fout) + "], got " +
                         shape_str(bias->shape));

    auto out = make_leaf(TensorT<S>({N, Fout}));
    out->requires_grad = detail::any_requires_grad<S>({&input, &weight, &bias});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t fo = 0; fo < Fout; ++fo) {
            S acc = bias->data[fo];
            for (int64_t fi = 0; fi < Fin; ++fi)
                acc += input->data[n * Fin + fi] * weight->data[fo * Fin + fi];
            out->data[n * Fout + fo] = acc;
        }

    tape.record({input, weight, bias}, out, [=]() {
        if (input->requires_grad) input->ensure_grad();
        if (weight->requires_grad) weight->ensure_grad();
        if (bias->requires_grad) bias->ensure_grad();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t fo = 0; fo < Fout; ++fo) {
                const S g = out->grad[n * Fout + fo];
                if (bias->requires_grad) bias->grad[fo] += g;
                for (int64_t fi = 0; fi < Fin; ++fi) {
                    if (input->requires_grad)
                        input->grad[n * Fin + fi] += g * weight->data[fo * Fin + fi];
                    if (weight->requires_grad)
                        weight->grad[fo * Fin + fi] += g * input->data[n * Fin + fi];
                }
            }
    });
    return out;
}

template <typename S>
TensorPtrT<S> relu(TapeT<S>& tape, const TensorPtrT<S>& input) {
    auto out = make_leaf(TensorT<S>(input->shape));
    out->requires_grad = input->requires_grad;
    for (size_t i = 0; i < input->data.size(); ++i)
        out->data[i] = input->data[i] > S(0) ? input->data[i] : S(0);
    tape.record({input}, out, [=]() {
        if (!input->requires_grad) return;
        input->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i)
            if (input->data[i] > S(0)) input->grad[i] += out->grad[i];
    });
    return out;
}

template <typename S>
S sigmoid_scalar(S x) {
    if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
    const S e = std::exp(x);
    return e / (S(1) + e);
}

template <typename S>
TensorPtrT<S> sigmoid(TapeT<S>& tape, const TensorPtrT<S>& input) {
    auto out = make_leaf(TensorT<S>(input->shape));
    out->requires_grad = input->requires_grad;
    for (size_t i = 0; i < input->data.size(); ++i)
        out->data[i] = sigmoid_scalar(input->data[i]);
    tape.record({input}, out, [=]() {
        if (!input->requires_grad) return;
        input->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) {
            const S y = out->data[i];
            input->grad[i] += out->grad[i] * y * (S(1) - y);
        }
    });
    return out;
}

template <typename S>
TensorPtrT<S> mul(TapeT<S>& tape, const TensorPtrT<S>& a, const TensorPtrT<S>& b) {
    if (a->shape != b->shape)
        throw ShapeError("elementwise mul shape mismatch: " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    auto out = make_leaf(TensorT<S>(a->shape));
    out->requires_grad = detail::any_requires_grad<S>({&a, &b});
    for (size_t i = 0; i < a->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    tape.record({a, b}, out, [=]() {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
        }
    });
    return out;
}

// Inverted dropout: in training mode each element survives with probability
// 1-p and survivors are scaled by 1/(1-p); the mask is drawn once per forward
// pass (one rng draw per element in row-major order) and reused by backward.
// Evaluation mode is the identity and consumes no rng draws.
template <typename S>
TensorPtrT<S> dropout(TapeT<S>& tape, const TensorPtrT<S>& input, double p, Rng& rng,
                      bool training) {
    if (!(p >= 0.0 && p < 1.0))
        throw ConfigError("dropout probability must be in [0,1), got " + std::to_string(p));
    auto out = make_leaf(TensorT<S>(input->shape));
    out->requires_grad = input->requires_grad;
    auto mask = std::make_shared<std::vector<S>>();
    if (training && p > 0.0) {
        mask->resize(input->data.size());
        const S scale = S(1.0 / (1.0 - p));
        for (size_t i = 0; i < mask->size(); ++i)
            (*mask)[i] = (static_cast<double>(rng.next_float()) < p) ? S(0) : scale;
        for (size_t i = 0; i < input->data.size(); ++i)
            out->data[i] = input->data[i] * (*mask)[i];
    } else {
        out->data = input->data;
    }
    tape.record({input}, out, [=]() {
        if (!input->requires_grad) return;
        input->ensure_grad();
        if (mask->empty()) {
            for (size_t i = 0; i < out->grad.size(); ++i) input->grad[i] += out->grad[i];
        } else {
            for (size_t i = 0; i < out->grad.size(); ++i)
                input->grad[i] += out->grad[i] * (*mask)[i];
        }
    });
    return out;
}

template <typename S>
TensorPtrT<S> reshape(TapeT<S>& tape, const TensorPtrT<S>& input, Shape new_shape) {
    if (shape_numel(new_shape) != input->numel())
        throw ShapeError("reshape from " + shape_str(input->shape) + " to " +
                         shape_str(new_shape) + " changes element count");
    auto out = make_leaf(TensorT<S>(std::move(new_shape)));
    out->requires_grad = input->requires_grad;
    out->data = input->data;
    tape.record({input}, out, [=]() {
        if (!input->requires_grad) return;
        input->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) input->grad[i] += out->grad[i];
    });
    return out;
}

template <typename S>
TensorPtrT<S> sum(TapeT<S>& tape, const TensorPtrT<S>& input) {
    auto out = make_leaf(TensorT<S>({1}));
    out->requires_grad = input->requires_grad;
    S acc = S(0);
    for (S v : input->data) acc += v;
    out->data[0] = acc;
    tape.record({input}, out, [=]() {
        if (!input->requires_grad) return;
        input->ensure_grad();
        for (size_t i = 0; i < input->grad.size(); ++i) input->grad[i] += out->grad[0];
    });
    return out;
}

// Mean binary cross-entropy computed directly from logits:
//   loss_i = max(z,0) - z*y + log1p(exp(-|z|)),  d loss / d z_i = (sigmoid(z_i) - y_i) / N
template <typename S>
TensorPtrT<S> bce_with_logits(TapeT<S>& tape, const TensorPtrT<S>& logits,
                              const std::vector<S>& labels) {
    if (logits->rank() != 1)
        throw ShapeError("bce_with_logits expects rank-1 logits, got " +
                         shape_str(logits->shape));
    const int64_t N = logits->numel();
    if (N == 0) throw DataError("bce_with_logits: empty batch");
    if (static_cast<int64_t>(labels.size()) != N)
        throw ShapeError("bce_with_logits: " + std::to_string(N) + " logits vs " +
                         std::to_string(labels.size()) + " labels");
    for (S y : labels)
        if (y != S(0) && y != S(1)) throw DataError("bce_with_logits: labels must be 0 or 1");

    auto out = make_leaf(TensorT<S>({1}));
    out->requires_grad = logits->requires_grad;
    S acc = S(0);
    for (int64_t i = 0; i < N; ++i) {
        const S z = logits->data[i];
        const S y = labels[i];
        acc += std::max(z, S(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    out->data[0] = acc / S(N);

    auto labels_copy = std::make_shared<std::vector<S>>(labels);
    tape.record({logits}, out, [=]() {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        const S g = out->grad[0];
        for (int64_t i = 0; i < N; ++i)
            logits->grad[i] +=
                g * (sigmoid_scalar(logits->data[i]) - (*labels_copy)[i]) / S(N);
    });
    return out;
}

} // namespace fedgate
