#pragma once

// Differentiable operations. Exactly the set the network and losses need;
// every op records its backward closure on the tape when any input requires
// gradients. Selection ops (top-k, min) break ties by lowest row-major index.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "protocase/tensor.hpp"

namespace protocase::ad {

namespace detail {

inline bool want_grad(const Tape& tape, std::initializer_list<Tensor> inputs) {
    if (!tape.recording()) return false;
    for (const auto& t : inputs)
        if (t->requires_grad) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a->shape) + " vs " +
                                    shape_str(b->shape));
    const bool rg = detail::want_grad(tape, {a, b});
    auto out = make_tensor(a->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (rg)
        tape.record([a, b, out] {
            if (!has_grad(out)) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i) b->grad[i] += out->grad[i];
            }
        });
    return out;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) throw std::invalid_argument("sub: shape mismatch");
    const bool rg = detail::want_grad(tape, {a, b});
    auto out = make_tensor(a->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
    if (rg)
        tape.record([a, b, out] {
            if (!has_grad(out)) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i) b->grad[i] -= out->grad[i];
            }
        });
    return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) throw std::invalid_argument("mul: shape mismatch");
    const bool rg = detail::want_grad(tape, {a, b});
    auto out = make_tensor(a->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (rg)
        tape.record([a, b, out] {
            if (!has_grad(out)) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i)
                    a->grad[i] += out->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i)
                    b->grad[i] += out->grad[i] * a->data[i];
            }
        });
    return out;
}

// Exact division (a*(1/c) rounds differently and breaks oracle equality).
inline Tensor div_scalar(Tape& tape, const Tensor& a, double c) {
    if (c == 0.0) throw std::invalid_argument("div_scalar: division by zero");
    const bool rg = detail::want_grad(tape, {a});
    auto out = make_tensor(a->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] / c;
    if (rg)
        tape.record([a, out, c] {
            if (!has_grad(out) || !a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] / c;
        });
    return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
    const bool rg = detail::want_grad(tape, {a});
    auto out = make_tensor(a->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * c;
    if (rg)
        tape.record([a, out, c] {
            if (!has_grad(out) || !a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] * c;
        });
    return out;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

inline Tensor relu(Tape& tape, const Tensor& a) {
    const bool rg = detail::want_grad(tape, {a});
    auto out = make_tensor(a->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i)
        out->data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
    if (rg)
        tape.record([a, out] {
            if (!has_grad(out) || !a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < out->numel(); ++i)
                if (a->data[i] > 0.0) a->grad[i] += out->grad[i];
        });
    return out;
}

inline Tensor sigmoid(Tape& tape, const Tensor& a) {
    const bool rg = detail::want_grad(tape, {a});
    auto out = make_tensor(a->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = 1.0 / (1.0 + std::exp(-a->data[i]));
    if (rg)
        tape.record([a, out] {
            if (!has_grad(out) || !a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < out->numel(); ++i) {
                const double s = out->data[i];
                a->grad[i] += out->grad[i] * s * (1.0 - s);
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum(Tape& tape, const Tensor& a) {
    const bool rg = detail::want_grad(tape, {a});
    double s = 0.0;
    for (double v : a->data) s += v;
    auto out = make_tensor({1}, {s}, rg);
    if (rg)
        tape.record([a, out] {
            if (!has_grad(out) || !a->requires_grad) return;
            a->ensure_grad();
            const double g = out->grad[0];
            for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += g;
        });
    return out;
}

inline Tensor mean(Tape& tape, const Tensor& a) {
    return div_scalar(tape, sum(tape, a), static_cast<double>(a->numel()));
}

// L2 norm sqrt(sum v^2), summed in row-major order. Subgradient 0 at the
// zero vector.
inline Tensor l2_norm(Tape& tape, const Tensor& a) {
    const bool rg = detail::want_grad(tape, {a});
    double ss = 0.0;
    for (double v : a->data) ss += v * v;
    const double n = std::sqrt(ss);
    auto out = make_tensor({1}, {n}, rg);
    if (rg)
        tape.record([a, out, n] {
            if (!has_grad(out) || !a->requires_grad || n == 0.0) return;
            a->ensure_grad();
            const double g = out->grad[0] / n;
            for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += g * a->data[i];
        });
    return out;
}

// Joins scalar tensors into one vector; gradient routes back per slot.
inline Tensor stack_scalars(Tape& tape, const std::vector<Tensor>& xs) {
    if (xs.empty()) throw std::invalid_argument("stack_scalars: empty input");
    bool rg = false;
    std::vector<double> vals(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        vals[i] = scalar_value(xs[i]);
        rg = rg || xs[i]->requires_grad;
    }
    rg = rg && tape.recording();
    auto out = make_tensor({static_cast<int>(xs.size())}, std::move(vals), rg);
    if (rg)
        tape.record([xs, out] {
            if (!has_grad(out)) return;
            for (std::size_t i = 0; i < xs.size(); ++i) {
                if (!xs[i]->requires_grad) continue;
                xs[i]->ensure_grad();
                xs[i]->grad[0] += out->grad[i];
            }
        });
    return out;
}

// Minimum entry of a vector as a scalar; ties go to the lowest index.
inline Tensor min_element(Tape& tape, const Tensor& a) {
    if (a->numel() == 0) throw std::invalid_argument("min_element: empty tensor");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < a->numel(); ++i)
        if (a->data[i] < a->data[arg]) arg = i;
    const bool rg = detail::want_grad(tape, {a});
    auto out = make_tensor({1}, {a->data[arg]}, rg);
    if (rg)
        tape.record([a, out, arg] {
            if (!has_grad(out) || !a->requires_grad) return;
            a->ensure_grad();
            a->grad[arg] += out->grad[0];
        });
    return out;
}

namespace detail {

// Indices of the k extreme entries. largest=true: by (value desc, index asc);
// largest=false: by (value asc, index asc). The returned order is the
// summation order, which keeps results bit-identical to a sort-based oracle.
inline std::vector<std::size_t> extreme_k_indices(const std::vector<double>& v, int k,
                                                  bool largest) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    auto cmp = [&](std::size_t a, std::size_t b) {
        if (v[a] != v[b]) return largest ? v[a] > v[b] : v[a] < v[b];
        return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), cmp);
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

}  // namespace detail

// Mean of the k largest entries (top-k average pooling).
inline Tensor topk_mean(Tape& tape, const Tensor& a, int k) {
    const int n = static_cast<int>(a->numel());
    if (k < 1 || k > n)
        throw std::invalid_argument("topk_mean: k=" + std::to_string(k) + " out of range 1.." +
                                    std::to_string(n));
    auto idx = detail::extreme_k_indices(a->data, k, /*largest=*/true);
    double s = 0.0;
    for (std::size_t i : idx) s += a->data[i];
    const bool rg = detail::want_grad(tape, {a});
    auto out = make_tensor({1}, {s / k}, rg);
    if (rg)
        tape.record([a, out, idx, k] {
            if (!has_grad(out) || !a->requires_grad) return;
            a->ensure_grad();
            const double g = out->grad[0] / k;
            for (std::size_t i : idx) a->grad[i] += g;
        });
    return out;
}

// Mean of the k smallest entries (the mink term of the cluster/separation
// costs).
inline Tensor mink_mean(Tape& tape, const Tensor& a, int k) {
    const int n = static_cast<int>(a->numel());
    if (k < 1 || k > n) throw std::invalid_argument("mink_mean: k out of range");
    auto idx = detail::extreme_k_indices(a->data, k, /*largest=*/false);
    double s = 0.0;
    for (std::size_t i : idx) s += a->data[i];
    const bool rg = detail::want_grad(tape, {a});
    auto out = make_tensor({1}, {s / k}, rg);
    if (rg)
        tape.record([a, out, idx, k] {
            if (!has_grad(out) || !a->requires_grad) return;
            a->ensure_grad();
            const double g = out->grad[0] / k;
            for (std::size_t i : idx) a->grad[i] += g;
        });
    return out;
}

// ---------------------------------------------------------------------------
// convolution stack
// ---------------------------------------------------------------------------

// Cross-correlation of [C_in,H,W] with [C_out,C_in,kh,kw] plus bias.
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernels, const Tensor& bias,
                     int stride, int padding) {
    if (input->shape.size() != 3 || kernels->shape.size() != 4)
        throw std::invalid_argument("conv2d: expected input [C,H,W] and kernels [O,C,kh,kw]");
    const int ci = input->shape[0], h = input->shape[1], w = input->shape[2];
    const int co = kernels->shape[0], kci = kernels->shape[1];
    const int kh = kernels->shape[2], kw = kernels->shape[3];
    if (kci != ci)
        throw std::invalid_argument("conv2d: input has " + std::to_string(ci) +
                                    " channels but kernels expect " + std::to_string(kci));
    if (bias->shape != std::vector<int>{co}) throw std::invalid_argument("conv2d: bad bias shape");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (kh > h + 2 * padding || kw > w + 2 * padding)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    const int oh = (h + 2 * padding - kh) / stride + 1;
    const int ow = (w + 2 * padding - kw) / stride + 1;

    const bool rg = detail::want_grad(tape, {input, kernels, bias});
    auto out = make_tensor({co, oh, ow}, rg);

    const double* in = input->data.data();
    const double* ker = kernels->data.data();
    double* o = out->data.data();
    for (int oc = 0; oc < co; ++oc) {
        const double b = bias->data[oc];
        double* oplane = o + static_cast<std::size_t>(oc) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) oplane[i] = b;
        for (int ic = 0; ic < ci; ++ic) {
            const double* iplane = in + static_cast<std::size_t>(ic) * h * w;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const double wv = ker[((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx];
                    // output rows for which iy = oy*stride - padding + ky is valid
                    int oy_lo = 0, oy_hi = oh;
                    while (oy_lo < oh && oy_lo * stride - padding + ky < 0) ++oy_lo;
                    while (oy_hi > oy_lo && (oy_hi - 1) * stride - padding + ky >= h) --oy_hi;
                    int ox_lo = 0, ox_hi = ow;
                    while (ox_lo < ow && ox_lo * stride - padding + kx < 0) ++ox_lo;
                    while (ox_hi > ox_lo && (ox_hi - 1) * stride - padding + kx >= w) --ox_hi;
                    for (int oy = oy_lo; oy < oy_hi; ++oy) {
                        const int iy = oy * stride - padding + ky;
                        const double* irow = iplane + static_cast<std::size_t>(iy) * w;
                        double* orow = oplane + static_cast<std::size_t>(oy) * ow;
                        const int ixbase = -padding + kx;
                        for (int ox = ox_lo; ox < ox_hi; ++ox)
                            orow[ox] += wv * irow[ox * stride + ixbase];
                    }
                }
            }
        }
    }

    if (rg)
        tape.record([input, kernels, bias, out, stride, padding] {
            if (!has_grad(out)) return;
            const int ci = input->shape[0], h = input->shape[1], w = input->shape[2];
            const int co = kernels->shape[0], kh = kernels->shape[2], kw = kernels->shape[3];
            const int oh = out->shape[1], ow = out->shape[2];
            const double* go = out->grad.data();
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (int oc = 0; oc < co; ++oc) {
                    double s = 0.0;
                    const double* gplane = go + static_cast<std::size_t>(oc) * oh * ow;
                    for (int i = 0; i < oh * ow; ++i) s += gplane[i];
                    bias->grad[oc] += s;
                }
            }
            const bool gin = input->requires_grad, gker = kernels->requires_grad;
            if (gin) input->ensure_grad();
            if (gker) kernels->ensure_grad();
            for (int oc = 0; oc < co; ++oc) {
                const double* gplane = go + static_cast<std::size_t>(oc) * oh * ow;
                for (int ic = 0; ic < ci; ++ic) {
                    const double* iplane = input->data.data() + static_cast<std::size_t>(ic) * h * w;
                    double* giplane = gin ? input->grad.data() + static_cast<std::size_t>(ic) * h * w
                                          : nullptr;
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            const std::size_t widx =
                                ((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx;
                            const double wv = kernels->data[widx];
                            double wgrad = 0.0;
                            int oy_lo = 0, oy_hi = oh;
                            while (oy_lo < oh && oy_lo * stride - padding + ky < 0) ++oy_lo;
                            while (oy_hi > oy_lo && (oy_hi - 1) * stride - padding + ky >= h) --oy_hi;
                            int ox_lo = 0, ox_hi = ow;
                            while (ox_lo < ow && ox_lo * stride - padding + kx < 0) ++ox_lo;
                            while (ox_hi > ox_lo && (ox_hi - 1) * stride - padding + kx >= w) --ox_hi;
                            for (int oy = oy_lo; oy < oy_hi; ++oy) {
                                const int iy = oy * stride - padding + ky;
                                const double* irow = iplane + static_cast<std::size_t>(iy) * w;
                                double* girow =
                                    gin ? giplane + static_cast<std::size_t>(iy) * w : nullptr;
                                const double* grow = gplane + static_cast<std::size_t>(oy) * ow;
                                const int ixbase = -padding + kx;
                                for (int ox = ox_lo; ox < ox_hi; ++ox) {
                                    const double g = grow[ox];
                                    if (gker) wgrad += g * irow[ox * stride + ixbase];
                                    if (gin) girow[ox * stride + ixbase] += g * wv;
                                }
                            }
                            if (gker) kernels->grad[widx] += wgrad;
                        }
                    }
                }
            }
        });
    return out;
}

// Max pooling with square window == stride; ties take the first entry in
// row-major window order.
inline Tensor maxpool2d(Tape& tape, const Tensor& input, int window) {
    if (input->shape.size() != 3) throw std::invalid_argument("maxpool2d: expected [C,H,W]");
    if (window < 1) throw std::invalid_argument("maxpool2d: window must be >= 1");
    const int c = input->shape[0], h = input->shape[1], w = input->shape[2];
    const int oh = h / window, ow = w / window;
    if (oh < 1 || ow < 1) throw std::invalid_argument("maxpool2d: window larger than input");

    const bool rg = detail::want_grad(tape, {input});
    auto out = make_tensor({c, oh, ow}, rg);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out->numel());
    for (int ic = 0; ic < c; ++ic) {
        const double* iplane = input->data.data() + static_cast<std::size_t>(ic) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                std::size_t best = static_cast<std::size_t>(oy * window) * w + ox * window;
                double bv = iplane[best];
                for (int dy = 0; dy < window; ++dy)
                    for (int dx = 0; dx < window; ++dx) {
                        const std::size_t pos =
                            static_cast<std::size_t>(oy * window + dy) * w + (ox * window + dx);
                        if (iplane[pos] > bv) {
                            bv = iplane[pos];
                            best = pos;
                        }
                    }
                const std::size_t oidx = (static_cast<std::size_t>(ic) * oh + oy) * ow + ox;
                out->data[oidx] = bv;
                (*argmax)[oidx] = static_cast<std::size_t>(ic) * h * w + best;
            }
        }
    }
    if (rg)
        tape.record([input, out, argmax] {
            if (!has_grad(out) || !input->requires_grad) return;
            input->ensure_grad();
            for (std::size_t i = 0; i < out->numel(); ++i)
                input->grad[(*argmax)[i]] += out->grad[i];
        });
    return out;
}

// Corner-aligned bilinear upsampling of a 2-D map. Exact on constants and
// never exceeds the input extrema.
inline Tensor bilinear_upsample(Tape& tape, const Tensor& input, int out_h, int out_w) {
    if (input->shape.size() != 2) throw std::invalid_argument("bilinear_upsample: expected [H,W]");
    const int h = input->shape[0], w = input->shape[1];
    if (out_h < h || out_w < w)
        throw std::invalid_argument("bilinear_upsample: target smaller than input");

    const double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;

    const bool rg = detail::want_grad(tape, {input});
    auto out = make_tensor({out_h, out_w}, rg);
    for (int y = 0; y < out_h; ++y) {
        const double fy = y * sy;
        int y0 = static_cast<int>(fy);
        if (y0 > h - 1) y0 = h - 1;
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = x * sx;
            int x0 = static_cast<int>(fx);
            if (x0 > w - 1) x0 = w - 1;
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            const double v = (1.0 - wy) * ((1.0 - wx) * input->data[y0 * w + x0] +
                                           wx * input->data[y0 * w + x1]) +
                             wy * ((1.0 - wx) * input->data[y1 * w + x0] +
                                   wx * input->data[y1 * w + x1]);
            out->data[y * out_w + x] = v;
        }
    }
    if (rg)
        tape.record([input, out, sy, sx] {
            if (!has_grad(out) || !input->requires_grad) return;
            input->ensure_grad();
            const int h = input->shape[0], w = input->shape[1];
            const int out_h = out->shape[0], out_w = out->shape[1];
            for (int y = 0; y < out_h; ++y) {
                const double fy = y * sy;
                int y0 = static_cast<int>(fy);
                if (y0 > h - 1) y0 = h - 1;
                const int y1 = std::min(y0 + 1, h - 1);
                const double wy = fy - y0;
                for (int x = 0; x < out_w; ++x) {
                    const double fx = x * sx;
                    int x0 = static_cast<int>(fx);
                    if (x0 > w - 1) x0 = w - 1;
                    const int x1 = std::min(x0 + 1, w - 1);
                    const double wx = fx - x0;
                    const double g = out->grad[y * out_w + x];
                    input->grad[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                    input->grad[y0 * w + x1] += g * (1.0 - wy) * wx;
                    input->grad[y1 * w + x0] += g * wy * (1.0 - wx);
                    input->grad[y1 * w + x1] += g * wy * wx;
                }
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// prototype layer primitives
// ---------------------------------------------------------------------------

// Squared L2 distance between a 1x1xC prototype and every spatial patch of a
// [C,H,W] feature map; channel sums accumulate in ascending channel order.
inline Tensor prototype_distance_map(Tape& tape, const Tensor& features, const Tensor& proto) {
    if (features->shape.size() != 3) throw std::invalid_argument("distance map: expected [C,H,W]");
    const int c = features->shape[0], h = features->shape[1], w = features->shape[2];
    if (proto->shape != std::vector<int>{c})
        throw std::invalid_argument("distance map: prototype has " + shape_str(proto->shape) +
                                    " but feature maps carry " + std::to_string(c) + " channels");
    const bool rg = detail::want_grad(tape, {features, proto});
    auto out = make_tensor({h, w}, rg);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int ic = 0; ic < c; ++ic) {
        const double p = proto->data[ic];
        const double* f = features->data.data() + ic * plane;
        for (std::size_t l = 0; l < plane; ++l) {
            const double d = f[l] - p;
            out->data[l] += d * d;
        }
    }
    if (rg)
        tape.record([features, proto, out] {
            if (!has_grad(out)) return;
            const int c = features->shape[0];
            const std::size_t plane = out->numel();
            if (features->requires_grad) features->ensure_grad();
            if (proto->requires_grad) proto->ensure_grad();
            for (int ic = 0; ic < c; ++ic) {
                const double p = proto->data[ic];
                const double* f = features->data.data() + ic * plane;
                double pg = 0.0;
                for (std::size_t l = 0; l < plane; ++l) {
                    const double g2 = 2.0 * out->grad[l] * (f[l] - p);
                    if (features->requires_grad) features->grad[ic * plane + l] += g2;
                    pg -= g2;
                }
                if (proto->requires_grad) proto->grad[ic] += pg;
            }
        });
    return out;
}

// s = log((d+1)/(d+eps)); positive and strictly decreasing in d for eps<1.
inline Tensor similarity_from_distance(Tape& tape, const Tensor& dist, double eps) {
    if (eps <= 0.0 || eps >= 1.0)
        throw std::invalid_argument("similarity: eps must lie in (0,1)");
    const bool rg = detail::want_grad(tape, {dist});
    auto out = make_tensor(dist->shape, rg);
    for (std::size_t i = 0; i < out->numel(); ++i)
        out->data[i] = std::log((dist->data[i] + 1.0) / (dist->data[i] + eps));
    if (rg)
        tape.record([dist, out, eps] {
            if (!has_grad(out) || !dist->requires_grad) return;
            dist->ensure_grad();
            for (std::size_t i = 0; i < out->numel(); ++i) {
                const double d = dist->data[i];
                dist->grad[i] += out->grad[i] * (1.0 / (d + 1.0) - 1.0 / (d + eps));
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// linear head and classification loss
// ---------------------------------------------------------------------------

// out[r] = sum_t W[r, cols[t]] * x[t], accumulated in ascending t. Explicit
// column selection lets pruned prototypes drop out of the product while the
// per-column contributions stay reproducible for explanation reports.
inline Tensor matvec_cols(Tape& tape, const Tensor& weights, const Tensor& x,
                          const std::vector<int>& cols) {
    if (weights->shape.size() != 2) throw std::invalid_argument("matvec: expected [R,C] weights");
    const int rows = weights->shape[0], wc = weights->shape[1];
    if (x->shape != std::vector<int>{static_cast<int>(cols.size())})
        throw std::invalid_argument("matvec: x length must equal column count");
    for (int cidx : cols)
        if (cidx < 0 || cidx >= wc) throw std::invalid_argument("matvec: column index out of range");
    const bool rg = detail::want_grad(tape, {weights, x});
    auto out = make_tensor({rows}, rg);
    for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t t = 0; t < cols.size(); ++t)
            s += weights->data[static_cast<std::size_t>(r) * wc + cols[t]] * x->data[t];
        out->data[r] = s;
    }
    if (rg)
        tape.record([weights, x, out, cols] {
            if (!has_grad(out)) return;
            const int rows = weights->shape[0], wc = weights->shape[1];
            if (weights->requires_grad) weights->ensure_grad();
            if (x->requires_grad) x->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const double g = out->grad[r];
                for (std::size_t t = 0; t < cols.size(); ++t) {
                    const std::size_t widx = static_cast<std::size_t>(r) * wc + cols[t];
                    if (weights->requires_grad) weights->grad[widx] += g * x->data[t];
                    if (x->requires_grad) x->grad[t] += g * weights->data[widx];
                }
            }
        });
    return out;
}

inline Tensor matvec(Tape& tape, const Tensor& weights, const Tensor& x) {
    std::vector<int> cols(static_cast<std::size_t>(weights->shape[1]));
    for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = static_cast<int>(i);
    return matvec_cols(tape, weights, x, cols);
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double z = 0.0;
    std::vector<double> p(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        z += p[i];
    }
    for (auto& v : p) v /= z;
    return p;
}

// -log softmax(logits)[label], computed with the usual log-sum-exp shift.
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, int label) {
    if (logits->shape.size() != 1) throw std::invalid_argument("cross entropy: expected a vector");
    const int n = logits->shape[0];
    if (label < 0 || label >= n) throw std::invalid_argument("cross entropy: label out of range");
    double m = logits->data[0];
    for (double v : logits->data) m = std::max(m, v);
    double z = 0.0;
    for (double v : logits->data) z += std::exp(v - m);
    const double lse = m + std::log(z);
    const bool rg = detail::want_grad(tape, {logits});
    auto out = make_tensor({1}, {lse - logits->data[label]}, rg);
    if (rg)
        tape.record([logits, out, label, m, z] {
            if (!has_grad(out) || !logits->requires_grad) return;
            logits->ensure_grad();
            const double g = out->grad[0];
            for (std::size_t i = 0; i < logits->numel(); ++i) {
                const double p = std::exp(logits->data[i] - m) / z;
                logits->grad[i] += g * (p - (static_cast<int>(i) == label ? 1.0 : 0.0));
            }
        });
    return out;
}

}  // namespace protocase::ad
