#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "contnet/errors.hpp"
#include "contnet/tensor.hpp"

namespace contnet {

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation, the deep-learning convention).
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dParams {
    Tensor<T> weight;  // [C_out, C_in/groups, k, k]
    std::optional<Tensor<T>> bias;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    std::int64_t groups = 1;

    std::int64_t out_channels() const { return weight.shape()[0]; }
    std::int64_t in_channels() const { return weight.shape()[1] * groups; }
    std::int64_t kernel() const { return weight.shape()[2]; }

    void validate() const {
        if (weight.rank() != 4 || weight.shape()[2] != weight.shape()[3]) {
            throw ShapeError("conv2d: weight must be [C_out, C_in/g, k, k], got " +
                             shape_str(weight.shape()));
        }
        if (kernel() % 2 == 0) {
            throw ValueError("conv2d: kernel size must be odd, got " + std::to_string(kernel()));
        }
        if (groups < 1 || out_channels() % groups != 0) {
            throw ValueError("conv2d: groups " + std::to_string(groups) +
                             " must divide C_out " + std::to_string(out_channels()));
        }
        if (stride < 1 || padding < 0) throw ValueError("conv2d: bad stride/padding");
    }
};

namespace detail {

// Unpacks one sample's group slice into a [Cg*k*k, Hout*Wout] matrix.
template <typename T>
void im2col(const T* x, std::int64_t cg, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t hout, std::int64_t wout, T* col) {
    const std::int64_t ncols = hout * wout;
    for (std::int64_t c = 0; c < cg; ++c) {
        for (std::int64_t ki = 0; ki < k; ++ki) {
            for (std::int64_t kj = 0; kj < k; ++kj) {
                T* dst = col + ((c * k + ki) * k + kj) * ncols;
                for (std::int64_t oy = 0; oy < hout; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) {
                        for (std::int64_t ox = 0; ox < wout; ++ox) dst[oy * wout + ox] = T(0);
                        continue;
                    }
                    const T* src = x + (c * h + iy) * w;
                    for (std::int64_t ox = 0; ox < wout; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kj;
                        dst[oy * wout + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const T* col, std::int64_t cg, std::int64_t h, std::int64_t w, std::int64_t k,
                std::int64_t stride, std::int64_t pad, std::int64_t hout, std::int64_t wout, T* x) {
    const std::int64_t ncols = hout * wout;
    for (std::int64_t c = 0; c < cg; ++c) {
        for (std::int64_t ki = 0; ki < k; ++ki) {
            for (std::int64_t kj = 0; kj < k; ++kj) {
                const T* src = col + ((c * k + ki) * k + kj) * ncols;
                for (std::int64_t oy = 0; oy < hout; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = x + (c * h + iy) * w;
                    for (std::int64_t ox = 0; ox < wout; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < w) dst[ix] += src[oy * wout + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& p) {
    p.validate();
    if (x.rank() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_str(x.shape()));
    const std::int64_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (cin != p.in_channels()) {
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                         std::to_string(p.in_channels()));
    }
    if (cin % p.groups != 0) {
        throw ValueError("conv2d: groups " + std::to_string(p.groups) + " must divide C_in " +
                         std::to_string(cin));
    }
    const std::int64_t k = p.kernel(), stride = p.stride, pad = p.padding, g = p.groups;
    const std::int64_t cout = p.out_channels();
    const std::int64_t hout = (h + 2 * pad - k) / stride + 1;
    const std::int64_t wout = (w + 2 * pad - k) / stride + 1;
    if (hout < 1 || wout < 1) {
        throw ShapeError("conv2d: kernel " + std::to_string(k) + " does not fit input " +
                         shape_str(x.shape()) + " with padding " + std::to_string(pad));
    }
    const std::int64_t cing = cin / g, coutg = cout / g;
    const std::int64_t ckk = cing * k * k;
    const std::int64_t ncols = hout * wout;

    std::vector<T> out(static_cast<std::size_t>(n * cout * ncols), T(0));
    std::vector<T> col(static_cast<std::size_t>(ckk * ncols));
    const T* px = x.values().data();
    const T* pw = p.weight.values().data();
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t gi = 0; gi < g; ++gi) {
            detail::im2col(px + (i * cin + gi * cing) * h * w, cing, h, w, k, stride, pad, hout,
                           wout, col.data());
            detail::gemm_acc(pw + gi * coutg * ckk, col.data(),
                             out.data() + (i * cout + gi * coutg) * ncols, coutg, ncols, ckk);
        }
    }
    if (p.bias) {
        const T* pb = p.bias->values().data();
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t c = 0; c < cout; ++c) {
                T* dst = out.data() + (i * cout + c) * ncols;
                for (std::int64_t j = 0; j < ncols; ++j) dst[j] += pb[c];
            }
    }

    std::vector<Tensor<T>> inputs = {x, p.weight};
    if (p.bias) inputs.push_back(*p.bias);
    auto x_node = x.node();
    auto w_node = p.weight.node();
    auto b_node = p.bias ? p.bias->node() : nullptr;
    return detail::make_op<T>(
        {n, cout, hout, wout}, std::move(out), std::move(inputs),
        [x_node, w_node, b_node, n, cin, cout, h, w, k, stride, pad, g, cing, coutg, ckk, ncols,
         hout, wout](Node<T>& self) {
            const T* gout = self.grad.data();
            std::vector<T> col(static_cast<std::size_t>(ckk * ncols));
            std::vector<T> dcol(static_cast<std::size_t>(ckk * ncols));
            const bool need_x = x_node->requires_grad;
            const bool need_w = w_node->requires_grad;
            if (need_x) x_node->ensure_grad();
            if (need_w) w_node->ensure_grad();
            if (need_x || need_w) {
                for (std::int64_t i = 0; i < n; ++i) {
                    for (std::int64_t gi = 0; gi < g; ++gi) {
                        const T* gslice = gout + (i * cout + gi * coutg) * ncols;
                        if (need_w) {
                            detail::im2col(x_node->values.data() + (i * cin + gi * cing) * h * w,
                                           cing, h, w, k, stride, pad, hout, wout, col.data());
                            // dW = G * col^T
                            detail::gemm_acc(gslice, col.data(),
                                             w_node->grad.data() + gi * coutg * ckk, coutg, ckk,
                                             ncols, false, true);
                        }
                        if (need_x) {
                            std::fill(dcol.begin(), dcol.end(), T(0));
                            // dcol = W^T * G
                            detail::gemm_acc(w_node->values.data() + gi * coutg * ckk, gslice,
                                             dcol.data(), ckk, ncols, coutg, true, false);
                            detail::col2im_acc(dcol.data(), cing, h, w, k, stride, pad, hout, wout,
                                               x_node->grad.data() + (i * cin + gi * cing) * h * w);
                        }
                    }
                }
            }
            if (b_node && b_node->requires_grad) {
                b_node->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t c = 0; c < cout; ++c) {
                        const T* src = gout + (i * cout + c) * ncols;
                        T acc = T(0);
                        for (std::int64_t j = 0; j < ncols; ++j) acc += src[j];
                        b_node->grad[static_cast<std::size_t>(c)] += acc;
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// Pooling.
// ---------------------------------------------------------------------------

enum class PoolKind { Max, Avg };

template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, std::int64_t k, std::int64_t stride,
                 std::int64_t padding) {
    if (x.rank() != 4) throw ShapeError("pool2d: input must be NCHW, got " + shape_str(x.shape()));
    const std::int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (k > h + 2 * padding || k > w + 2 * padding) {
        throw ShapeError("pool2d: window " + std::to_string(k) + " larger than padded input " +
                         shape_str(x.shape()));
    }
    const std::int64_t hout = (h + 2 * padding - k) / stride + 1;
    const std::int64_t wout = (w + 2 * padding - k) / stride + 1;
    std::vector<T> out(static_cast<std::size_t>(n * c * hout * wout));
    std::vector<std::int64_t> argmax;
    if (kind == PoolKind::Max) argmax.resize(out.size());
    const T* px = x.values().data();
    const T inv_k2 = T(1) / static_cast<T>(k * k);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* plane = px + (i * c + ch) * h * w;
            for (std::int64_t oy = 0; oy < hout; ++oy) {
                for (std::int64_t ox = 0; ox < wout; ++ox) {
                    const std::int64_t oidx = ((i * c + ch) * hout + oy) * wout + ox;
                    if (kind == PoolKind::Max) {
                        T best = -std::numeric_limits<T>::infinity();
                        std::int64_t best_idx = -1;
                        for (std::int64_t ki = 0; ki < k; ++ki) {
                            const std::int64_t iy = oy * stride - padding + ki;
                            if (iy < 0 || iy >= h) continue;
                            for (std::int64_t kj = 0; kj < k; ++kj) {
                                const std::int64_t ix = ox * stride - padding + kj;
                                if (ix < 0 || ix >= w) continue;
                                const T v = plane[iy * w + ix];
                                // strictly greater keeps the first maximal index
                                if (v > best) {
                                    best = v;
                                    best_idx = iy * w + ix;
                                }
                            }
                        }
                        out[static_cast<std::size_t>(oidx)] = best;
                        argmax[static_cast<std::size_t>(oidx)] = best_idx;
                    } else {
                        T acc = T(0);
                        for (std::int64_t ki = 0; ki < k; ++ki) {
                            const std::int64_t iy = oy * stride - padding + ki;
                            if (iy < 0 || iy >= h) continue;
                            for (std::int64_t kj = 0; kj < k; ++kj) {
                                const std::int64_t ix = ox * stride - padding + kj;
                                if (ix < 0 || ix >= w) continue;
                                acc += plane[iy * w + ix];
                            }
                        }
                        out[static_cast<std::size_t>(oidx)] = acc * inv_k2;
                    }
                }
            }
        }
    }
    auto x_node = x.node();
    return detail::make_op<T>(
        {n, c, hout, wout}, std::move(out), {x},
        [x_node, kind, argmax = std::move(argmax), n, c, h, w, hout, wout, k, stride, padding,
         inv_k2](Node<T>& self) {
            if (!x_node->requires_grad) return;
            x_node->ensure_grad();
            const T* g = self.grad.data();
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    T* gplane = x_node->grad.data() + (i * c + ch) * h * w;
                    for (std::int64_t oy = 0; oy < hout; ++oy) {
                        for (std::int64_t ox = 0; ox < wout; ++ox) {
                            const std::int64_t oidx = ((i * c + ch) * hout + oy) * wout + ox;
                            if (kind == PoolKind::Max) {
                                const std::int64_t a = argmax[static_cast<std::size_t>(oidx)];
                                if (a >= 0) gplane[a] += g[oidx];
                            } else {
                                for (std::int64_t ki = 0; ki < k; ++ki) {
                                    const std::int64_t iy = oy * stride - padding + ki;
                                    if (iy < 0 || iy >= h) continue;
                                    for (std::int64_t kj = 0; kj < k; ++kj) {
                                        const std::int64_t ix = ox * stride - padding + kj;
                                        if (ix < 0 || ix >= w) continue;
                                        gplane[iy * w + ix] += g[oidx] * inv_k2;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 4) {
        throw ShapeError("global_avg_pool: input must be NCHW, got " + shape_str(x.shape()));
    }
    const std::int64_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    std::vector<T> out(static_cast<std::size_t>(n * c));
    const T* px = x.values().data();
    for (std::int64_t i = 0; i < n * c; ++i) {
        T acc = T(0);
        const T* src = px + i * hw;
        for (std::int64_t j = 0; j < hw; ++j) acc += src[j];
        out[static_cast<std::size_t>(i)] = acc / static_cast<T>(hw);
    }
    auto x_node = x.node();
    return detail::make_op<T>({n, c}, std::move(out), {x}, [x_node, n, c, hw](Node<T>& self) {
        if (!x_node->requires_grad) return;
        x_node->ensure_grad();
        const T inv = T(1) / static_cast<T>(hw);
        for (std::int64_t i = 0; i < n * c; ++i) {
            const T g = self.grad[static_cast<std::size_t>(i)] * inv;
            T* dst = x_node->grad.data() + i * hw;
            for (std::int64_t j = 0; j < hw; ++j) dst[j] += g;
        }
    });
}

// ---------------------------------------------------------------------------
// Batch normalization.
// ---------------------------------------------------------------------------

enum class NormMode { Train, Infer };

template <typename T>
struct BatchNormState {
    Tensor<T> gain;  // [C]
    Tensor<T> bias;  // [C]
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    static BatchNormState make(std::int64_t channels) {
        BatchNormState s;
        s.gain = Tensor<T>::filled({channels}, T(1));
        s.bias = Tensor<T>::zeros({channels});
        s.running_mean.assign(static_cast<std::size_t>(channels), T(0));
        s.running_var.assign(static_cast<std::size_t>(channels), T(1));
        return s;
    }

    std::int64_t channels() const { return gain.numel(); }
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormState<T>& s, NormMode mode) {
    if (x.rank() != 4) throw ShapeError("batch_norm: input must be NCHW, got " + shape_str(x.shape()));
    const std::int64_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (c != s.channels()) {
        throw ShapeError("batch_norm: channel mismatch " + std::to_string(c) + " vs state " +
                         std::to_string(s.channels()));
    }
    const std::int64_t m = n * hw;  // samples per channel
    const T* px = x.values().data();
    const T* pg = s.gain.values().data();
    const T* pb = s.bias.values().data();
    std::vector<T> out(x.values().size());
    std::vector<T> mean_c, inv_std_c;

    if (mode == NormMode::Train) {
        if (m < 2) {
            throw ValueError("batch_norm: train mode needs N*H*W >= 2 per channel, got " +
                             std::to_string(m));
        }
        mean_c.resize(static_cast<std::size_t>(c));
        inv_std_c.resize(static_cast<std::size_t>(c));
        for (std::int64_t ch = 0; ch < c; ++ch) {
            T mu = T(0);
            for (std::int64_t i = 0; i < n; ++i) {
                const T* src = px + (i * c + ch) * hw;
                for (std::int64_t j = 0; j < hw; ++j) mu += src[j];
            }
            mu /= static_cast<T>(m);
            T var = T(0);
            for (std::int64_t i = 0; i < n; ++i) {
                const T* src = px + (i * c + ch) * hw;
                for (std::int64_t j = 0; j < hw; ++j) {
                    const T d = src[j] - mu;
                    var += d * d;
                }
            }
            var /= static_cast<T>(m);
            mean_c[static_cast<std::size_t>(ch)] = mu;
            inv_std_c[static_cast<std::size_t>(ch)] = T(1) / std::sqrt(var + s.eps);
            s.running_mean[static_cast<std::size_t>(ch)] =
                (T(1) - s.momentum) * s.running_mean[static_cast<std::size_t>(ch)] + s.momentum * mu;
            s.running_var[static_cast<std::size_t>(ch)] =
                (T(1) - s.momentum) * s.running_var[static_cast<std::size_t>(ch)] + s.momentum * var;
        }
    } else {
        mean_c.assign(s.running_mean.begin(), s.running_mean.end());
        inv_std_c.resize(static_cast<std::size_t>(c));
        for (std::int64_t ch = 0; ch < c; ++ch) {
            inv_std_c[static_cast<std::size_t>(ch)] =
                T(1) / std::sqrt(s.running_var[static_cast<std::size_t>(ch)] + s.eps);
        }
    }

    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T mu = mean_c[static_cast<std::size_t>(ch)];
            const T is = inv_std_c[static_cast<std::size_t>(ch)];
            const T gch = pg[ch], bch = pb[ch];
            const T* src = px + (i * c + ch) * hw;
            T* dst = out.data() + (i * c + ch) * hw;
            for (std::int64_t j = 0; j < hw; ++j) dst[j] = (src[j] - mu) * is * gch + bch;
        }
    }

    auto x_node = x.node();
    auto g_node = s.gain.node();
    auto b_node = s.bias.node();
    return detail::make_op<T>(
        x.shape(), std::move(out), {x, s.gain, s.bias},
        [x_node, g_node, b_node, mode, n, c, hw, m, mean_c = std::move(mean_c),
         inv_std_c = std::move(inv_std_c)](Node<T>& self) {
            const T* g = self.grad.data();
            const T* px = x_node->values.data();
            // per-channel reductions of the incoming gradient
            std::vector<T> sum_g(static_cast<std::size_t>(c), T(0));
            std::vector<T> sum_gxh(static_cast<std::size_t>(c), T(0));
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const T mu = mean_c[static_cast<std::size_t>(ch)];
                    const T is = inv_std_c[static_cast<std::size_t>(ch)];
                    const T* gs = g + (i * c + ch) * hw;
                    const T* xs = px + (i * c + ch) * hw;
                    T a = T(0), b = T(0);
                    for (std::int64_t j = 0; j < hw; ++j) {
                        a += gs[j];
                        b += gs[j] * (xs[j] - mu) * is;
                    }
                    sum_g[static_cast<std::size_t>(ch)] += a;
                    sum_gxh[static_cast<std::size_t>(ch)] += b;
                }
            }
            if (g_node->requires_grad) {
                g_node->ensure_grad();
                for (std::int64_t ch = 0; ch < c; ++ch)
                    g_node->grad[static_cast<std::size_t>(ch)] += sum_gxh[static_cast<std::size_t>(ch)];
            }
            if (b_node->requires_grad) {
                b_node->ensure_grad();
                for (std::int64_t ch = 0; ch < c; ++ch)
                    b_node->grad[static_cast<std::size_t>(ch)] += sum_g[static_cast<std::size_t>(ch)];
            }
            if (x_node->requires_grad) {
                x_node->ensure_grad();
                const T* pg = g_node->values.data();
                for (std::int64_t i = 0; i < n; ++i) {
                    for (std::int64_t ch = 0; ch < c; ++ch) {
                        const T mu = mean_c[static_cast<std::size_t>(ch)];
                        const T is = inv_std_c[static_cast<std::size_t>(ch)];
                        const T gch = pg[ch];
                        const T* gs = g + (i * c + ch) * hw;
                        const T* xs = px + (i * c + ch) * hw;
                        T* dst = x_node->grad.data() + (i * c + ch) * hw;
                        if (mode == NormMode::Train) {
                            const T mg = sum_g[static_cast<std::size_t>(ch)] / static_cast<T>(m);
                            const T mgxh = sum_gxh[static_cast<std::size_t>(ch)] / static_cast<T>(m);
                            for (std::int64_t j = 0; j < hw; ++j) {
                                const T xh = (xs[j] - mu) * is;
                                dst[j] += gch * is * (gs[j] - mg - xh * mgxh);
                            }
                        } else {
                            for (std::int64_t j = 0; j < hw; ++j) dst[j] += gch * is * gs[j];
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Affine map over the last axis: y = x W + b.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const std::optional<Tensor<T>>& bias = std::nullopt) {
    if (weight.rank() != 2) {
        throw ShapeError("linear: weight must be [C_in, C_out], got " + shape_str(weight.shape()));
    }
    if (x.shape().back() != weight.shape()[0]) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    // flatten leading axes, multiply, restore
    Shape lead(x.shape().begin(), x.shape().end() - 1);
    const std::int64_t rows = numel_of(lead);
    auto flat = reshape(x, {rows, x.shape().back()});
    auto y = matmul(flat, weight);
    if (bias) y = add(y, *bias);
    lead.push_back(weight.shape()[1]);
    return reshape(y, std::move(lead));
}

}  // namespace contnet
