#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "contnet/errors.hpp"
#include "contnet/nn_ops.hpp"
#include "contnet/patching.hpp"
#include "contnet/tensor.hpp"

namespace contnet {

// Weights of one Standard Transformer Encoder layer: multi-head self
// attention and a two-layer FFN, both with post-norm residuals.
template <typename T>
struct STEParams {
    Tensor<T> w_q, w_k, w_v;  // [C, D], sliced per head into [C, D_h] columns
    std::optional<Tensor<T>> b_q, b_k, b_v;
    Tensor<T> w_mhsa;  // [D, C]
    std::optional<Tensor<T>> b_mhsa;
    Tensor<T> w1;  // [C, D_ffn]
    std::optional<Tensor<T>> b1;
    Tensor<T> w2;  // [D_ffn, C]
    std::optional<Tensor<T>> b2;
    Tensor<T> ln1_gain, ln1_bias;  // [C]
    Tensor<T> ln2_gain, ln2_bias;  // [C]
    std::int64_t heads = 1;
    bool ffn_activation = true;  // ReLU between W1 and W2; false keeps the literal linear form
    PositionalEncoding<T> pe;

    std::int64_t channels() const { return w_q.shape()[0]; }
    std::int64_t embed_dim() const { return w_q.shape()[1]; }
    std::int64_t ffn_dim() const { return w1.shape()[1]; }
    std::int64_t head_dim() const { return embed_dim() / heads; }

    void validate() const {
        if (heads < 1 || embed_dim() % heads != 0) {
            throw ValueError("ste: embed dim " + std::to_string(embed_dim()) +
                             " not divisible by heads " + std::to_string(heads));
        }
        const std::int64_t c = channels(), d = embed_dim();
        if (w_k.shape() != Shape{c, d} || w_v.shape() != Shape{c, d} ||
            w_mhsa.shape() != Shape{d, c} || w1.shape()[0] != c || w2.shape()[1] != c ||
            w2.shape()[0] != ffn_dim()) {
            throw ShapeError("ste: inconsistent projection shapes");
        }
    }

    // Zero-weight layer used by tests; real models initialize through the
    // network builder.
    static STEParams make_zero(std::int64_t c, std::int64_t d, std::int64_t d_ffn,
                               std::int64_t heads, bool biases = true) {
        STEParams p;
        p.w_q = Tensor<T>::zeros({c, d});
        p.w_k = Tensor<T>::zeros({c, d});
        p.w_v = Tensor<T>::zeros({c, d});
        p.w_mhsa = Tensor<T>::zeros({d, c});
        p.w1 = Tensor<T>::zeros({c, d_ffn});
        p.w2 = Tensor<T>::zeros({d_ffn, c});
        if (biases) {
            p.b_q = Tensor<T>::zeros({d});
            p.b_k = Tensor<T>::zeros({d});
            p.b_v = Tensor<T>::zeros({d});
            p.b_mhsa = Tensor<T>::zeros({c});
            p.b1 = Tensor<T>::zeros({d_ffn});
            p.b2 = Tensor<T>::zeros({c});
        }
        p.ln1_gain = Tensor<T>::filled({c}, T(1));
        p.ln1_bias = Tensor<T>::zeros({c});
        p.ln2_gain = Tensor<T>::filled({c}, T(1));
        p.ln2_bias = Tensor<T>::zeros({c});
        p.heads = heads;
        return p;
    }
};

// Optional capture of the per-head attention matrices of one mhsa() call.
template <typename T>
struct AttentionTrace {
    std::vector<Tensor<T>> heads;  // each [..., L, L], rows sum to 1
};

// logits[.., i, j] = sum_d q[.., i, d] * table[clip(j - i) + L - 1, d]
template <typename T>
Tensor<T> relative_logits(const Tensor<T>& q, const Tensor<T>& table) {
    if (q.rank() < 2 || table.rank() != 2) {
        throw ShapeError("relative_logits: expected q [..,L,Dh] and table [2L-1,Dh]");
    }
    const std::int64_t l = q.shape()[static_cast<std::size_t>(q.rank() - 2)];
    const std::int64_t dh = q.shape().back();
    if (table.shape()[1] != dh) {
        throw ShapeError("relative_logits: head dim mismatch " + shape_str(q.shape()) + " vs " +
                         shape_str(table.shape()));
    }
    const std::int64_t span = table.shape()[0];
    const std::int64_t batch = q.numel() / (l * dh);
    Shape out_shape(q.shape().begin(), q.shape().end() - 1);
    out_shape.push_back(l);
    std::vector<T> out(static_cast<std::size_t>(batch * l * l));
    const T* pq = q.values().data();
    const T* pt = table.values().data();
    auto offset_index = [span, l](std::int64_t i, std::int64_t j) {
        std::int64_t idx = j - i + l - 1;
        if (idx < 0) idx = 0;
        if (idx >= span) idx = span - 1;
        return idx;
    };
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t i = 0; i < l; ++i) {
            const T* qrow = pq + (b * l + i) * dh;
            for (std::int64_t j = 0; j < l; ++j) {
                const T* trow = pt + offset_index(i, j) * dh;
                T acc = T(0);
                for (std::int64_t d = 0; d < dh; ++d) acc += qrow[d] * trow[d];
                out[static_cast<std::size_t>((b * l + i) * l + j)] = acc;
            }
        }
    auto q_node = q.node();
    auto t_node = table.node();
    return detail::make_op<T>(
        std::move(out_shape), std::move(out), {q, table},
        [q_node, t_node, batch, l, dh, offset_index](Node<T>& self) {
            const T* g = self.grad.data();
            if (q_node->requires_grad) q_node->ensure_grad();
            if (t_node->requires_grad) t_node->ensure_grad();
            for (std::int64_t b = 0; b < batch; ++b)
                for (std::int64_t i = 0; i < l; ++i)
                    for (std::int64_t j = 0; j < l; ++j) {
                        const T gv = g[(b * l + i) * l + j];
                        const std::int64_t t_off = offset_index(i, j) * dh;
                        const std::int64_t q_off = (b * l + i) * dh;
                        if (q_node->requires_grad)
                            for (std::int64_t d = 0; d < dh; ++d)
                                q_node->grad[static_cast<std::size_t>(q_off + d)] +=
                                    gv * t_node->values[static_cast<std::size_t>(t_off + d)];
                        if (t_node->requires_grad)
                            for (std::int64_t d = 0; d < dh; ++d)
                                t_node->grad[static_cast<std::size_t>(t_off + d)] +=
                                    gv * q_node->values[static_cast<std::size_t>(q_off + d)];
                    }
        });
}

// softmax((x Wq)(x Wk)^T / sqrt(D_h) + rel)(x Wv) over the last two axes;
// accepts [L, C] or any leading batch.
template <typename T>
Tensor<T> single_head_attention(const Tensor<T>& x, const Tensor<T>& w_q, const Tensor<T>& w_k,
                                const Tensor<T>& w_v,
                                const std::optional<Tensor<T>>& rel = std::nullopt,
                                Tensor<T>* attention_out = nullptr) {
    auto q = linear<T>(x, w_q);
    auto k = linear<T>(x, w_k);
    auto v = linear<T>(x, w_v);
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(w_q.shape()[1]));
    auto logits = scale(matmul(q, transpose_last2(k)), inv_sqrt_dh);
    if (rel) logits = add(logits, relative_logits(q, *rel));
    auto attn = softmax(logits, logits.rank() - 1);
    if (attention_out) *attention_out = attn;
    return matmul(attn, v);
}

// Concatenated head outputs projected back to C, residual added, post-norm.
template <typename T>
Tensor<T> mhsa(const Tensor<T>& x, const STEParams<T>& p, AttentionTrace<T>* trace = nullptr) {
    p.validate();
    if (x.shape().back() != p.channels()) {
        throw ShapeError("mhsa: input " + shape_str(x.shape()) + " does not match C=" +
                         std::to_string(p.channels()));
    }
    const std::int64_t dh = p.head_dim();
    auto q_full = linear(x, p.w_q, p.b_q);
    auto k_full = linear(x, p.w_k, p.b_k);
    auto v_full = linear(x, p.w_v, p.b_v);
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Tensor<T>> head_values;
    head_values.reserve(static_cast<std::size_t>(p.heads));
    for (std::int64_t h = 0; h < p.heads; ++h) {
        auto q = slice_last(q_full, h * dh, dh);
        auto k = slice_last(k_full, h * dh, dh);
        auto v = slice_last(v_full, h * dh, dh);
        auto logits = scale(matmul(q, transpose_last2(k)), inv_sqrt_dh);
        if (p.pe.kind == PeKind::Relative) {
            logits = add(logits, relative_logits(q, p.pe.rel[static_cast<std::size_t>(h)]));
        }
        auto attn = softmax(logits, logits.rank() - 1);
        if (trace) trace->heads.push_back(attn);
        head_values.push_back(matmul(attn, v));
    }
    auto concat = p.heads == 1 ? head_values[0] : concat_last(head_values);
    auto projected = linear(concat, p.w_mhsa, p.b_mhsa);
    return layer_norm(add(projected, x), p.ln1_gain, p.ln1_bias);
}

// LN(W2 act(W1 x) + x); act is ReLU unless the literal linear form is kept.
template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const STEParams<T>& p) {
    auto hidden = linear(x, p.w1, p.b1);
    if (p.ffn_activation) hidden = relu(hidden);
    auto out = linear(hidden, p.w2, p.b2);
    return layer_norm(add(out, x), p.ln2_gain, p.ln2_bias);
}

// STE(x) = FFN(MHSA(x + PE)); patch-wise table kinds are added here, the
// relative kind contributes inside the attention logits.
template <typename T>
Tensor<T> ste_forward(const Tensor<T>& seq, const STEParams<T>& p,
                      AttentionTrace<T>* trace = nullptr) {
    Tensor<T> x = seq;
    if (p.pe.placement == PePlacement::PatchWise &&
        (p.pe.kind == PeKind::Learnable1d || p.pe.kind == PeKind::Learnable2d)) {
        Tensor<T> table =
            p.pe.kind == PeKind::Learnable1d ? p.pe.table : pe_table_2d(p.pe.row, p.pe.col);
        const std::int64_t l = seq.shape()[static_cast<std::size_t>(seq.rank() - 2)];
        if (table.shape() != Shape{l, seq.shape().back()}) {
            throw ShapeError("ste_forward: positional table " + shape_str(table.shape()) +
                             " does not match sequence " + shape_str(seq.shape()));
        }
        x = add(x, table);
    }
    return ffn(mhsa(x, p, trace), p);
}

// Runs one weight-shared STE on every P x P patch of the map: split, encode,
// transform, merge. Output spatial size equals input spatial size.
template <typename T>
Tensor<T> apply_ste_patchwise(const Tensor<T>& x, const STEParams<T>& p, std::int64_t patch) {
    const std::int64_t h = x.shape()[2], w = x.shape()[3];
    Tensor<T> pre = x;
    if (p.pe.placement == PePlacement::ImageWise && p.pe.kind != PeKind::None) {
        if (p.pe.kind != PeKind::Learnable2d) {
            throw ValueError("apply_ste_patchwise: image-wise placement requires the 2d kind");
        }
        pre = add_image_pe(x, p.pe.row, p.pe.col);
    }
    auto grid = split_patches(pre, patch);
    const auto& gs = grid.grid.shape();
    const std::int64_t batch = gs[0] * gs[1] * gs[2], l = gs[3], c = gs[4];
    auto seqs = reshape(grid.grid, {batch, l, c});
    auto transformed = ste_forward(seqs, p);
    PatchGrid<T> out_grid = grid;
    out_grid.grid = reshape(transformed, gs);
    auto merged = merge_patches(out_grid);
    if (merged.shape()[2] != h || merged.shape()[3] != w) {
        throw ContractError("apply_ste_patchwise: spatial size changed");
    }
    return merged;
}

}  // namespace contnet
