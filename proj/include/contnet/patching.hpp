#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "contnet/errors.hpp"
#include "contnet/tensor.hpp"

namespace contnet {

// Patch sizes clamp to the feature map so the whole-map patch is the limit,
// e.g. a requested 14 on a 7x7 map runs as 7.
inline std::int64_t effective_patch(std::int64_t requested, std::int64_t h, std::int64_t w) {
    return std::min(requested, std::min(h, w));
}

// View of an NCHW map as an Hp x Wp grid of flattened P^2-pixel sequences.
// grid has shape [N, Hp, Wp, P^2, C]; pixels are row-major within a patch.
template <typename T>
struct PatchGrid {
    Tensor<T> grid;
    std::int64_t patch = 0;
    std::int64_t origin_h = 0;
    std::int64_t origin_w = 0;

    std::int64_t rows() const { return grid.shape()[1]; }
    std::int64_t cols() const { return grid.shape()[2]; }
    std::int64_t channels() const { return grid.shape()[4]; }
};

template <typename T>
PatchGrid<T> split_patches(const Tensor<T>& x, std::int64_t requested_patch) {
    if (x.rank() != 4) {
        throw ShapeError("split_patches: input must be NCHW, got " + shape_str(x.shape()));
    }
    const std::int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const std::int64_t p = effective_patch(requested_patch, h, w);
    if (p < 1 || h % p != 0 || w % p != 0) {
        throw ShapeError("split_patches: patch " + std::to_string(requested_patch) +
                         " (effective " + std::to_string(p) + ") does not divide map " +
                         std::to_string(h) + "x" + std::to_string(w));
    }
    const std::int64_t hp = h / p, wp = w / p, l = p * p;
    std::vector<T> out(x.values().size());
    const T* src = x.values().data();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t r = 0; r < hp; ++r)
            for (std::int64_t q = 0; q < wp; ++q)
                for (std::int64_t pi = 0; pi < p; ++pi)
                    for (std::int64_t pj = 0; pj < p; ++pj) {
                        const std::int64_t seq = pi * p + pj;
                        const std::int64_t iy = r * p + pi, ix = q * p + pj;
                        T* dst = out.data() + ((((i * hp + r) * wp + q) * l + seq) * c);
                        for (std::int64_t ch = 0; ch < c; ++ch)
                            dst[ch] = src[((i * c + ch) * h + iy) * w + ix];
                    }
    auto x_node = x.node();
    PatchGrid<T> g;
    g.patch = p;
    g.origin_h = h;
    g.origin_w = w;
    g.grid = detail::make_op<T>({n, hp, wp, l, c}, std::move(out), {x},
                                [x_node, n, c, h, w, hp, wp, p, l](Node<T>& self) {
                                    if (!x_node->requires_grad) return;
                                    x_node->ensure_grad();
                                    for (std::int64_t i = 0; i < n; ++i)
                                        for (std::int64_t r = 0; r < hp; ++r)
                                            for (std::int64_t q = 0; q < wp; ++q)
                                                for (std::int64_t pi = 0; pi < p; ++pi)
                                                    for (std::int64_t pj = 0; pj < p; ++pj) {
                                                        const std::int64_t seq = pi * p + pj;
                                                        const std::int64_t iy = r * p + pi, ix = q * p + pj;
                                                        const T* gs = self.grad.data() +
                                                                      ((((i * hp + r) * wp + q) * l + seq) * c);
                                                        for (std::int64_t ch = 0; ch < c; ++ch)
                                                            x_node->grad[static_cast<std::size_t>(
                                                                ((i * c + ch) * h + iy) * w + ix)] += gs[ch];
                                                    }
                                });
    return g;
}

template <typename T>
Tensor<T> merge_patches(const PatchGrid<T>& g) {
    const auto& s = g.grid.shape();
    if (s.size() != 5) throw ShapeError("merge_patches: malformed grid " + shape_str(s));
    const std::int64_t n = s[0], hp = s[1], wp = s[2], l = s[3], c = s[4];
    const std::int64_t p = g.patch;
    if (l != p * p || hp * p != g.origin_h || wp * p != g.origin_w) {
        throw ShapeError("merge_patches: grid " + shape_str(s) + " inconsistent with patch " +
                         std::to_string(p));
    }
    const std::int64_t h = g.origin_h, w = g.origin_w;
    std::vector<T> out(g.grid.values().size());
    const T* src = g.grid.values().data();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t r = 0; r < hp; ++r)
            for (std::int64_t q = 0; q < wp; ++q)
                for (std::int64_t pi = 0; pi < p; ++pi)
                    for (std::int64_t pj = 0; pj < p; ++pj) {
                        const std::int64_t seq = pi * p + pj;
                        const std::int64_t iy = r * p + pi, ix = q * p + pj;
                        const T* gs = src + ((((i * hp + r) * wp + q) * l + seq) * c);
                        for (std::int64_t ch = 0; ch < c; ++ch)
                            out[static_cast<std::size_t>(((i * c + ch) * h + iy) * w + ix)] = gs[ch];
                    }
    auto g_node = g.grid.node();
    return detail::make_op<T>({n, c, h, w}, std::move(out), {g.grid},
                              [g_node, n, c, h, w, hp, wp, p, l](Node<T>& self) {
                                  if (!g_node->requires_grad) return;
                                  g_node->ensure_grad();
                                  for (std::int64_t i = 0; i < n; ++i)
                                      for (std::int64_t r = 0; r < hp; ++r)
                                          for (std::int64_t q = 0; q < wp; ++q)
                                              for (std::int64_t pi = 0; pi < p; ++pi)
                                                  for (std::int64_t pj = 0; pj < p; ++pj) {
                                                      const std::int64_t seq = pi * p + pj;
                                                      const std::int64_t iy = r * p + pi, ix = q * p + pj;
                                                      T* dst = g_node->grad.data() +
                                                               ((((i * hp + r) * wp + q) * l + seq) * c);
                                                      for (std::int64_t ch = 0; ch < c; ++ch)
                                                          dst[ch] += self.grad[static_cast<std::size_t>(
                                                              ((i * c + ch) * h + iy) * w + ix)];
                                                  }
                              });
}

// ---------------------------------------------------------------------------
// Positional encodings (the schemes under ablation).
// ---------------------------------------------------------------------------

enum class PeKind { None, Learnable1d, Learnable2d, Relative };
enum class PePlacement { PatchWise, ImageWise };

inline const char* to_string(PeKind k) {
    switch (k) {
        case PeKind::None: return "none";
        case PeKind::Learnable1d: return "1d";
        case PeKind::Learnable2d: return "2d";
        case PeKind::Relative: return "relative";
    }
    return "?";
}

inline const char* to_string(PePlacement p) {
    return p == PePlacement::PatchWise ? "patch_wise" : "image_wise";
}

template <typename T>
struct PositionalEncoding {
    PeKind kind = PeKind::None;
    PePlacement placement = PePlacement::PatchWise;
    Tensor<T> table;              // 1d: [P^2, C]
    Tensor<T> row, col;           // 2d: [P, C] each (patch-wise) or [H, C]/[W, C] (image-wise)
    std::vector<Tensor<T>> rel;   // relative: per head, [2P^2-1, D_h]
};

// out[i*P + j, c] = row[i, c] + col[j, c]
template <typename T>
Tensor<T> pe_table_2d(const Tensor<T>& row, const Tensor<T>& col) {
    if (row.rank() != 2 || col.rank() != 2 || row.shape()[1] != col.shape()[1]) {
        throw ShapeError("pe_table_2d: bad row/col tables " + shape_str(row.shape()) + ", " +
                         shape_str(col.shape()));
    }
    const std::int64_t p = row.shape()[0], q = col.shape()[0], c = row.shape()[1];
    std::vector<T> out(static_cast<std::size_t>(p * q * c));
    const T* pr = row.values().data();
    const T* pc = col.values().data();
    for (std::int64_t i = 0; i < p; ++i)
        for (std::int64_t j = 0; j < q; ++j)
            for (std::int64_t ch = 0; ch < c; ++ch)
                out[static_cast<std::size_t>((i * q + j) * c + ch)] = pr[i * c + ch] + pc[j * c + ch];
    auto r_node = row.node();
    auto c_node = col.node();
    return detail::make_op<T>({p * q, c}, std::move(out), {row, col},
                              [r_node, c_node, p, q, c](Node<T>& self) {
                                  if (r_node->requires_grad) {
                                      r_node->ensure_grad();
                                      for (std::int64_t i = 0; i < p; ++i)
                                          for (std::int64_t j = 0; j < q; ++j)
                                              for (std::int64_t ch = 0; ch < c; ++ch)
                                                  r_node->grad[static_cast<std::size_t>(i * c + ch)] +=
                                                      self.grad[static_cast<std::size_t>((i * q + j) * c + ch)];
                                  }
                                  if (c_node->requires_grad) {
                                      c_node->ensure_grad();
                                      for (std::int64_t i = 0; i < p; ++i)
                                          for (std::int64_t j = 0; j < q; ++j)
                                              for (std::int64_t ch = 0; ch < c; ++ch)
                                                  c_node->grad[static_cast<std::size_t>(j * c + ch)] +=
                                                      self.grad[static_cast<std::size_t>((i * q + j) * c + ch)];
                                  }
                              });
}

// Adds a full-map encoding to every pixel: x[n,c,i,j] += row[i,c] + col[j,c].
template <typename T>
Tensor<T> add_image_pe(const Tensor<T>& x, const Tensor<T>& row, const Tensor<T>& col) {
    if (x.rank() != 4) throw ShapeError("add_image_pe: input must be NCHW");
    const std::int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (row.shape() != Shape{h, c} || col.shape() != Shape{w, c}) {
        throw ShapeError("add_image_pe: tables " + shape_str(row.shape()) + "/" +
                         shape_str(col.shape()) + " do not span map " + shape_str(x.shape()));
    }
    std::vector<T> out(x.values().size());
    const T* px = x.values().data();
    const T* pr = row.values().data();
    const T* pc = col.values().data();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t xw = 0; xw < w; ++xw) {
                    const std::int64_t idx = ((i * c + ch) * h + y) * w + xw;
                    out[static_cast<std::size_t>(idx)] = px[idx] + pr[y * c + ch] + pc[xw * c + ch];
                }
    auto x_node = x.node();
    auto r_node = row.node();
    auto c_node = col.node();
    return detail::make_op<T>(x.shape(), std::move(out), {x, row, col},
                              [x_node, r_node, c_node, n, c, h, w](Node<T>& self) {
                                  if (x_node->requires_grad) {
                                      x_node->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                          x_node->grad[i] += self.grad[i];
                                  }
                                  if (r_node->requires_grad) r_node->ensure_grad();
                                  if (c_node->requires_grad) c_node->ensure_grad();
                                  for (std::int64_t i = 0; i < n; ++i)
                                      for (std::int64_t ch = 0; ch < c; ++ch)
                                          for (std::int64_t y = 0; y < h; ++y)
                                              for (std::int64_t xw = 0; xw < w; ++xw) {
                                                  const T g = self.grad[static_cast<std::size_t>(
                                                      ((i * c + ch) * h + y) * w + xw)];
                                                  if (r_node->requires_grad)
                                                      r_node->grad[static_cast<std::size_t>(y * c + ch)] += g;
                                                  if (c_node->requires_grad)
                                                      c_node->grad[static_cast<std::size_t>(xw * c + ch)] += g;
                                              }
                              });
}

// Adds the encoding to a split grid. Patch-wise kinds add one shared [P^2, C]
// table to every (m, n) sequence; image-wise tables are indexed by global
// pixel coordinates, which matches adding them before the split.
template <typename T>
PatchGrid<T> add_positional_encoding(const PatchGrid<T>& g, const PositionalEncoding<T>& pe) {
    if (pe.kind == PeKind::Relative) {
        throw ValueError("add_positional_encoding: relative encoding applies inside attention");
    }
    if (pe.kind == PeKind::None) return g;
    PatchGrid<T> out = g;
    const std::int64_t p = g.patch, c = g.channels(), l = p * p;
    if (pe.placement == PePlacement::PatchWise) {
        Tensor<T> table;
        if (pe.kind == PeKind::Learnable1d) {
            table = pe.table;
        } else {
            table = pe_table_2d(pe.row, pe.col);
        }
        if (table.shape() != Shape{l, c}) {
            throw ShapeError("add_positional_encoding: table " + shape_str(table.shape()) +
                             " does not match sequences [" + std::to_string(l) + "x" +
                             std::to_string(c) + "]");
        }
        out.grid = add(g.grid, table);
    } else {
        if (pe.kind != PeKind::Learnable2d) {
            throw ValueError("add_positional_encoding: image-wise placement requires the 2d kind");
        }
        auto merged = merge_patches(g);
        auto with_pe = add_image_pe(merged, pe.row, pe.col);
        out = split_patches(with_pe, p);
    }
    return out;
}

}  // namespace contnet
