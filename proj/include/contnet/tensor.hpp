#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "contnet/errors.hpp"

namespace contnet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// One value in the recorded computation graph. Parents are the inputs of the
// producing operation; backward_fn scatters this node's gradient into them.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // sized lazily, same extent as values
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

// Dense row-major tensor handle. Copies share the underlying node, so a
// Tensor behaves like a reference into the graph; fresh storage is only
// created by operations.
template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() : node_(std::make_shared<Node<T>>()) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(Shape shape, T value, bool requires_grad = false) {
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->values.assign(static_cast<std::size_t>(numel_of(t.node_->shape)), value);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (numel_of(shape) != static_cast<std::int64_t>(values.size())) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T value) { return from_values({}, {value}); }

    const Shape& shape() const { return node_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t numel() const { return node_->numel(); }
    std::int64_t extent(std::int64_t axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }

    std::vector<T>& values() { return node_->values; }
    const std::vector<T>& values() const { return node_->values; }
    const std::vector<T>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    void zero_grad() { node_->zero_grad(); }

    T item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->values[0];
    }

    std::shared_ptr<Node<T>>& node() { return node_; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// Scoped switch that stops graph recording, for inference-only passes where
// holding activations alive would waste memory.
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> values, std::vector<Tensor<T>> inputs,
                  std::function<void(Node<T>&)> backward_fn) {
    Tensor<T> out = Tensor<T>::from_values(std::move(shape), std::move(values));
    bool needs = false;
    if (grad_enabled_flag()) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        out.set_requires_grad(true);
        auto& node = *out.node();
        node.parents.reserve(inputs.size());
        for (auto& in : inputs) node.parents.push_back(in.node());
        node.backward_fn = std::move(backward_fn);
    }
    return out;
}

// True when `small` equals the trailing axes of `big` (leading-batch
// broadcast) or is a scalar.
inline bool is_trailing_suffix(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    const std::size_t off = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i) {
        if (big[off + i] != small[i]) return false;
    }
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with leading-batch / scalar broadcasting.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const bool b_small = detail::is_trailing_suffix(a.shape(), b.shape());
    const bool a_small = detail::is_trailing_suffix(b.shape(), a.shape());
    if (!b_small && !a_small) {
        throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const Tensor<T>& big = b_small ? a : b;
    const Tensor<T>& small = b_small ? b : a;
    const std::int64_t n = big.numel();
    const std::int64_t m = std::max<std::int64_t>(small.numel(), 1);
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* pb = big.values().data();
    const T* ps = small.values().data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = pb[i] + ps[i % m];

    auto big_node = big.node();
    auto small_node = small.node();
    return detail::make_op<T>(
        big.shape(), std::move(out), {a, b}, [big_node, small_node, n, m](Node<T>& self) {
            if (big_node->requires_grad) {
                big_node->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) big_node->grad[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(i)];
            }
            if (small_node->requires_grad) {
                small_node->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) small_node->grad[static_cast<std::size_t>(i % m)] += self.grad[static_cast<std::size_t>(i)];
            }
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    const bool b_small = detail::is_trailing_suffix(a.shape(), b.shape());
    const bool a_small = detail::is_trailing_suffix(b.shape(), a.shape());
    if (!b_small && !a_small) {
        throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const Tensor<T>& big = b_small ? a : b;
    const Tensor<T>& small = b_small ? b : a;
    const std::int64_t n = big.numel();
    const std::int64_t m = std::max<std::int64_t>(small.numel(), 1);
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* pb = big.values().data();
    const T* ps = small.values().data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = pb[i] * ps[i % m];

    auto big_node = big.node();
    auto small_node = small.node();
    return detail::make_op<T>(
        big.shape(), std::move(out), {a, b}, [big_node, small_node, n, m](Node<T>& self) {
            if (big_node->requires_grad) {
                big_node->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) {
                    big_node->grad[static_cast<std::size_t>(i)] +=
                        self.grad[static_cast<std::size_t>(i)] * small_node->values[static_cast<std::size_t>(i % m)];
                }
            }
            if (small_node->requires_grad) {
                small_node->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) {
                    small_node->grad[static_cast<std::size_t>(i % m)] +=
                        self.grad[static_cast<std::size_t>(i)] * big_node->values[static_cast<std::size_t>(i)];
                }
            }
        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * factor;
    auto a_node = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [a_node, factor](Node<T>& self) {
        if (!a_node->requires_grad) return;
        a_node->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) a_node->grad[i] += self.grad[i] * factor;
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, scale(b, T(-1)));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > T(0) ? a.values()[i] : T(0);
    auto a_node = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [a_node](Node<T>& self) {
        if (!a_node->requires_grad) return;
        a_node->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (a_node->values[i] > T(0)) a_node->grad[i] += self.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (numel_of(new_shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(new_shape));
    }
    auto a_node = a.node();
    return detail::make_op<T>(std::move(new_shape), a.values(), {a}, [a_node](Node<T>& self) {
        if (!a_node->requires_grad) return;
        a_node->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) a_node->grad[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
    if (a.rank() < 2) throw ShapeError("transpose_last2: rank < 2 tensor " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    const std::int64_t r = a.rank();
    std::swap(out_shape[static_cast<std::size_t>(r - 2)], out_shape[static_cast<std::size_t>(r - 1)]);
    const std::int64_t rows = a.shape()[static_cast<std::size_t>(r - 2)];
    const std::int64_t cols = a.shape()[static_cast<std::size_t>(r - 1)];
    const std::int64_t batch = a.numel() / (rows * cols);
    std::vector<T> out(a.values().size());
    const T* src = a.values().data();
    for (std::int64_t b = 0; b < batch; ++b) {
        const std::int64_t off = b * rows * cols;
        for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < cols; ++j)
                out[static_cast<std::size_t>(off + j * rows + i)] = src[off + i * cols + j];
    }
    auto a_node = a.node();
    return detail::make_op<T>(std::move(out_shape), std::move(out), {a},
                              [a_node, batch, rows, cols](Node<T>& self) {
                                  if (!a_node->requires_grad) return;
                                  a_node->ensure_grad();
                                  for (std::int64_t b = 0; b < batch; ++b) {
                                      const std::int64_t off = b * rows * cols;
                                      for (std::int64_t i = 0; i < rows; ++i)
                                          for (std::int64_t j = 0; j < cols; ++j)
                                              a_node->grad[static_cast<std::size_t>(off + i * cols + j)] +=
                                                  self.grad[static_cast<std::size_t>(off + j * rows + i)];
                                  }
                              });
}

// Columns [offset, offset+len) of the last axis.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, std::int64_t offset, std::int64_t len) {
    const std::int64_t cols = a.shape().back();
    if (offset < 0 || len <= 0 || offset + len > cols) {
        throw ShapeError("slice_last: range [" + std::to_string(offset) + ", " +
                         std::to_string(offset + len) + ") out of " + std::to_string(cols));
    }
    Shape out_shape = a.shape();
    out_shape.back() = len;
    const std::int64_t rows = a.numel() / cols;
    std::vector<T> out(static_cast<std::size_t>(rows * len));
    const T* src = a.values().data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < len; ++c)
            out[static_cast<std::size_t>(r * len + c)] = src[r * cols + offset + c];
    auto a_node = a.node();
    return detail::make_op<T>(std::move(out_shape), std::move(out), {a},
                              [a_node, rows, cols, offset, len](Node<T>& self) {
                                  if (!a_node->requires_grad) return;
                                  a_node->ensure_grad();
                                  for (std::int64_t r = 0; r < rows; ++r)
                                      for (std::int64_t c = 0; c < len; ++c)
                                          a_node->grad[static_cast<std::size_t>(r * cols + offset + c)] +=
                                              self.grad[static_cast<std::size_t>(r * len + c)];
                              });
}

template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_last: no inputs");
    Shape lead = parts.front().shape();
    lead.pop_back();
    std::int64_t total_cols = 0;
    for (const auto& p : parts) {
        Shape pl = p.shape();
        const std::int64_t c = pl.back();
        pl.pop_back();
        if (pl != lead) {
            throw ShapeError("concat_last: leading shape mismatch " + shape_str(p.shape()) +
                             " vs " + shape_str(parts.front().shape()));
        }
        total_cols += c;
    }
    const std::int64_t rows = numel_of(lead);
    Shape out_shape = lead;
    out_shape.push_back(total_cols);
    std::vector<T> out(static_cast<std::size_t>(rows * total_cols));
    std::int64_t col_off = 0;
    for (const auto& p : parts) {
        const std::int64_t c = p.shape().back();
        const T* src = p.values().data();
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < c; ++j)
                out[static_cast<std::size_t>(r * total_cols + col_off + j)] = src[r * c + j];
        col_off += c;
    }
    std::vector<std::shared_ptr<Node<T>>> nodes;
    std::vector<std::int64_t> widths;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.shape().back());
    }
    return detail::make_op<T>(std::move(out_shape), std::move(out), parts,
                              [nodes, widths, rows, total_cols](Node<T>& self) {
                                  std::int64_t off = 0;
                                  for (std::size_t k = 0; k < nodes.size(); ++k) {
                                      const std::int64_t c = widths[k];
                                      if (nodes[k]->requires_grad) {
                                          nodes[k]->ensure_grad();
                                          for (std::int64_t r = 0; r < rows; ++r)
                                              for (std::int64_t j = 0; j < c; ++j)
                                                  nodes[k]->grad[static_cast<std::size_t>(r * c + j)] +=
                                                      self.grad[static_cast<std::size_t>(r * total_cols + off + j)];
                                      }
                                      off += c;
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Matrix product. a is [...,M,K]; b is either [K,N] (weights shared across
// the batch) or [...,K,N] with identical leading extents.
// ---------------------------------------------------------------------------

namespace detail {

// c[M,N] += a[M,K] * b[K,N], optionally with a or b transposed in memory
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n, std::int64_t k,
              bool trans_a = false, bool trans_b = false) {
    if (!trans_a && !trans_b) {
        for (std::int64_t i = 0; i < m; ++i) {
            T* crow = c + i * n;
            const T* arow = a + i * k;
            for (std::int64_t p = 0; p < k; ++p) {
                const T av = arow[p];
                if (av == T(0)) continue;
                const T* brow = b + p * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (trans_a && !trans_b) {  // a is [K,M] in memory
        for (std::int64_t p = 0; p < k; ++p) {
            const T* arow = a + p * m;
            const T* brow = b + p * n;
            for (std::int64_t i = 0; i < m; ++i) {
                const T av = arow[i];
                if (av == T(0)) continue;
                T* crow = c + i * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {  // b is [N,K] in memory
        for (std::int64_t i = 0; i < m; ++i) {
            const T* arow = a + i * k;
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T acc = T(0);
                for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    } else {
        throw ContractError("gemm_acc: double transpose unsupported");
    }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const std::int64_t ar = a.rank();
    const std::int64_t m = a.shape()[static_cast<std::size_t>(ar - 2)];
    const std::int64_t k = a.shape()[static_cast<std::size_t>(ar - 1)];
    const bool shared_b = b.rank() == 2;
    std::int64_t kb, n;
    if (b.rank() == 2) {
        kb = b.shape()[0];
        n = b.shape()[1];
    } else {
        if (b.rank() != a.rank()) {
            throw ShapeError("matmul: batched ranks differ: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        }
        for (std::int64_t i = 0; i < ar - 2; ++i) {
            if (a.shape()[static_cast<std::size_t>(i)] != b.shape()[static_cast<std::size_t>(i)]) {
                throw ShapeError("matmul: batch extents differ: " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
            }
        }
        kb = b.shape()[static_cast<std::size_t>(ar - 2)];
        n = b.shape()[static_cast<std::size_t>(ar - 1)];
    }
    if (k != kb) {
        throw ShapeError("matmul: inner extents differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const std::int64_t batch = a.numel() / (m * k);
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    std::vector<T> out(static_cast<std::size_t>(batch * m * n), T(0));
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    for (std::int64_t i = 0; i < batch; ++i) {
        detail::gemm_acc(pa + i * m * k, shared_b ? pb : pb + i * k * n, out.data() + i * m * n, m,
                         n, k);
    }

    auto a_node = a.node();
    auto b_node = b.node();
    return detail::make_op<T>(
        std::move(out_shape), std::move(out), {a, b},
        [a_node, b_node, batch, m, n, k, shared_b](Node<T>& self) {
            const T* g = self.grad.data();
            if (a_node->requires_grad) {
                a_node->ensure_grad();
                for (std::int64_t i = 0; i < batch; ++i) {
                    // dA = G * B^T
                    detail::gemm_acc(g + i * m * n,
                                     shared_b ? b_node->values.data()
                                              : b_node->values.data() + i * k * n,
                                     a_node->grad.data() + i * m * k, m, k, n, false, true);
                }
            }
            if (b_node->requires_grad) {
                b_node->ensure_grad();
                for (std::int64_t i = 0; i < batch; ++i) {
                    // dB = A^T * G, accumulated across the batch when shared
                    detail::gemm_acc(a_node->values.data() + i * m * k, g + i * m * n,
                                     shared_b ? b_node->grad.data() : b_node->grad.data() + i * k * n,
                                     k, n, m, true, false);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (const T& v : a.values()) acc += v;
    auto a_node = a.node();
    return detail::make_op<T>({}, {acc}, {a}, [a_node](Node<T>& self) {
        if (!a_node->requires_grad) return;
        a_node->ensure_grad();
        const T g = self.grad[0];
        for (auto& v : a_node->grad) v += g;
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

namespace detail {

// Iterates all slices along `axis`: outer * inner positions, each slice has
// `extent` elements spaced `inner` apart.
struct AxisIter {
    std::int64_t outer, extent, inner;
};

inline AxisIter axis_iter(const Shape& shape, std::int64_t axis) {
    AxisIter it{1, shape[static_cast<std::size_t>(axis)], 1};
    for (std::int64_t i = 0; i < axis; ++i) it.outer *= shape[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) it.inner *= shape[i];
    return it;
}

}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::int64_t axis) {
    if (axis < 0 || axis >= a.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of rank " +
                         std::to_string(a.rank()));
    }
    const auto it = detail::axis_iter(a.shape(), axis);
    std::vector<T> out(a.values().size());
    const T* src = a.values().data();
    for (std::int64_t o = 0; o < it.outer; ++o) {
        for (std::int64_t in = 0; in < it.inner; ++in) {
            const std::int64_t base = o * it.extent * it.inner + in;
            T mx = src[base];
            for (std::int64_t e = 1; e < it.extent; ++e) mx = std::max(mx, src[base + e * it.inner]);
            T denom = T(0);
            for (std::int64_t e = 0; e < it.extent; ++e) {
                const T v = std::exp(src[base + e * it.inner] - mx);
                out[static_cast<std::size_t>(base + e * it.inner)] = v;
                denom += v;
            }
            for (std::int64_t e = 0; e < it.extent; ++e) out[static_cast<std::size_t>(base + e * it.inner)] /= denom;
        }
    }
    auto a_node = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [a_node, it](Node<T>& self) {
        if (!a_node->requires_grad) return;
        a_node->ensure_grad();
        const T* y = self.values.data();
        const T* g = self.grad.data();
        for (std::int64_t o = 0; o < it.outer; ++o) {
            for (std::int64_t in = 0; in < it.inner; ++in) {
                const std::int64_t base = o * it.extent * it.inner + in;
                T dot = T(0);
                for (std::int64_t e = 0; e < it.extent; ++e) {
                    const std::int64_t idx = base + e * it.inner;
                    dot += g[idx] * y[idx];
                }
                for (std::int64_t e = 0; e < it.extent; ++e) {
                    const std::int64_t idx = base + e * it.inner;
                    a_node->grad[static_cast<std::size_t>(idx)] += y[idx] * (g[idx] - dot);
                }
            }
        }
    });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, std::int64_t axis) {
    if (axis < 0 || axis >= a.rank()) {
        throw ShapeError("log_softmax: axis " + std::to_string(axis) + " out of rank " +
                         std::to_string(a.rank()));
    }
    const auto it = detail::axis_iter(a.shape(), axis);
    std::vector<T> out(a.values().size());
    const T* src = a.values().data();
    for (std::int64_t o = 0; o < it.outer; ++o) {
        for (std::int64_t in = 0; in < it.inner; ++in) {
            const std::int64_t base = o * it.extent * it.inner + in;
            T mx = src[base];
            for (std::int64_t e = 1; e < it.extent; ++e) mx = std::max(mx, src[base + e * it.inner]);
            T denom = T(0);
            for (std::int64_t e = 0; e < it.extent; ++e) denom += std::exp(src[base + e * it.inner] - mx);
            const T lse = mx + std::log(denom);
            for (std::int64_t e = 0; e < it.extent; ++e) {
                const std::int64_t idx = base + e * it.inner;
                out[static_cast<std::size_t>(idx)] = src[idx] - lse;
            }
        }
    }
    auto a_node = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [a_node, it](Node<T>& self) {
        if (!a_node->requires_grad) return;
        a_node->ensure_grad();
        const T* y = self.values.data();
        const T* g = self.grad.data();
        for (std::int64_t o = 0; o < it.outer; ++o) {
            for (std::int64_t in = 0; in < it.inner; ++in) {
                const std::int64_t base = o * it.extent * it.inner + in;
                T gsum = T(0);
                for (std::int64_t e = 0; e < it.extent; ++e) gsum += g[base + e * it.inner];
                for (std::int64_t e = 0; e < it.extent; ++e) {
                    const std::int64_t idx = base + e * it.inner;
                    a_node->grad[static_cast<std::size_t>(idx)] += g[idx] - std::exp(y[idx]) * gsum;
                }
            }
        }
    });
}

// Normalizes the last axis to zero mean / unit variance, then applies the
// learned affine map. gain and bias extend over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    const std::int64_t c = x.shape().back();
    if (gain.numel() != c || bias.numel() != c) {
        throw ShapeError("layer_norm: affine extent mismatch, x " + shape_str(x.shape()) +
                         " gain " + shape_str(gain.shape()));
    }
    const std::int64_t rows = x.numel() / c;
    std::vector<T> out(x.values().size());
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    std::vector<T> xhat(x.values().size());
    const T* src = x.values().data();
    const T* pg = gain.values().data();
    const T* pb = bias.values().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = src + r * c;
        T mu = T(0);
        for (std::int64_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<T>(c);
        T var = T(0);
        for (std::int64_t j = 0; j < c; ++j) {
            const T d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < c; ++j) {
            const T xh = (row[j] - mu) * is;
            xhat[static_cast<std::size_t>(r * c + j)] = xh;
            out[static_cast<std::size_t>(r * c + j)] = xh * pg[j] + pb[j];
        }
    }
    auto x_node = x.node();
    auto g_node = gain.node();
    auto b_node = bias.node();
    return detail::make_op<T>(
        x.shape(), std::move(out), {x, gain, bias},
        [x_node, g_node, b_node, rows, c, inv_std = std::move(inv_std),
         xhat = std::move(xhat)](Node<T>& self) {
            const T* g = self.grad.data();
            if (g_node->requires_grad) {
                g_node->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < c; ++j)
                        g_node->grad[static_cast<std::size_t>(j)] +=
                            g[r * c + j] * xhat[static_cast<std::size_t>(r * c + j)];
            }
            if (b_node->requires_grad) {
                b_node->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < c; ++j) b_node->grad[static_cast<std::size_t>(j)] += g[r * c + j];
            }
            if (x_node->requires_grad) {
                x_node->ensure_grad();
                const T* pg = g_node->values.data();
                for (std::int64_t r = 0; r < rows; ++r) {
                    T s1 = T(0), s2 = T(0);
                    for (std::int64_t j = 0; j < c; ++j) {
                        const T dxh = g[r * c + j] * pg[j];
                        s1 += dxh;
                        s2 += dxh * xhat[static_cast<std::size_t>(r * c + j)];
                    }
                    s1 /= static_cast<T>(c);
                    s2 /= static_cast<T>(c);
                    const T is = inv_std[static_cast<std::size_t>(r)];
                    for (std::int64_t j = 0; j < c; ++j) {
                        const T dxh = g[r * c + j] * pg[j];
                        x_node->grad[static_cast<std::size_t>(r * c + j)] +=
                            is * (dxh - s1 - xhat[static_cast<std::size_t>(r * c + j)] * s2);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Backward pass over the recorded graph.
// ---------------------------------------------------------------------------

// Topologically ordered view of the operations reachable from one root.
// Replaying backward() visits every node exactly once.
template <typename T>
class GradTape {
public:
    static GradTape build(const Tensor<T>& root) {
        GradTape tape;
        tape.root_ = root.node();
        // iterative post-order DFS; parents end up before their consumers
        std::vector<std::pair<Node<T>*, std::size_t>> stack;
        std::unordered_set<Node<T>*> visited;
        if (root.node()->requires_grad) {
            stack.push_back({root.node().get(), 0});
            visited.insert(root.node().get());
        }
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node<T>* p = node->parents[next++].get();
                if (p->requires_grad && visited.insert(p).second) {
                    stack.push_back({p, 0});
                }
            } else {
                tape.order_.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }

    // Seeds the root with gradient one and propagates to every reachable
    // parameter. Gradients accumulate additively on top of existing values.
    void backward() {
        if (!root_) throw ContractError("GradTape: empty tape");
        if (root_->numel() != 1) {
            throw ContractError("backward: loss must be scalar, got " + shape_str(root_->shape));
        }
        if (order_.empty()) return;  // root does not require grad
        root_->ensure_grad();
        root_->grad[0] += T(1);
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            Node<T>* node = *it;
            if (node->backward_fn) {
                node->ensure_grad();
                node->backward_fn(*node);
            }
        }
    }

    // Clears gradients on every node of the tape (parameters included).
    void zero_grad() {
        for (Node<T>* node : order_) node->zero_grad();
    }

    std::size_t size() const { return order_.size(); }

private:
    std::shared_ptr<Node<T>> root_;
    std::vector<Node<T>*> order_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    GradTape<T>::build(loss).backward();
}

// ---------------------------------------------------------------------------
// Finite-difference verification. f recomputes a scalar from the current
// contents of x; the returned value is the worst relative error between the
// recorded gradient and central differences.
// ---------------------------------------------------------------------------

template <typename T, typename F>
double grad_check(F&& f, Tensor<T>& x, double eps = 1e-5) {
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor<T> loss = f();
    if (loss.numel() != 1) throw ContractError("grad_check: map must be scalar-valued");
    backward(loss);
    std::vector<T> analytic = x.grad();
    if (analytic.empty()) analytic.assign(x.values().size(), T(0));

    double worst = 0.0;
    for (std::size_t i = 0; i < x.values().size(); ++i) {
        const T orig = x.values()[i];
        x.values()[i] = orig + static_cast<T>(eps);
        const double up = static_cast<double>(f().item());
        x.values()[i] = orig - static_cast<T>(eps);
        const double down = static_cast<double>(f().item());
        x.values()[i] = orig;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = static_cast<double>(analytic[i]);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

}  // namespace contnet
