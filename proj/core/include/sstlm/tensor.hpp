#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "sstlm/errors.hpp"

namespace sstlm {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Per-thread instrumentation. attn_pairs counts (query, visible key) score
// evaluations per layer (the context sum the cost model predicts); matmul
// flops use the standard 2*m*k*n convention.
struct OpCounters {
    uint64_t attn_pairs = 0;
    uint64_t matmul_flops = 0;

    static OpCounters& get() {
        thread_local OpCounters c;
        return c;
    }
    static void reset() { get() = OpCounters{}; }
};

namespace autodiff {

// Thread-local gradient recording switch. Evaluation paths disable it to keep
// forward passes tape-free.
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool grad_enabled() { return grad_enabled_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_enabled_flag()) { grad_enabled_flag() = false; }
    ~NoGradGuard() { grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Forward results are required to stay finite; the scan is cheap next to the
// matmuls it guards and can be suspended for micro-benchmarks.
inline bool& finite_checks_flag() {
    thread_local bool enabled = true;
    return enabled;
}

class FiniteCheckGuard {
public:
    explicit FiniteCheckGuard(bool enabled) : prev_(finite_checks_flag()) {
        finite_checks_flag() = enabled;
    }
    ~FiniteCheckGuard() { finite_checks_flag() = prev_; }

private:
    bool prev_;
};

}  // namespace autodiff

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool is_param = false;    // requires_grad leaf
    bool needs_grad = false;  // param or derived from one
    bool tape_done = false;   // a backward pass already consumed this node
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;  // scatters this->grad into parents

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    }
};

}  // namespace detail

template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

public:
    using Node = detail::Node<T>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), requires_grad, T(0));
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        return filled(std::move(shape), requires_grad, value);
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("tensor init: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->values = std::move(values);
        node->is_param = requires_grad;
        node->needs_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return static_cast<int64_t>(node_->values.size()); }
    int64_t dim(size_t i) const { return node_->shape.at(i); }
    size_t rank() const { return node_->shape.size(); }

    bool requires_grad() const { return node_->is_param; }
    bool needs_grad() const { return node_->needs_grad; }

    std::span<const T> values() const { return node_->values; }
    // Leaf mutation only (initialization, optimizer steps, finite differences).
    std::span<T> values_mut() { return node_->values; }

    bool has_grad() const { return node_ && node_->grad.size() == node_->values.size(); }
    std::span<const T> grad() const {
        if (!has_grad()) throw Error("tensor has no gradient");
        return node_->grad;
    }
    // Mutable gradient buffer of a leaf (allocated on demand).
    std::span<T> grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (node_) node_->grad.assign(node_->values.size(), T(0));
    }

    T item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->values[0];
    }

    // Leaf copy sharing no state with this tensor.
    Tensor clone_detached(bool requires_grad) const {
        return from(node_->shape, node_->values, requires_grad);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(node_->values.begin(), node_->values.end());
        return Tensor<U>::from(node_->shape, std::move(out), node_->is_param);
    }

    // Reverse-mode sweep from a scalar. Single use per tape: the graph is
    // released afterwards and a second call on any node of it is an error.
    void backward() const {
        if (!defined()) throw Error("backward on undefined tensor");
        if (size() != 1) throw ShapeError("backward requires a scalar loss");

        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [node, next_parent] = stack.back();
            if (node->tape_done)
                throw Error("backward: tape already consumed (second backward without a new forward)");
            if (next_parent < node->parents.size()) {
                Node* parent = node->parents[next_parent++].get();
                if (seen.insert(parent).second) stack.emplace_back(parent, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }

        node_->ensure_grad();
        node_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->backward_fn) {
                node->ensure_grad();
                node->backward_fn();
            }
            if (!node->is_param && node != node_.get()) node->grad = {};
        }
        // Release the graph. Leaves stay reusable across tapes; consuming an
        // interior node twice is the error the flag exists to catch.
        for (Node* node : order) {
            if (node->backward_fn || !node->parents.empty()) {
                node->tape_done = true;
                node->backward_fn = nullptr;
                node->parents.clear();
            }
        }
    }

    std::shared_ptr<Node> node_;

    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
    static Tensor filled(Shape shape, bool requires_grad, T fill) {
        auto node = std::make_shared<Node>();
        const int64_t n = numel(shape);
        if (n < 0) throw ShapeError("negative dimension in " + shape_str(shape));
        node->shape = std::move(shape);
        node->values.assign(static_cast<size_t>(n), fill);
        node->is_param = requires_grad;
        node->needs_grad = requires_grad;
        return Tensor(std::move(node));
    }
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_mat(const Node<T>& node, int64_t rows, int64_t cols) {
    return ConstMatMap<T>(node.values.data(), rows, cols);
}

template <typename T>
MatMap<T> grad_mat(Node<T>& node, int64_t rows, int64_t cols) {
    node.ensure_grad();
    return MatMap<T>(node.grad.data(), rows, cols);
}

template <typename T>
void check_finite(const std::vector<T>& values, const char* op) {
    if (!autodiff::finite_checks_flag()) return;
    for (T v : values) {
        if (!std::isfinite(v))
            throw ValueError(std::string("non-finite value produced by ") + op);
    }
}

// Builds the result node, wiring tape edges only when some input needs a
// gradient and recording is enabled.
template <typename T, typename BackwardFactory>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs,
                      BackwardFactory&& make_backward) {
    check_finite(values, op);
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->values = std::move(values);

    bool needs = false;
    if (autodiff::grad_enabled()) {
        for (const Tensor<T>* input : inputs) needs = needs || input->node_->needs_grad;
    }
    if (needs) {
        node->needs_grad = true;
        for (const Tensor<T>* input : inputs) node->parents.push_back(input->node_);
        node->backward_fn = make_backward(node.get());
    }
    return Tensor<T>(std::move(node));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    OpCounters::get().matmul_flops += static_cast<uint64_t>(2) * m * k * n;

    std::vector<T> out(static_cast<size_t>(m * n));
    {
        detail::ConstMatMap<T> A(a.node_->values.data(), m, k);
        detail::ConstMatMap<T> B(b.node_->values.data(), k, n);
        detail::MatMap<T> C(out.data(), m, n);
        C.noalias() = A * B;
    }
    auto an = a.node_, bn = b.node_;
    return detail::make_result<T>(
        {m, n}, std::move(out), "matmul", {&a, &b}, [an, bn, m, k, n](detail::Node<T>* self) {
            return [an, bn, self, m, k, n]() {
                detail::ConstMatMap<T> G(self->grad.data(), m, n);
                if (an->needs_grad) {
                    detail::ConstMatMap<T> B(bn->values.data(), k, n);
                    detail::grad_mat(*an, m, k).noalias() += G * B.transpose();
                }
                if (bn->needs_grad) {
                    detail::ConstMatMap<T> A(an->values.data(), m, k);
                    detail::grad_mat(*bn, k, n).noalias() += A.transpose() * G;
                }
            };
        });
}

// Elementwise sum; also accepts a rank-1 `b` broadcast across the rows of a
// rank-2 `a` (bias addition).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const bool row_broadcast = a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0);
    if (!row_broadcast && a.shape() != b.shape())
        throw ShapeError("add shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));

    std::vector<T> out(a.values().begin(), a.values().end());
    if (row_broadcast) {
        const int64_t rows = a.dim(0), cols = a.dim(1);
        for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < cols; ++j) out[i * cols + j] += b.values()[j];
    } else {
        for (size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
    }
    auto an = a.node_, bn = b.node_;
    return detail::make_result<T>(
        a.shape(), std::move(out), "add", {&a, &b},
        [an, bn, row_broadcast](detail::Node<T>* self) {
            return [an, bn, self, row_broadcast]() {
                if (an->needs_grad) {
                    an->ensure_grad();
                    for (size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
                }
                if (bn->needs_grad) {
                    bn->ensure_grad();
                    if (row_broadcast) {
                        const int64_t cols = static_cast<int64_t>(bn->values.size());
                        const int64_t rows = static_cast<int64_t>(self->grad.size()) / cols;
                        for (int64_t i = 0; i < rows; ++i)
                            for (int64_t j = 0; j < cols; ++j) bn->grad[j] += self->grad[i * cols + j];
                    } else {
                        for (size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] += self->grad[i];
                    }
                }
            };
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<T> out(a.size());
    for (int64_t i = 0; i < a.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto an = a.node_, bn = b.node_;
    return detail::make_result<T>(a.shape(), std::move(out), "mul", {&a, &b},
                                  [an, bn](detail::Node<T>* self) {
                                      return [an, bn, self]() {
                                          if (an->needs_grad) {
                                              an->ensure_grad();
                                              for (size_t i = 0; i < self->grad.size(); ++i)
                                                  an->grad[i] += self->grad[i] * bn->values[i];
                                          }
                                          if (bn->needs_grad) {
                                              bn->ensure_grad();
                                              for (size_t i = 0; i < self->grad.size(); ++i)
                                                  bn->grad[i] += self->grad[i] * an->values[i];
                                          }
                                      };
                                  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.size());
    for (int64_t i = 0; i < a.size(); ++i) out[i] = a.values()[i] * c;
    auto an = a.node_;
    return detail::make_result<T>(a.shape(), std::move(out), "scale", {&a},
                                  [an, c](detail::Node<T>* self) {
                                      return [an, c, self]() {
                                          if (!an->needs_grad) return;
                                          an->ensure_grad();
                                          for (size_t i = 0; i < self->grad.size(); ++i)
                                              an->grad[i] += self->grad[i] * c;
                                      };
                                  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects rank-2, got " + shape_str(a.shape()));
    const int64_t m = a.dim(0), n = a.dim(1);
    std::vector<T> out(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
    auto an = a.node_;
    return detail::make_result<T>({n, m}, std::move(out), "transpose", {&a},
                                  [an, m, n](detail::Node<T>* self) {
                                      return [an, m, n, self]() {
                                          if (!an->needs_grad) return;
                                          an->ensure_grad();
                                          for (int64_t i = 0; i < m; ++i)
                                              for (int64_t j = 0; j < n; ++j)
                                                  an->grad[i * n + j] += self->grad[j * m + i];
                                      };
                                  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = std::accumulate(a.values().begin(), a.values().end(), T(0));
    auto an = a.node_;
    return detail::make_result<T>({1}, {total}, "sum", {&a}, [an](detail::Node<T>* self) {
        return [an, self]() {
            if (!an->needs_grad) return;
            an->ensure_grad();
            const T g = self->grad[0];
            for (auto& v : an->grad) v += g;
        };
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Row gather from a rank-2 table. Used for both embedding lookup and KV
// retention; backward scatter-adds into the source rows.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<int64_t> rows) {
    if (a.rank() != 2) throw ShapeError("gather_rows expects rank-2, got " + shape_str(a.shape()));
    const int64_t m = a.dim(0), d = a.dim(1);
    for (int64_t r : rows) {
        if (r < 0 || r >= m)
            throw ValueError("gather_rows: row " + std::to_string(r) + " out of range [0," +
                             std::to_string(m) + ")");
    }
    const int64_t out_rows = static_cast<int64_t>(rows.size());
    std::vector<T> out(static_cast<size_t>(out_rows * d));
    for (int64_t i = 0; i < out_rows; ++i)
        std::copy_n(a.values().data() + rows[i] * d, d, out.data() + i * d);
    auto an = a.node_;
    return detail::make_result<T>(
        {out_rows, d}, std::move(out), "gather_rows", {&a},
        [an, rows = std::move(rows), d](detail::Node<T>* self) {
            return [an, rows, d, self]() {
                if (!an->needs_grad) return;
                an->ensure_grad();
                for (size_t i = 0; i < rows.size(); ++i)
                    for (int64_t j = 0; j < d; ++j)
                        an->grad[rows[i] * d + j] += self->grad[i * d + j];
            };
        });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int32_t> ids) {
    if (table.rank() != 2)
        throw ShapeError("embedding table must be rank-2, got " + shape_str(table.shape()));
    std::vector<int64_t> rows(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.dim(0))
            throw ValueError("embedding: token id " + std::to_string(ids[i]) +
                             " outside vocab of " + std::to_string(table.dim(0)));
        rows[i] = ids[i];
    }
    return gather_rows(table, std::move(rows));
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, T eps = T(1e-6)) {
    if (x.rank() != 2 || weight.rank() != 1 || x.dim(1) != weight.dim(0))
        throw ShapeError("rms_norm: incompatible " + shape_str(x.shape()) + " and " +
                         shape_str(weight.shape()));
    const int64_t m = x.dim(0), d = x.dim(1);
    std::vector<T> out(static_cast<size_t>(m * d));
    auto inv = std::make_shared<std::vector<T>>(m);
    for (int64_t i = 0; i < m; ++i) {
        T ss = 0;
        for (int64_t j = 0; j < d; ++j) {
            const T v = x.values()[i * d + j];
            ss += v * v;
        }
        const T r = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
        (*inv)[i] = r;
        for (int64_t j = 0; j < d; ++j)
            out[i * d + j] = x.values()[i * d + j] * r * weight.values()[j];
    }
    auto xn = x.node_, wn = weight.node_;
    return detail::make_result<T>(
        x.shape(), std::move(out), "rms_norm", {&x, &weight},
        [xn, wn, inv, m, d](detail::Node<T>* self) {
            return [xn, wn, inv, m, d, self]() {
                for (int64_t i = 0; i < m; ++i) {
                    const T r = (*inv)[i];
                    if (wn->needs_grad) {
                        wn->ensure_grad();
                        for (int64_t j = 0; j < d; ++j)
                            wn->grad[j] += self->grad[i * d + j] * xn->values[i * d + j] * r;
                    }
                    if (xn->needs_grad) {
                        xn->ensure_grad();
                        T dot = 0;
                        for (int64_t j = 0; j < d; ++j)
                            dot += self->grad[i * d + j] * wn->values[j] * xn->values[i * d + j];
                        const T k = r * r * r * dot / static_cast<T>(d);
                        for (int64_t j = 0; j < d; ++j)
                            xn->grad[i * d + j] +=
                                self->grad[i * d + j] * wn->values[j] * r - k * xn->values[i * d + j];
                    }
                }
            };
        });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    std::vector<T> out(x.size());
    for (int64_t i = 0; i < x.size(); ++i) {
        const T v = x.values()[i];
        out[i] = v / (T(1) + std::exp(-v));
    }
    auto xn = x.node_;
    return detail::make_result<T>(x.shape(), std::move(out), "silu", {&x},
                                  [xn](detail::Node<T>* self) {
                                      return [xn, self]() {
                                          if (!xn->needs_grad) return;
                                          xn->ensure_grad();
                                          for (size_t i = 0; i < self->grad.size(); ++i) {
                                              const T v = xn->values[i];
                                              const T s = T(1) / (T(1) + std::exp(-v));
                                              xn->grad[i] += self->grad[i] * s * (T(1) + v * (T(1) - s));
                                          }
                                      };
                                  });
}

// Concatenate rank-1 tensors or rank-2 tensors along axis 0 or 1.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const size_t rank = parts[0].rank();
    if (rank == 1) {
        if (axis != 0) throw ShapeError("concat: rank-1 tensors support axis 0 only");
    } else if (rank != 2 || (axis != 0 && axis != 1)) {
        throw ShapeError("concat supports rank-1 axis 0 or rank-2 axis 0/1");
    }
    for (const auto& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat: mixed ranks");
        for (size_t i = 0; i < rank; ++i) {
            if (static_cast<int>(i) != axis && p.dim(i) != parts[0].dim(i))
                throw ShapeError("concat: shapes differ off-axis: " + shape_str(p.shape()) +
                                 " vs " + shape_str(parts[0].shape()));
        }
    }

    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const auto& p : parts) total += p.dim(static_cast<size_t>(axis));
    out_shape[static_cast<size_t>(axis)] = total;

    std::vector<T> out(static_cast<size_t>(numel(out_shape)));
    std::vector<int64_t> offsets(parts.size());
    if (rank == 1 || axis == 0) {
        int64_t at = 0;
        for (size_t i = 0; i < parts.size(); ++i) {
            offsets[i] = at;
            std::copy(parts[i].values().begin(), parts[i].values().end(), out.begin() + at);
            at += parts[i].size();
        }
    } else {
        const int64_t rows = out_shape[0];
        int64_t col_at = 0;
        for (size_t i = 0; i < parts.size(); ++i) {
            offsets[i] = col_at;
            const int64_t cols = parts[i].dim(1);
            for (int64_t r = 0; r < rows; ++r)
                std::copy_n(parts[i].values().data() + r * cols, cols,
                            out.data() + r * total + col_at);
            col_at += cols;
        }
    }

    std::vector<std::shared_ptr<detail::Node<T>>> part_nodes;
    part_nodes.reserve(parts.size());
    bool needs = false;
    for (const auto& p : parts) {
        part_nodes.push_back(p.node_);
        needs = needs || p.node_->needs_grad;
    }
    detail::check_finite(out, "concat");
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = out_shape;
    node->values = std::move(out);
    if (autodiff::grad_enabled() && needs) {
        node->needs_grad = true;
        node->parents = part_nodes;
        detail::Node<T>* self = node.get();
        const int64_t total_cols = total;
        const bool along_cols = (rank == 2 && axis == 1);
        const int64_t rows = rank == 2 ? out_shape[0] : 0;
        node->backward_fn = [part_nodes, offsets, self, along_cols, rows, total_cols]() {
            for (size_t i = 0; i < part_nodes.size(); ++i) {
                auto& p = part_nodes[i];
                if (!p->needs_grad) continue;
                p->ensure_grad();
                if (!along_cols) {
                    for (size_t j = 0; j < p->values.size(); ++j)
                        p->grad[j] += self->grad[offsets[i] + j];
                } else {
                    const int64_t cols = static_cast<int64_t>(p->values.size()) / rows;
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < cols; ++c)
                            p->grad[r * cols + c] += self->grad[r * total_cols + offsets[i] + c];
                }
            }
        };
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
    if (x.rank() == 1) {
        if (axis != 0) throw ShapeError("slice: rank-1 tensors support axis 0 only");
    } else if (x.rank() != 2 || (axis != 0 && axis != 1)) {
        throw ShapeError("slice supports rank-1 axis 0 or rank-2 axis 0/1");
    }
    const int64_t extent = x.dim(static_cast<size_t>(axis));
    if (start < 0 || len < 0 || start + len > extent)
        throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for axis extent " + std::to_string(extent));

    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    std::vector<T> out(static_cast<size_t>(numel(out_shape)));
    const int64_t cols = x.rank() == 2 ? x.dim(1) : 1;
    if (x.rank() == 1 || axis == 0) {
        std::copy_n(x.values().data() + start * cols, len * cols, out.data());
    } else {
        const int64_t rows = x.dim(0);
        for (int64_t r = 0; r < rows; ++r)
            std::copy_n(x.values().data() + r * cols + start, len, out.data() + r * len);
    }
    auto xn = x.node_;
    const bool along_cols = (x.rank() == 2 && axis == 1);
    return detail::make_result<T>(
        out_shape, std::move(out), "slice", {&x},
        [xn, start, len, cols, along_cols](detail::Node<T>* self) {
            return [xn, start, len, cols, along_cols, self]() {
                if (!xn->needs_grad) return;
                xn->ensure_grad();
                if (!along_cols) {
                    for (int64_t i = 0; i < len * cols; ++i)
                        xn->grad[start * cols + i] += self->grad[i];
                } else {
                    const int64_t rows = static_cast<int64_t>(xn->values.size()) / cols;
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < len; ++c)
                            xn->grad[r * cols + start + c] += self->grad[r * len + c];
                }
            };
        });
}

// Numerically stable softmax over the last axis (rows of a rank-2 tensor, or
// the whole of a rank-1 tensor).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    const int last = static_cast<int>(x.rank()) - 1;
    if (axis != -1 && axis != last)
        throw ShapeError("softmax supports the last axis only");
    const int64_t cols = x.rank() == 2 ? x.dim(1) : x.size();
    const int64_t rows = x.size() / cols;
    if (cols < 1) throw ShapeError("softmax over empty axis");

    std::vector<T> out(x.size());
    for (int64_t i = 0; i < rows; ++i) {
        const T* row = x.values().data() + i * cols;
        T* orow = out.data() + i * cols;
        const T mx = *std::max_element(row, row + cols);
        T z = 0;
        for (int64_t j = 0; j < cols; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        for (int64_t j = 0; j < cols; ++j) orow[j] /= z;
    }
    auto xn = x.node_;
    return detail::make_result<T>(
        x.shape(), std::move(out), "softmax", {&x}, [xn, rows, cols](detail::Node<T>* self) {
            return [xn, rows, cols, self]() {
                if (!xn->needs_grad) return;
                xn->ensure_grad();
                for (int64_t i = 0; i < rows; ++i) {
                    const T* y = self->values.data() + i * cols;
                    const T* g = self->grad.data() + i * cols;
                    T dot = 0;
                    for (int64_t j = 0; j < cols; ++j) dot += y[j] * g[j];
                    for (int64_t j = 0; j < cols; ++j)
                        xn->grad[i * cols + j] += y[j] * (g[j] - dot);
                }
            };
        });
}

// Mean negative log-likelihood of integer targets under row logits.
// Stable log-sum-exp; stores row softmax for the backward pass.
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, std::span<const int32_t> targets) {
    if (logits.rank() != 2)
        throw ShapeError("cross_entropy expects rank-2 logits, got " + shape_str(logits.shape()));
    const int64_t m = logits.dim(0), v = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != m)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(m) + " logit rows");

    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(m * v));
    T loss = 0;
    for (int64_t i = 0; i < m; ++i) {
        const int32_t t = targets[i];
        if (t < 0 || t >= v)
            throw ValueError("cross_entropy: target " + std::to_string(t) + " outside vocab " +
                             std::to_string(v));
        const T* row = logits.values().data() + i * v;
        T* prow = probs->data() + i * v;
        const T mx = *std::max_element(row, row + v);
        T z = 0;
        for (int64_t j = 0; j < v; ++j) {
            prow[j] = std::exp(row[j] - mx);
            z += prow[j];
        }
        for (int64_t j = 0; j < v; ++j) prow[j] /= z;
        loss += std::log(z) + mx - row[t];
    }
    loss /= static_cast<T>(m);

    auto ln = logits.node_;
    std::vector<int32_t> tgt(targets.begin(), targets.end());
    return detail::make_result<T>(
        {1}, {loss}, "cross_entropy", {&logits},
        [ln, probs, tgt = std::move(tgt), m, v](detail::Node<T>* self) {
            return [ln, probs, tgt, m, v, self]() {
                if (!ln->needs_grad) return;
                ln->ensure_grad();
                const T g = self->grad[0] / static_cast<T>(m);
                for (int64_t i = 0; i < m; ++i) {
                    const T* prow = probs->data() + i * v;
                    T* grow = ln->grad.data() + i * v;
                    for (int64_t j = 0; j < v; ++j) grow[j] += g * prow[j];
                    grow[tgt[i]] -= g;
                }
            };
        });
}

// Rotary position encoding: within each head, consecutive value pairs are
// rotated by pos * base^(-2j/d_head). Keys produced through this op are cached
// post-rotation, so retained entries are never re-rotated.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const int64_t> positions, int64_t n_heads,
               double base) {
    if (x.rank() != 2) throw ShapeError("rope expects rank-2, got " + shape_str(x.shape()));
    const int64_t m = x.dim(0), d = x.dim(1);
    if (static_cast<int64_t>(positions.size()) != m)
        throw ShapeError("rope: positions count != rows");
    if (d % n_heads != 0) throw ShapeError("rope: d_model not divisible by n_heads");
    const int64_t dh = d / n_heads;
    if (dh % 2 != 0) throw ShapeError("rope: head dimension must be even");

    std::vector<T> inv_freq(static_cast<size_t>(dh / 2));
    for (int64_t j = 0; j < dh / 2; ++j)
        inv_freq[j] = static_cast<T>(std::pow(base, -2.0 * static_cast<double>(j) /
                                                        static_cast<double>(dh)));

    std::vector<T> out(x.size());
    std::vector<int64_t> pos(positions.begin(), positions.end());
    auto rotate = [&](const T* src, T* dst, bool inverse) {
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t h = 0; h < n_heads; ++h) {
                const int64_t off = i * d + h * dh;
                for (int64_t j = 0; j < dh / 2; ++j) {
                    const T theta = static_cast<T>(pos[i]) * inv_freq[j];
                    const T c = std::cos(theta);
                    const T s = inverse ? -std::sin(theta) : std::sin(theta);
                    const T a = src[off + 2 * j];
                    const T b = src[off + 2 * j + 1];
                    dst[off + 2 * j] = a * c - b * s;
                    dst[off + 2 * j + 1] = a * s + b * c;
                }
            }
        }
    };
    rotate(x.values().data(), out.data(), false);

    auto xn = x.node_;
    return detail::make_result<T>(
        x.shape(), std::move(out), "rope", {&x},
        [xn, pos = std::move(pos), inv_freq = std::move(inv_freq), m, d, dh,
         n_heads](detail::Node<T>* self) {
            return [xn, pos, inv_freq, m, d, dh, n_heads, self]() {
                if (!xn->needs_grad) return;
                xn->ensure_grad();
                // Inverse rotation of the output gradient.
                for (int64_t i = 0; i < m; ++i) {
                    for (int64_t h = 0; h < n_heads; ++h) {
                        const int64_t off = i * d + h * dh;
                        for (int64_t j = 0; j < dh / 2; ++j) {
                            const T theta = static_cast<T>(pos[i]) * inv_freq[j];
                            const T c = std::cos(theta);
                            const T s = std::sin(theta);
                            const T ga = self->grad[off + 2 * j];
                            const T gb = self->grad[off + 2 * j + 1];
                            xn->grad[off + 2 * j] += ga * c + gb * s;
                            xn->grad[off + 2 * j + 1] += -ga * s + gb * c;
                        }
                    }
                }
            };
        });
}

// Fused causal attention for one head. Query row i attends to key rows
// [0, cache_len + i]; rows beyond that bound are never part of the softmax
// support. Scores are scaled by 1/sqrt(d_head). The softmax weights are kept
// alive for the backward pass and released when the tape is consumed.
template <typename T>
Tensor<T> attend_causal(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                        int64_t cache_len) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("attend_causal expects rank-2 q/k/v");
    const int64_t m = q.dim(0), dh = q.dim(1), total = k.dim(0);
    if (k.shape() != v.shape() || k.dim(1) != dh)
        throw ShapeError("attend_causal: k/v shape mismatch with q");
    if (cache_len < 0 || total != cache_len + m)
        throw ShapeError("attend_causal: key rows (" + std::to_string(total) +
                         ") != cache_len + queries (" + std::to_string(cache_len + m) + ")");

    const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
    auto weights = std::make_shared<std::vector<T>>(static_cast<size_t>(m * total), T(0));

    {
        detail::ConstMatMap<T> Q(q.node_->values.data(), m, dh);
        detail::ConstMatMap<T> K(k.node_->values.data(), total, dh);
        detail::MatMap<T> W(weights->data(), m, total);
        constexpr int64_t kChunk = 64;
        for (int64_t r0 = 0; r0 < m; r0 += kChunk) {
            const int64_t rows = std::min(kChunk, m - r0);
            const int64_t limit = cache_len + r0 + rows;  // widest row in chunk
            W.block(r0, 0, rows, limit).noalias() =
                Q.middleRows(r0, rows) * K.topRows(limit).transpose() * inv_scale;
        }
        // Row-wise masked softmax over each row's visible prefix.
        for (int64_t i = 0; i < m; ++i) {
            const int64_t limit = cache_len + i + 1;
            T* row = weights->data() + i * total;
            const T mx = *std::max_element(row, row + limit);
            T z = 0;
            for (int64_t j = 0; j < limit; ++j) {
                row[j] = std::exp(row[j] - mx);
                z += row[j];
            }
            for (int64_t j = 0; j < limit; ++j) row[j] /= z;
            std::fill(row + limit, row + total, T(0));
        }
    }

    std::vector<T> out(static_cast<size_t>(m * dh));
    {
        detail::ConstMatMap<T> W(weights->data(), m, total);
        detail::ConstMatMap<T> V(v.node_->values.data(), total, dh);
        detail::MatMap<T> O(out.data(), m, dh);
        O.noalias() = W * V;
    }

    auto qn = q.node_, kn = k.node_, vn = v.node_;
    return detail::make_result<T>(
        {m, dh}, std::move(out), "attend_causal", {&q, &k, &v},
        [qn, kn, vn, weights, m, dh, total, cache_len, inv_scale](detail::Node<T>* self) {
            return [qn, kn, vn, weights, m, dh, total, cache_len, inv_scale, self]() {
                detail::ConstMatMap<T> G(self->grad.data(), m, dh);
                detail::ConstMatMap<T> W(weights->data(), m, total);
                detail::ConstMatMap<T> V(vn->values.data(), total, dh);
                detail::ConstMatMap<T> Q(qn->values.data(), m, dh);
                detail::ConstMatMap<T> K(kn->values.data(), total, dh);

                if (vn->needs_grad)
                    detail::grad_mat(*vn, total, dh).noalias() += W.transpose() * G;

                // dW, then softmax backward within each visible prefix.
                // Masked columns carry zero weight, so they contribute nothing.
                detail::RowMat<T> dW(m, total);
                dW.noalias() = G * V.transpose();
                detail::RowMat<T> dS(m, total);
                dS.setZero();
                for (int64_t i = 0; i < m; ++i) {
                    const int64_t limit = cache_len + i + 1;
                    T dot = 0;
                    for (int64_t j = 0; j < limit; ++j) dot += W(i, j) * dW(i, j);
                    for (int64_t j = 0; j < limit; ++j) dS(i, j) = W(i, j) * (dW(i, j) - dot);
                }
                if (qn->needs_grad)
                    detail::grad_mat(*qn, m, dh).noalias() += dS * K * inv_scale;
                if (kn->needs_grad)
                    detail::grad_mat(*kn, total, dh).noalias() += dS.transpose() * Q * inv_scale;
            };
        });
}

// Mean-pool consecutive groups of `group` rows (last group may be shorter).
template <typename T>
Tensor<T> pool_avg_rows(const Tensor<T>& x, int64_t group) {
    if (x.rank() != 2) throw ShapeError("pool_avg_rows expects rank-2");
    if (group < 1) throw ValueError("pool_avg_rows: group must be >= 1");
    const int64_t m = x.dim(0), d = x.dim(1);
    const int64_t out_rows = (m + group - 1) / group;
    std::vector<T> out(static_cast<size_t>(out_rows * d), T(0));
    for (int64_t g = 0; g < out_rows; ++g) {
        const int64_t begin = g * group, end = std::min(m, begin + group);
        for (int64_t i = begin; i < end; ++i)
            for (int64_t j = 0; j < d; ++j) out[g * d + j] += x.values()[i * d + j];
        const T inv = T(1) / static_cast<T>(end - begin);
        for (int64_t j = 0; j < d; ++j) out[g * d + j] *= inv;
    }
    auto xn = x.node_;
    return detail::make_result<T>(
        {out_rows, d}, std::move(out), "pool_avg_rows", {&x},
        [xn, group, m, d, out_rows](detail::Node<T>* self) {
            return [xn, group, m, d, out_rows, self]() {
                if (!xn->needs_grad) return;
                xn->ensure_grad();
                for (int64_t g = 0; g < out_rows; ++g) {
                    const int64_t begin = g * group, end = std::min(m, begin + group);
                    const T inv = T(1) / static_cast<T>(end - begin);
                    for (int64_t i = begin; i < end; ++i)
                        for (int64_t j = 0; j < d; ++j)
                            xn->grad[i * d + j] += self->grad[g * d + j] * inv;
                }
            };
        });
}

// Columnwise max over consecutive groups of `group` rows. Gradient is routed
// to the first row attaining each max.
template <typename T>
Tensor<T> pool_max_rows(const Tensor<T>& x, int64_t group) {
    if (x.rank() != 2) throw ShapeError("pool_max_rows expects rank-2");
    if (group < 1) throw ValueError("pool_max_rows: group must be >= 1");
    const int64_t m = x.dim(0), d = x.dim(1);
    const int64_t out_rows = (m + group - 1) / group;
    std::vector<T> out(static_cast<size_t>(out_rows * d));
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out_rows * d));
    for (int64_t g = 0; g < out_rows; ++g) {
        const int64_t begin = g * group, end = std::min(m, begin + group);
        for (int64_t j = 0; j < d; ++j) {
            T best = x.values()[begin * d + j];
            int64_t best_i = begin;
            for (int64_t i = begin + 1; i < end; ++i) {
                const T v = x.values()[i * d + j];
                if (v > best) {
                    best = v;
                    best_i = i;
                }
            }
            out[g * d + j] = best;
            (*argmax)[g * d + j] = best_i;
        }
    }
    auto xn = x.node_;
    return detail::make_result<T>(
        {out_rows, d}, std::move(out), "pool_max_rows", {&x},
        [xn, argmax, d, out_rows](detail::Node<T>* self) {
            return [xn, argmax, d, out_rows, self]() {
                if (!xn->needs_grad) return;
                xn->ensure_grad();
                for (int64_t g = 0; g < out_rows; ++g)
                    for (int64_t j = 0; j < d; ++j)
                        xn->grad[(*argmax)[g * d + j] * d + j] += self->grad[g * d + j];
            };
        });
}

// Mean over contiguous row segments given by their lengths (sum == rows).
template <typename T>
Tensor<T> segment_mean_rows(const Tensor<T>& x, std::vector<int64_t> seg_lens) {
    if (x.rank() != 2) throw ShapeError("segment_mean_rows expects rank-2");
    const int64_t m = x.dim(0), d = x.dim(1);
    int64_t covered = 0;
    for (int64_t len : seg_lens) {
        if (len < 1) throw ValueError("segment_mean_rows: empty segment");
        covered += len;
    }
    if (covered != m) throw ShapeError("segment_mean_rows: segments do not cover all rows");

    const int64_t out_rows = static_cast<int64_t>(seg_lens.size());
    std::vector<T> out(static_cast<size_t>(out_rows * d), T(0));
    int64_t at = 0;
    for (int64_t g = 0; g < out_rows; ++g) {
        for (int64_t i = 0; i < seg_lens[g]; ++i)
            for (int64_t j = 0; j < d; ++j) out[g * d + j] += x.values()[(at + i) * d + j];
        const T inv = T(1) / static_cast<T>(seg_lens[g]);
        for (int64_t j = 0; j < d; ++j) out[g * d + j] *= inv;
        at += seg_lens[g];
    }
    auto xn = x.node_;
    return detail::make_result<T>(
        {out_rows, d}, std::move(out), "segment_mean_rows", {&x},
        [xn, seg_lens = std::move(seg_lens), d](detail::Node<T>* self) {
            return [xn, seg_lens, d, self]() {
                if (!xn->needs_grad) return;
                xn->ensure_grad();
                int64_t at = 0;
                for (size_t g = 0; g < seg_lens.size(); ++g) {
                    const T inv = T(1) / static_cast<T>(seg_lens[g]);
                    for (int64_t i = 0; i < seg_lens[g]; ++i)
                        for (int64_t j = 0; j < d; ++j)
                            xn->grad[(at + i) * d + j] +=
                                self->grad[static_cast<int64_t>(g) * d + j] * inv;
                    at += seg_lens[g];
                }
            };
        });
}

// ---------------------------------------------------------------------------
// Adaptive-moment parameter updates
// ---------------------------------------------------------------------------

template <typename T>
class AdamOptimizer {
public:
    struct Hyper {
        T lr = T(3e-4);
        T beta1 = T(0.9);
        T beta2 = T(0.999);
        T eps = T(1e-8);
    };

    AdamOptimizer(std::vector<Tensor<T>> params, Hyper hyper = {})
        : params_(std::move(params)), hyper_(hyper) {
        for (const auto& p : params_) {
            if (!p.requires_grad()) throw ValueError("optimizer given a non-parameter tensor");
            m_.emplace_back(p.size(), T(0));
            v_.emplace_back(p.size(), T(0));
        }
    }

    void step() {
        ++t_;
        const T bc1 = T(1) - std::pow(hyper_.beta1, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(hyper_.beta2, static_cast<T>(t_));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            auto& p = params_[pi];
            auto vals = p.values_mut();
            const bool has_grad = p.has_grad();
            for (int64_t i = 0; i < p.size(); ++i) {
                const T g = has_grad ? p.grad()[i] : T(0);
                m_[pi][i] = hyper_.beta1 * m_[pi][i] + (T(1) - hyper_.beta1) * g;
                v_[pi][i] = hyper_.beta2 * v_[pi][i] + (T(1) - hyper_.beta2) * g * g;
                const T mhat = m_[pi][i] / bc1;
                const T vhat = v_[pi][i] / bc2;
                vals[i] -= hyper_.lr * mhat / (std::sqrt(vhat) + hyper_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void set_lr(T lr) { hyper_.lr = lr; }
    int64_t step_count() const { return t_; }

private:
    std::vector<Tensor<T>> params_;
    Hyper hyper_;
    std::vector<std::vector<T>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace sstlm
