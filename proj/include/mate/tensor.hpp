// Copyright 2026 MATE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with tape-based reverse-mode automatic
// differentiation. Every operation the encoders and losses need is provided
// here; recording happens per forward pass and backward() replays the tape
// in reverse creation order.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "mate/error.hpp"

namespace mate {

using Shape = std::vector<std::size_t>;

namespace detail {
inline thread_local bool grad_enabled = true;
inline thread_local std::uint64_t seq_counter = 0;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}
}  // namespace detail

/// RAII guard that disables tape recording on the current thread.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_recording_enabled() { return detail::grad_enabled; }

/// Value handle onto a graph node. Copies are shallow; values are immutable
/// after creation except for gradient accumulation (and the optimizer, which
/// is the single writer of parameter leaves between steps).
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;  // empty until populated
        bool requires_grad = false;
        std::uint64_t seq = 0;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backprop;  // absent on leaves

        void ensure_grad() {
            if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        }
    };
    using NodePtr = std::shared_ptr<Node>;

    Tensor() = default;

    // ---- factories ----

    static Tensor scalar(double v, bool requires_grad = false) {
        return leaf({1}, {v}, requires_grad);
    }

    static Tensor from_vector(std::vector<double> v, bool requires_grad = false) {
        Shape s{v.size()};
        return leaf(std::move(s), std::move(v), requires_grad);
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                         bool requires_grad = false) {
        if (v.size() != rows * cols) {
            throw DimensionError("matrix: data size " + std::to_string(v.size()) +
                                 " does not match " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
        }
        return leaf({rows, cols}, std::move(v), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> v(detail::shape_numel(shape), 0.0);
        return leaf(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, double fill, bool requires_grad = false) {
        std::vector<double> v(detail::shape_numel(shape), fill);
        return leaf(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor leaf(Shape shape, std::vector<double> value, bool requires_grad) {
        if (detail::shape_numel(shape) != value.size()) {
            throw DimensionError("tensor: shape " + detail::shape_str(shape) +
                                 " does not match data length " +
                                 std::to_string(value.size()));
        }
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        n->seq = ++detail::seq_counter;
        return Tensor(std::move(n));
    }

    /// Recorded operation result. Parents and the backward rule are kept only
    /// when recording is on and some input needs gradients.
    static Tensor op(Shape shape, std::vector<double> value,
                     const std::vector<Tensor>& inputs,
                     std::function<void(Node&)> backprop) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(value);
        n->seq = ++detail::seq_counter;
        bool needs = false;
        if (detail::grad_enabled) {
            for (const auto& t : inputs) needs = needs || t.requires_grad();
        }
        if (needs) {
            n->requires_grad = true;
            n->parents.reserve(inputs.size());
            for (const auto& t : inputs) n->parents.push_back(t.n_);
            n->backprop = std::move(backprop);
        }
        return Tensor(std::move(n));
    }

    // ---- accessors ----

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::size_t ndim() const { return n_->shape.size(); }
    std::size_t size() const { return n_->value.size(); }
    std::size_t rows() const { return n_->shape.at(0); }
    std::size_t cols() const { return n_->shape.at(1); }

    const std::vector<double>& value() const { return n_->value; }
    double at(std::size_t i) const { return n_->value.at(i); }
    double at(std::size_t r, std::size_t c) const {
        return n_->value.at(r * cols() + c);
    }
    double item() const {
        if (size() != 1) {
            throw UsageError("item: tensor has shape " + detail::shape_str(shape()));
        }
        return n_->value[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (n_->grad.empty()) throw UsageError("grad: no gradient populated");
        return n_->grad;
    }
    void zero_grad() { n_->grad.clear(); }

    /// Mutable access to leaf values; the optimizer is the intended caller.
    std::vector<double>& mutable_values() { return n_->value; }
    std::vector<double>& mutable_grad() {
        n_->ensure_grad();
        return n_->grad;
    }

    /// Value copy cut loose from the tape.
    Tensor detach() const { return leaf(n_->shape, n_->value, false); }

    bool same_node(const Tensor& other) const { return n_ == other.n_; }
    Node* node() const { return n_.get(); }

private:
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}
    NodePtr n_;
};

inline bool all_finite(const Tensor& t) {
    for (double v : t.value()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

namespace detail {
inline void check_same_shape(const char* op_name, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op_name) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

inline void accumulate(Tensor::Node& parent, const double* g, std::size_t n) {
    if (!parent.requires_grad) return;
    parent.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) parent.grad[i] += g[i];
}
}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("add", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    return Tensor::op(a.shape(), std::move(out), {a, b}, [](Tensor::Node& n) {
        detail::accumulate(*n.parents[0], n.grad.data(), n.grad.size());
        detail::accumulate(*n.parents[1], n.grad.data(), n.grad.size());
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    return Tensor::op(a.shape(), std::move(out), {a, b}, [](Tensor::Node& n) {
        detail::accumulate(*n.parents[0], n.grad.data(), n.grad.size());
        auto& pb = *n.parents[1];
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    return Tensor::op(a.shape(), std::move(out), {a, b}, [](Tensor::Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pa.grad[i] += n.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pb.grad[i] += n.grad[i] * pa.value[i];
        }
    });
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
    return Tensor::op(a.shape(), std::move(out), {a}, [c](Tensor::Node& n) {
        auto& pa = *n.parents[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * c;
        }
    });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c;
    return Tensor::op(a.shape(), std::move(out), {a}, [](Tensor::Node& n) {
        detail::accumulate(*n.parents[0], n.grad.data(), n.grad.size());
    });
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.at(i));
    return Tensor::op(a.shape(), std::move(out), {a}, [](Tensor::Node& n) {
        auto& pa = *n.parents[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pa.grad[i] += n.grad[i] * n.value[i];
        }
    });
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.at(i));
    return Tensor::op(a.shape(), std::move(out), {a}, [](Tensor::Node& n) {
        auto& pa = *n.parents[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pa.grad[i] += n.grad[i] / pa.value[i];
        }
    });
}

inline Tensor tanh(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.at(i));
    return Tensor::op(a.shape(), std::move(out), {a}, [](Tensor::Node& n) {
        auto& pa = *n.parents[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pa.grad[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
        }
    });
}

inline Tensor sqrt(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a.at(i));
    return Tensor::op(a.shape(), std::move(out), {a}, [](Tensor::Node& n) {
        auto& pa = *n.parents[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                pa.grad[i] += n.grad[i] * 0.5 / n.value[i];
        }
    });
}

/// softplus(x) = ln(1 + e^x), evaluated in the overflow-free form.
inline Tensor softplus(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.at(i);
        out[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    }
    return Tensor::op(a.shape(), std::move(out), {a}, [](Tensor::Node& n) {
        auto& pa = *n.parents[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                const double x = pa.value[i];
                const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                          : std::exp(x) / (1.0 + std::exp(x));
                pa.grad[i] += n.grad[i] * sig;
            }
        }
    });
}

/// max(x, floor) with zero gradient below the floor.
inline Tensor clamp_min(const Tensor& a, double floor) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.at(i), floor);
    return Tensor::op(a.shape(), std::move(out), {a}, [floor](Tensor::Node& n) {
        auto& pa = *n.parents[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                if (pa.value[i] > floor) pa.grad[i] += n.grad[i];
            }
        }
    });
}

// ---- reductions ----

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.value()) s += v;
    return Tensor::op({1}, {s}, {a}, [](Tensor::Node& n) {
        auto& pa = *n.parents[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += n.grad[0];
        }
    });
}

inline Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double v : a.value()) s += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    return Tensor::op({1}, {s * inv}, {a}, [inv](Tensor::Node& n) {
        auto& pa = *n.parents[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < pa.grad.size(); ++i)
                pa.grad[i] += n.grad[0] * inv;
        }
    });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 1 || b.ndim() != 1) {
        throw DimensionError("dot: expects two vectors, got " +
                             detail::shape_str(a.shape()) + " and " +
                             detail::shape_str(b.shape()));
    }
    detail::check_same_shape("dot", a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i) * b.at(i);
    return Tensor::op({1}, {s}, {a, b}, [](Tensor::Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        const double g = n.grad[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < pa.grad.size(); ++i)
                pa.grad[i] += g * pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < pb.grad.size(); ++i)
                pb.grad[i] += g * pa.value[i];
        }
    });
}

// ---- matrix ops ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul: incompatible shapes " +
                             detail::shape_str(a.shape()) + " and " +
                             detail::shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            const double av = a.at(i, l);
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b.at(l, j);
        }
    }
    return Tensor::op({m, n}, std::move(out), {a, b}, [m, k, n](Tensor::Node& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        if (pa.requires_grad) {  // da = g . b^T
            pa.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t l = 0; l < k; ++l) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        s += nd.grad[i * n + j] * pb.value[l * n + j];
                    pa.grad[i * k + l] += s;
                }
        }
        if (pb.requires_grad) {  // db = a^T . g
            pb.ensure_grad();
            for (std::size_t l = 0; l < k; ++l)
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < m; ++i)
                        s += pa.value[i * k + l] * nd.grad[i * n + j];
                    pb.grad[l * n + j] += s;
                }
        }
    });
}

/// Row vector times matrix: [n] . [n x k] -> [k].
inline Tensor vecmat(const Tensor& x, const Tensor& w) {
    if (x.ndim() != 1 || w.ndim() != 2 || x.size() != w.rows()) {
        throw DimensionError("vecmat: incompatible shapes " +
                             detail::shape_str(x.shape()) + " and " +
                             detail::shape_str(w.shape()));
    }
    const std::size_t n = x.size(), k = w.cols();
    std::vector<double> out(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double xv = x.at(i);
        for (std::size_t j = 0; j < k; ++j) out[j] += xv * w.at(i, j);
    }
    return Tensor::op({k}, std::move(out), {x, w}, [n, k](Tensor::Node& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < k; ++j)
                    s += nd.grad[j] * pw.value[i * k + j];
                px.grad[i] += s;
            }
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double xv = px.value[i];
                for (std::size_t j = 0; j < k; ++j)
                    pw.grad[i * k + j] += xv * nd.grad[j];
            }
        }
    });
}

/// Matrix times column vector: [r x c] . [c] -> [r].
inline Tensor matvec(const Tensor& w, const Tensor& x) {
    if (w.ndim() != 2 || x.ndim() != 1 || w.cols() != x.size()) {
        throw DimensionError("matvec: incompatible shapes " +
                             detail::shape_str(w.shape()) + " and " +
                             detail::shape_str(x.shape()));
    }
    const std::size_t r = w.rows(), c = w.cols();
    std::vector<double> out(r, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += w.at(i, j) * x.at(j);
        out[i] = s;
    }
    return Tensor::op({r}, std::move(out), {w, x}, [r, c](Tensor::Node& nd) {
        auto& pw = *nd.parents[0];
        auto& px = *nd.parents[1];
        if (pw.requires_grad) {
            pw.ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    pw.grad[i * c + j] += nd.grad[i] * px.value[j];
        }
        if (px.requires_grad) {
            px.ensure_grad();
            for (std::size_t j = 0; j < c; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < r; ++i)
                    s += nd.grad[i] * pw.value[i * c + j];
                px.grad[j] += s;
            }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) {
        throw DimensionError("transpose: expects a matrix, got " +
                             detail::shape_str(a.shape()));
    }
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i, j);
    return Tensor::op({c, r}, std::move(out), {a}, [r, c](Tensor::Node& nd) {
        auto& pa = *nd.parents[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    pa.grad[i * c + j] += nd.grad[j * r + i];
        }
    });
}

// ---- structural ops ----

/// Leading d entries of a vector. Backward scatters into the leading
/// dimensions and leaves the rest untouched.
inline Tensor slice_prefix(const Tensor& x, std::size_t d) {
    if (x.ndim() != 1) {
        throw DimensionError("slice_prefix: expects a vector, got " +
                             detail::shape_str(x.shape()));
    }
    if (d < 1 || d > x.size()) {
        throw ParameterError("slice_prefix: d=" + std::to_string(d) +
                             " outside [1, " + std::to_string(x.size()) + "]");
    }
    std::vector<double> out(x.value().begin(), x.value().begin() + d);
    return Tensor::op({d}, std::move(out), {x}, [d](Tensor::Node& nd) {
        auto& pa = *nd.parents[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < d; ++i) pa.grad[i] += nd.grad[i];
        }
    });
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 1 || b.ndim() != 1) {
        throw DimensionError("concat: expects vectors, got " +
                             detail::shape_str(a.shape()) + " and " +
                             detail::shape_str(b.shape()));
    }
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.value().begin(), a.value().end());
    out.insert(out.end(), b.value().begin(), b.value().end());
    const std::size_t na = a.size();
    return Tensor::op({a.size() + b.size()}, std::move(out), {a, b},
                      [na](Tensor::Node& nd) {
                          auto& pa = *nd.parents[0];
                          auto& pb = *nd.parents[1];
                          if (pa.requires_grad) {
                              pa.ensure_grad();
                              for (std::size_t i = 0; i < na; ++i)
                                  pa.grad[i] += nd.grad[i];
                          }
                          if (pb.requires_grad) {
                              pb.ensure_grad();
                              for (std::size_t i = 0; i < pb.grad.size(); ++i)
                                  pb.grad[i] += nd.grad[na + i];
                          }
                      });
}

/// Stack equal-length vectors into a matrix, one row per input.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ParameterError("stack_rows: empty input");
    const std::size_t d = rows[0].size();
    for (const auto& r : rows) {
        if (r.ndim() != 1 || r.size() != d) {
            throw DimensionError("stack_rows: all rows must be vectors of length " +
                                 std::to_string(d));
        }
    }
    std::vector<double> out;
    out.reserve(rows.size() * d);
    for (const auto& r : rows)
        out.insert(out.end(), r.value().begin(), r.value().end());
    return Tensor::op({rows.size(), d}, std::move(out), rows, [d](Tensor::Node& nd) {
        for (std::size_t r = 0; r < nd.parents.size(); ++r) {
            auto& p = *nd.parents[r];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t j = 0; j < d; ++j) p.grad[j] += nd.grad[r * d + j];
        }
    });
}

/// Row i of a matrix as a vector (embedding-table lookup).
inline Tensor select_row(const Tensor& m, std::size_t i) {
    if (m.ndim() != 2) {
        throw DimensionError("select_row: expects a matrix, got " +
                             detail::shape_str(m.shape()));
    }
    if (i >= m.rows()) {
        throw ParameterError("select_row: row " + std::to_string(i) +
                             " out of range [0, " + std::to_string(m.rows()) + ")");
    }
    const std::size_t c = m.cols();
    std::vector<double> out(m.value().begin() + i * c,
                            m.value().begin() + (i + 1) * c);
    return Tensor::op({c}, std::move(out), {m}, [i, c](Tensor::Node& nd) {
        auto& pm = *nd.parents[0];
        if (pm.requires_grad) {
            pm.ensure_grad();
            for (std::size_t j = 0; j < c; ++j) pm.grad[i * c + j] += nd.grad[j];
        }
    });
}

/// Column means of a [T x D] matrix -- mean pooling over the time axis.
inline Tensor mean_rows(const Tensor& m) {
    if (m.ndim() != 2) {
        throw DimensionError("mean_rows: expects a matrix, got " +
                             detail::shape_str(m.shape()));
    }
    const std::size_t t = m.rows(), d = m.cols();
    std::vector<double> out(d, 0.0);
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t j = 0; j < d; ++j) out[j] += m.at(r, j);
    const double inv = 1.0 / static_cast<double>(t);
    for (double& v : out) v *= inv;
    return Tensor::op({d}, std::move(out), {m}, [t, d, inv](Tensor::Node& nd) {
        auto& pm = *nd.parents[0];
        if (pm.requires_grad) {
            pm.ensure_grad();
            for (std::size_t r = 0; r < t; ++r)
                for (std::size_t j = 0; j < d; ++j)
                    pm.grad[r * d + j] += nd.grad[j] * inv;
        }
    });
}

// ---- normalization and softmax ----

/// Temperature-softened softmax of a vector, max-subtracted for stability.
inline Tensor softmax(const Tensor& x, double temperature) {
    if (x.ndim() != 1) {
        throw DimensionError("softmax: expects a vector, got " +
                             detail::shape_str(x.shape()));
    }
    if (!(temperature > 0.0)) {
        throw ParameterError("softmax: temperature must be positive, got " +
                             std::to_string(temperature));
    }
    if (!all_finite(x)) throw NumericError("softmax: non-finite input");
    const std::size_t n = x.size();
    std::vector<double> out(n);
    double mx = x.at(0);
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x.at(i));
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp((x.at(i) - mx) / temperature);
        z += out[i];
    }
    for (double& v : out) v /= z;
    const double inv_t = 1.0 / temperature;
    return Tensor::op({n}, std::move(out), {x}, [inv_t](Tensor::Node& nd) {
        auto& px = *nd.parents[0];
        if (px.requires_grad) {
            px.ensure_grad();
            double gy = 0.0;
            for (std::size_t i = 0; i < nd.grad.size(); ++i)
                gy += nd.grad[i] * nd.value[i];
            for (std::size_t i = 0; i < nd.grad.size(); ++i)
                px.grad[i] += inv_t * nd.value[i] * (nd.grad[i] - gy);
        }
    });
}

/// Per-row temperature-softened softmax of a matrix.
inline Tensor softmax_rows(const Tensor& m, double temperature) {
    if (m.ndim() != 2) {
        throw DimensionError("softmax_rows: expects a matrix, got " +
                             detail::shape_str(m.shape()));
    }
    if (!(temperature > 0.0)) {
        throw ParameterError("softmax_rows: temperature must be positive");
    }
    if (!all_finite(m)) throw NumericError("softmax_rows: non-finite input");
    const std::size_t r = m.rows(), c = m.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        double mx = m.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, m.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = std::exp((m.at(i, j) - mx) / temperature);
            z += out[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
    }
    const double inv_t = 1.0 / temperature;
    return Tensor::op({r, c}, std::move(out), {m}, [r, c, inv_t](Tensor::Node& nd) {
        auto& pm = *nd.parents[0];
        if (pm.requires_grad) {
            pm.ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                double gy = 0.0;
                for (std::size_t j = 0; j < c; ++j)
                    gy += nd.grad[i * c + j] * nd.value[i * c + j];
                for (std::size_t j = 0; j < c; ++j)
                    pm.grad[i * c + j] +=
                        inv_t * nd.value[i * c + j] * (nd.grad[i * c + j] - gy);
            }
        }
    });
}

inline Tensor l2_normalize(const Tensor& x, double eps = 1e-12) {
    if (x.ndim() != 1) {
        throw DimensionError("l2_normalize: expects a vector, got " +
                             detail::shape_str(x.shape()));
    }
    double sq = 0.0;
    for (double v : x.value()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!(norm > eps)) {
        throw NumericError("l2_normalize: norm " + std::to_string(norm) +
                           " at or below epsilon " + std::to_string(eps));
    }
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) / norm;
    return Tensor::op(x.shape(), std::move(out), {x}, [norm](Tensor::Node& nd) {
        auto& px = *nd.parents[0];
        if (px.requires_grad) {
            px.ensure_grad();
            double gy = 0.0;
            for (std::size_t i = 0; i < nd.grad.size(); ++i)
                gy += nd.grad[i] * nd.value[i];
            for (std::size_t i = 0; i < nd.grad.size(); ++i)
                px.grad[i] += (nd.grad[i] - nd.value[i] * gy) / norm;
        }
    });
}

/// Per-column std over the time axis, with a variance floor keeping the
/// gradient finite when a column is constant.
inline Tensor std_rows(const Tensor& m, double var_eps = 1e-8) {
    const Tensor mu = mean_rows(m);
    const Tensor ex2 = mean_rows(mul(m, m));
    return sqrt(clamp_min(sub(ex2, mul(mu, mu)), var_eps));
}

// ---- backward ----

/// Reverse pass from a scalar root. Populates grad for every reachable
/// tensor that requires gradients; leaf gradients accumulate across calls.
inline void backward(const Tensor& root) {
    if (root.size() != 1) {
        throw UsageError("backward: root must be scalar, got shape " +
                         detail::shape_str(root.shape()));
    }
    if (!root.requires_grad()) return;

    std::vector<Tensor::Node*> order;
    std::unordered_set<Tensor::Node*> seen;
    std::vector<Tensor::Node*> stack{root.node()};
    seen.insert(root.node());
    while (!stack.empty()) {
        Tensor::Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second)
                stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const Tensor::Node* a, const Tensor::Node* b) { return a->seq < b->seq; });

    for (Tensor::Node* n : order) {
        n->ensure_grad();
        if (n->backprop) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    root.node()->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop(**it);
    }
}

}  // namespace mate
