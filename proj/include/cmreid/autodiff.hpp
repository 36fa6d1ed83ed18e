#pragma once

// Tensor-level reverse-mode differentiation.
//
// A Tape records every primitive applied during a forward pass as a node
// holding its value and a closure that pushes the node's output gradient back
// onto its inputs. Nodes are appended in evaluation order, so reverse index
// order is a valid topological order for the backward sweep.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmreid/error.hpp"
#include "cmreid/tensor.hpp"

namespace cmreid::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid as long as its tape lives.
class Var {
public:
    Var() = default;

    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

    inline const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    double item() const { return value().item(); }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf whose gradient is tracked.
    Var variable(Tensor value) { return push(std::move(value), true, nullptr); }

    /// Leaf with no gradient.
    Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

    /// Appends the result of a primitive. The node tracks gradients iff one of
    /// `inputs` does; otherwise `backward` is dropped.
    Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
    }

    Var record(Tensor value, std::span<const Var> inputs, Backward backward) {
        bool tracked = false;
        for (const Var& in : inputs) {
            check_owned(in);
            tracked = tracked || nodes_[in.id_].tracked;
        }
        return push(std::move(value), tracked, tracked ? std::move(backward) : nullptr);
    }

    const Tensor& value(Var v) const {
        check_owned(v);
        return nodes_[v.id_].value;
    }

    bool tracked(Var v) const {
        check_owned(v);
        return nodes_[v.id_].tracked;
    }

    /// Gradient accumulator of `v`, allocated on first use; nullptr when `v`
    /// does not track gradients.
    Tensor* grad_target(Var v) {
        check_owned(v);
        Node& n = nodes_[v.id_];
        if (!n.tracked) return nullptr;
        if (!n.has_grad) {
            n.grad = Tensor(n.value.shape(), 0.0);
            n.has_grad = true;
        }
        return &n.grad;
    }

    /// Gradient of the last backward root with respect to `v` (zeros when
    /// `v` did not influence the root).
    Tensor gradient(Var v) const {
        check_owned(v);
        const Node& n = nodes_[v.id_];
        return n.has_grad ? n.grad : Tensor(n.value.shape(), 0.0);
    }

    /// Runs the backward sweep from a single-element root, visiting every node
    /// at most once in reverse recording order.
    void backward(Var root) {
        check_owned(root);
        if (nodes_[root.id_].value.size() != 1) {
            throw DimensionError("backward root must be a single element, got shape " +
                                 shape_string(nodes_[root.id_].value.shape()));
        }
        for (Node& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor();
        }
        if (Tensor* g = grad_target(root)) (*g)[0] = 1.0;
        for (std::size_t i = root.id_ + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || !n.has_grad) continue;
            // Inputs always precede their consumer, so n.grad is not touched
            // while its own closure runs.
            n.backward(*this, n.grad);
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool tracked = false;
        bool has_grad = false;
        Backward backward;
    };

    Var push(Tensor value, bool tracked, Backward backward) {
        nodes_.push_back(Node{std::move(value), Tensor(), tracked, false, std::move(backward)});
        return Var(this, nodes_.size() - 1);
    }

    void check_owned(Var v) const {
        if (v.tape_ != this || v.id_ >= nodes_.size()) throw ParameterError("variable does not belong to this tape");
    }

    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const {
    if (!tape_) throw ParameterError("value() on an unbound variable");
    return tape_->value(*this);
}

namespace detail {

inline Tape& same_tape(Var a, Var b) {
    if (!a.valid() || a.tape() != b.tape()) throw ParameterError("operands live on different tapes");
    return *a.tape();
}

inline void add_into(Tensor& dst, const Tensor& src, double scale = 1.0) {
    double* d = dst.data();
    const double* s = src.data();
    for (std::size_t i = 0; i < dst.size(); ++i) d[i] += scale * s[i];
}

inline double sum_of(const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) s += v;
    return s;
}

// C(m,n) += A(m,k) * B(k,n)
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C(m,n) += A(m,k) * B(n,k)^T
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            c[i * n + j] += s;
        }
    }
}

// C(m,n) += A(k,m)^T * B(k,n)
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double api = ap[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

// Splits a rank-1 or rank-2 tensor into (rows, cols); rank-1 is one row.
inline std::pair<std::size_t, std::size_t> as_rows(const Shape& s, const char* op) {
    if (s.size() == 1) return {1, s[0]};
    if (s.size() == 2) return {s[0], s[1]};
    throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " + shape_string(s));
}

// Splits any tensor into (leading, last) where last is the trailing axis.
inline std::pair<std::size_t, std::size_t> split_last(const Shape& s) {
    const std::size_t last = s.back();
    return {shape_size(s) / last, last};
}

template <class Fwd, class Deriv>
Var elementwise(Var a, Fwd f, Deriv df) {
    Tape& tape = *a.tape();
    const Tensor& x = a.value();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return tape.record(Tensor(x.shape(), std::move(out)), {a}, [a, df](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        const Tensor& xv = t.value(a);
        for (std::size_t i = 0; i < xv.size(); ++i) (*ga)[i] += g[i] * df(xv[i]);
    });
}

enum class BinaryKind { add, sub, mul };

inline Var binary(Var a, Var b, BinaryKind kind, const char* op) {
    Tape& tape = same_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const bool a_scalar = x.size() == 1 && y.size() != 1;
    const bool b_scalar = y.size() == 1 && x.size() != 1;
    if (!a_scalar && !b_scalar) require_same_shape(x, y, op);
    const Shape& out_shape = a_scalar ? y.shape() : x.shape();
    const std::size_t n = shape_size(out_shape);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = x[a_scalar ? 0 : i];
        const double v = y[b_scalar ? 0 : i];
        out[i] = kind == BinaryKind::add ? u + v : kind == BinaryKind::sub ? u - v : u * v;
    }
    return tape.record(Tensor(out_shape, std::move(out)), {a, b},
                       [a, b, kind, a_scalar, b_scalar, n](Tape& t, const Tensor& g) {
                           const Tensor& xv = t.value(a);
                           const Tensor& yv = t.value(b);
                           if (Tensor* ga = t.grad_target(a)) {
                               for (std::size_t i = 0; i < n; ++i) {
                                   const double d = kind == BinaryKind::mul ? yv[b_scalar ? 0 : i] : 1.0;
                                   (*ga)[a_scalar ? 0 : i] += g[i] * d;
                               }
                           }
                           if (Tensor* gb = t.grad_target(b)) {
                               for (std::size_t i = 0; i < n; ++i) {
                                   const double d = kind == BinaryKind::mul ? xv[a_scalar ? 0 : i]
                                                    : kind == BinaryKind::sub ? -1.0
                                                                              : 1.0;
                                   (*gb)[b_scalar ? 0 : i] += g[i] * d;
                               }
                           }
                       });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Operands share a shape, or one of them is a single
// element that broadcasts.

inline Var add(Var a, Var b) { return detail::binary(a, b, detail::BinaryKind::add, "add"); }
inline Var sub(Var a, Var b) { return detail::binary(a, b, detail::BinaryKind::sub, "sub"); }
inline Var mul(Var a, Var b) { return detail::binary(a, b, detail::BinaryKind::mul, "mul"); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

inline Var scale(Var a, double c) {
    return detail::elementwise(a, [c](double x) { return c * x; }, [c](double) { return c; });
}

inline Var add_scalar(Var a, double c) {
    return detail::elementwise(a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

inline Var operator-(Var a) { return scale(a, -1.0); }

inline Var exp(Var a) {
    return detail::elementwise(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

inline Var log(Var a) {
    for (double v : a.value().values()) {
        if (!(v > 0.0)) throw DomainError("log of non-positive value");
    }
    return detail::elementwise(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

inline Var tanh(Var a) {
    return detail::elementwise(
        a, [](double x) { return std::tanh(x); },
        [](double x) {
            const double y = std::tanh(x);
            return 1.0 - y * y;
        });
}

/// max(x, 0) with subgradient 0 at x == 0.
inline Var clamp_nonneg(Var a) {
    return detail::elementwise(a, [](double x) { return x > 0.0 ? x : 0.0; },
                               [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping.

inline Var sum(Var a) {
    Tape& tape = *a.tape();
    return tape.record(Tensor::scalar(detail::sum_of(a.value())), {a}, [a](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_target(a)) {
            for (double& v : ga->values()) v += g[0];
        }
    });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Var reshape(Var a, Shape shape) {
    Tape& tape = *a.tape();
    return tape.record(a.value().reshaped(std::move(shape)), {a}, [a](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_target(a)) detail::add_into(*ga, g);
    });
}

/// Mean over the trailing axis: (..., n) -> (...). A rank-1 input yields a
/// single element.
inline Var mean_last(Var a) {
    Tape& tape = *a.tape();
    const Tensor& x = a.value();
    const auto [rows, n] = detail::split_last(x.shape());
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    if (out_shape.empty()) out_shape = {1};
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) out[r] += x[r * n + j];
        out[r] /= static_cast<double>(n);
    }
    return tape.record(Tensor(out_shape, std::move(out)), {a}, [a, rows, n](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const double share = g[r] / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) (*ga)[r * n + j] += share;
        }
    });
}

/// Repeats every element `n` times along a new trailing axis: (...) -> (..., n).
inline Var expand_last(Var a, std::size_t n) {
    if (n == 0) throw DimensionError("expand_last: count must be positive");
    Tape& tape = *a.tape();
    const Tensor& x = a.value();
    Shape out_shape = x.shape();
    out_shape.push_back(n);
    std::vector<double> out(x.size() * n);
    for (std::size_t r = 0; r < x.size(); ++r) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(r * n), n, x[r]);
    return tape.record(Tensor(out_shape, std::move(out)), {a}, [a, n](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        for (std::size_t r = 0; r < ga->size(); ++r) {
            for (std::size_t j = 0; j < n; ++j) (*ga)[r] += g[r * n + j];
        }
    });
}

/// Concatenates along axis 0; all trailing dimensions must agree.
inline Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no operands");
    Tape& tape = *parts.front().tape();
    const Shape& first = parts.front().shape();
    Shape out_shape = first;
    out_shape[0] = 0;
    std::vector<double> out;
    for (const Var& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
            throw DimensionError("concat_rows: trailing shape mismatch " + shape_string(s) + " vs " +
                                 shape_string(first));
        }
        out_shape[0] += s[0];
        const auto v = p.value().values();
        out.insert(out.end(), v.begin(), v.end());
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return tape.record(Tensor(out_shape, std::move(out)), parts, [inputs](Tape& t, const Tensor& g) {
        std::size_t offset = 0;
        for (const Var& p : inputs) {
            const std::size_t n = p.size();
            if (Tensor* gp = t.grad_target(p)) {
                for (std::size_t i = 0; i < n; ++i) (*gp)[i] += g[offset + i];
            }
            offset += n;
        }
    });
}

inline Var concat_rows(std::initializer_list<Var> parts) {
    return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

/// Rows [begin, end) along axis 0.
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    const Shape& s = a.shape();
    if (begin >= end || end > s[0]) {
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") out of bounds for " + shape_string(s));
    }
    Tape& tape = *a.tape();
    const std::size_t stride = a.size() / s[0];
    Shape out_shape = s;
    out_shape[0] = end - begin;
    const auto v = a.value().values();
    std::vector<double> out(v.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                            v.begin() + static_cast<std::ptrdiff_t>(end * stride));
    return tape.record(Tensor(out_shape, std::move(out)), {a}, [a, begin, stride](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_target(a)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[begin * stride + i] += g[i];
        }
    });
}

/// Selects rows along axis 0 (indices may repeat).
inline Var gather_rows(Var a, std::vector<std::size_t> rows) {
    const Shape& s = a.shape();
    if (rows.empty()) throw DimensionError("gather_rows: empty index list");
    for (std::size_t r : rows) {
        if (r >= s[0]) throw DimensionError("gather_rows: index " + std::to_string(r) + " out of bounds");
    }
    Tape& tape = *a.tape();
    const std::size_t stride = a.size() / s[0];
    Shape out_shape = s;
    out_shape[0] = rows.size();
    std::vector<double> out;
    out.reserve(rows.size() * stride);
    const auto v = a.value().values();
    for (std::size_t r : rows) out.insert(out.end(), v.begin() + static_cast<std::ptrdiff_t>(r * stride),
                                          v.begin() + static_cast<std::ptrdiff_t>((r + 1) * stride));
    return tape.record(Tensor(out_shape, std::move(out)), {a},
                       [a, rows = std::move(rows), stride](Tape& t, const Tensor& g) {
                           Tensor* ga = t.grad_target(a);
                           if (!ga) return;
                           for (std::size_t i = 0; i < rows.size(); ++i) {
                               for (std::size_t j = 0; j < stride; ++j) (*ga)[rows[i] * stride + j] += g[i * stride + j];
                           }
                       });
}

// ---------------------------------------------------------------------------
// Linear algebra.

/// (m,k)x(k,n) -> (m,n), or batched (B,m,k)x(B,k,n) -> (B,m,n).
inline Var matmul(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const bool batched = sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0];
    if (!batched && !(sa.size() == 2 && sb.size() == 2)) {
        throw DimensionError("matmul: unsupported ranks " + shape_string(sa) + " x " + shape_string(sb));
    }
    const std::size_t batch = batched ? sa[0] : 1;
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t k = sa.back();
    const std::size_t n = sb.back();
    if (sb[sb.size() - 2] != k) {
        throw DimensionError("matmul: inner dimension mismatch " + shape_string(sa) + " x " + shape_string(sb));
    }
    std::vector<double> out(batch * m * n, 0.0);
    for (std::size_t q = 0; q < batch; ++q) {
        detail::gemm_nn(m, k, n, a.value().data() + q * m * k, b.value().data() + q * k * n, out.data() + q * m * n);
    }
    Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
    return tape.record(Tensor(out_shape, std::move(out)), {a, b}, [a, b, batch, m, k, n](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_target(a)) {
            for (std::size_t q = 0; q < batch; ++q) {
                detail::gemm_nt(m, n, k, g.data() + q * m * n, t.value(b).data() + q * k * n, ga->data() + q * m * k);
            }
        }
        if (Tensor* gb = t.grad_target(b)) {
            for (std::size_t q = 0; q < batch; ++q) {
                detail::gemm_tn(k, m, n, t.value(a).data() + q * m * k, g.data() + q * m * n, gb->data() + q * k * n);
            }
        }
    });
}

/// Swaps the two trailing axes of a rank-2 or rank-3 tensor.
inline Var transpose(Var a) {
    const Shape& s = a.shape();
    if (s.size() != 2 && s.size() != 3) throw DimensionError("transpose: expected rank 2 or 3, got " + shape_string(s));
    Tape& tape = *a.tape();
    const std::size_t batch = s.size() == 3 ? s[0] : 1;
    const std::size_t m = s[s.size() - 2];
    const std::size_t n = s.back();
    auto swap = [batch, m, n](const double* src, double* dst, bool accumulate) {
        for (std::size_t q = 0; q < batch; ++q) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    double& d = dst[q * m * n + j * m + i];
                    d = (accumulate ? d : 0.0) + src[q * m * n + i * n + j];
                }
            }
        }
    };
    std::vector<double> out(a.size());
    swap(a.value().data(), out.data(), false);
    Shape out_shape = s;
    std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
    return tape.record(Tensor(out_shape, std::move(out)), {a}, [a, batch, m, n](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        // g has the transposed layout (n, m); map it back onto (m, n).
        for (std::size_t q = 0; q < batch; ++q) {
            for (std::size_t j = 0; j < n; ++j) {
                for (std::size_t i = 0; i < m; ++i) (*ga)[q * m * n + i * n + j] += g[q * m * n + j * m + i];
            }
        }
    });
}

/// Adds a length-n bias to every trailing-axis slice of x (..., n).
inline Var add_bias(Var x, Var bias) {
    Tape& tape = detail::same_tape(x, bias);
    const auto [rows, n] = detail::split_last(x.shape());
    if (bias.shape() != Shape{n}) {
        throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                             shape_string(x.shape()));
    }
    std::vector<double> out(x.value().values().begin(), x.value().values().end());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bias.value()[j];
    }
    return tape.record(Tensor(x.shape(), std::move(out)), {x, bias}, [x, bias, rows, n](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_target(x)) detail::add_into(*gx, g);
        if (Tensor* gb = t.grad_target(bias)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[r * n + j];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Normalizers over the trailing axis.

inline Var softmax_last(Var a) {
    Tape& tape = *a.tape();
    const Tensor& x = a.value();
    const auto [rows, n] = detail::split_last(x.shape());
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (out[r * n + j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
    }
    Tensor y(x.shape(), std::move(out));
    return tape.record(y, {a}, [a, y, rows, n](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        if (!ga) return;
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) (*ga)[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
        }
    });
}

inline Var log_softmax_last(Var a) {
    Tape& tape = *a.tape();
    const Tensor& x = a.value();
    const auto [rows, n] = detail::split_last(x.shape());
    std::vector<double> out(x.size());
    std::vector<double> prob(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < n; ++j) {
            out[r * n + j] = xr[j] - lse;
            prob[r * n + j] = std::exp(out[r * n + j]);
        }
    }
    return tape.record(Tensor(x.shape(), std::move(out)), {a},
                       [a, prob = std::move(prob), rows, n](Tape& t, const Tensor& g) {
                           Tensor* ga = t.grad_target(a);
                           if (!ga) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                               double gs = 0.0;
                               for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
                               for (std::size_t j = 0; j < n; ++j) (*ga)[r * n + j] += g[r * n + j] - prob[r * n + j] * gs;
                           }
                       });
}

// ---------------------------------------------------------------------------
// Pairwise row measures: rank-1 operands count as a single row; (n,d) operands
// yield a length-n result.

inline constexpr double kCosineEps = 1e-12;

/// u.v / (|u||v| + eps) per row, value clipped to [-1, 1].
inline Var row_cosine(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "row_cosine");
    const auto [rows, d] = detail::as_rows(a.shape(), "row_cosine");
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* u = a.value().data() + r * d;
        const double* v = b.value().data() + r * d;
        double dot = 0.0, uu = 0.0, vv = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += u[j] * v[j];
            uu += u[j] * u[j];
            vv += v[j] * v[j];
        }
        out[r] = std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv) + kCosineEps), -1.0, 1.0);
    }
    return tape.record(Tensor(Shape{rows}, std::move(out)), {a, b}, [a, b, rows, d](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        Tensor* gb = t.grad_target(b);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* u = t.value(a).data() + r * d;
            const double* v = t.value(b).data() + r * d;
            double dot = 0.0, uu = 0.0, vv = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                dot += u[j] * v[j];
                uu += u[j] * u[j];
                vv += v[j] * v[j];
            }
            const double nu = std::sqrt(uu);
            const double nv = std::sqrt(vv);
            const double den = nu * nv + kCosineEps;
            const double gr = g[r];
            // d/du [u.v / (|u||v| + eps)] = v/den - (u.v) |v| u / (|u| den^2)
            const double cu = nu > 0.0 ? dot * nv / (nu * den * den) : 0.0;
            const double cv = nv > 0.0 ? dot * nu / (nv * den * den) : 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                if (ga) (*ga)[r * d + j] += gr * (v[j] / den - cu * u[j]);
                if (gb) (*gb)[r * d + j] += gr * (u[j] / den - cv * v[j]);
            }
        }
    });
}

/// |u - v|^2 per row.
inline Var row_sqdist(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "row_sqdist");
    const auto [rows, d] = detail::as_rows(a.shape(), "row_sqdist");
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = a.value()[r * d + j] - b.value()[r * d + j];
            out[r] += diff * diff;
        }
    }
    return tape.record(Tensor(Shape{rows}, std::move(out)), {a, b}, [a, b, rows, d](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        Tensor* gb = t.grad_target(b);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = 2.0 * g[r] * (t.value(a)[r * d + j] - t.value(b)[r * d + j]);
                if (ga) (*ga)[r * d + j] += diff;
                if (gb) (*gb)[r * d + j] -= diff;
            }
        }
    });
}

/// sqrt(|u - v|^2 + eps) per row; eps keeps the gradient finite at u == v.
inline Var row_distance(Var a, Var b, double eps = 1e-12) {
    Tape& tape = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "row_distance");
    const auto [rows, d] = detail::as_rows(a.shape(), "row_distance");
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = a.value()[r * d + j] - b.value()[r * d + j];
            out[r] += diff * diff;
        }
        out[r] = std::sqrt(out[r] + eps);
    }
    Tensor dist(Shape{rows}, std::move(out));
    return tape.record(dist, {a, b}, [a, b, dist, rows, d](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        Tensor* gb = t.grad_target(b);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = g[r] * (t.value(a)[r * d + j] - t.value(b)[r * d + j]) / dist[r];
                if (ga) (*ga)[r * d + j] += diff;
                if (gb) (*gb)[r * d + j] -= diff;
            }
        }
    });
}

/// Cosine similarity specialized to scalars, elementwise:
/// ab / (|a||b| + eps). Evaluates to the sign agreement of a and b, or ~0
/// when either is ~0.
inline Var scalar_cos(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "scalar_cos");
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a.value()[i], y = b.value()[i];
        out[i] = x * y / (std::abs(x) * std::abs(y) + kCosineEps);
    }
    return tape.record(Tensor(a.shape(), std::move(out)), {a, b}, [a, b, n](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        Tensor* gb = t.grad_target(b);
        for (std::size_t i = 0; i < n; ++i) {
            const double x = t.value(a)[i], y = t.value(b)[i];
            const double den = std::abs(x) * std::abs(y) + kCosineEps;
            // d/dx = y eps / den^2, d/dy = x eps / den^2
            const double c = g[i] * kCosineEps / (den * den);
            if (ga) (*ga)[i] += c * y;
            if (gb) (*gb)[i] += c * x;
        }
    });
}

// ---------------------------------------------------------------------------
// Generalized-mean pooling.

/// (B, P, C) feature maps, positions along axis 1 -> (B, C), with a learnable
/// single-element exponent p: y = (mean_i x_i^p)^(1/p) per channel.
inline Var gem_pool(Var x, Var p) {
    Tape& tape = detail::same_tape(x, p);
    const Shape& s = x.shape();
    if (s.size() != 3) throw DimensionError("gem_pool: expected (batch, positions, channels), got " + shape_string(s));
    if (p.size() != 1) throw DimensionError("gem_pool: exponent must be a single element");
    const double pv = p.item();
    if (!(pv >= 1.0)) throw ParameterError("gem_pool: exponent p must be >= 1, got " + std::to_string(pv));
    for (double v : x.value().values()) {
        if (v < 0.0) throw DomainError("gem_pool: negative input element " + std::to_string(v));
    }
    const std::size_t batch = s[0], positions = s[1], channels = s[2];
    std::vector<double> out(batch * channels);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            double m = 0.0;
            for (std::size_t i = 0; i < positions; ++i) m += std::pow(x.value()[(b * positions + i) * channels + c], pv);
            m /= static_cast<double>(positions);
            out[b * channels + c] = m > 0.0 ? std::pow(m, 1.0 / pv) : 0.0;
        }
    }
    Tensor y(Shape{batch, channels}, std::move(out));
    return tape.record(y, {x, p}, [x, p, y, batch, positions, channels](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_target(x);
        Tensor* gp = t.grad_target(p);
        const Tensor& xv = t.value(x);
        const double pv = t.value(p)[0];
        const double inv_n = 1.0 / static_cast<double>(positions);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < channels; ++c) {
                const double yc = y[b * channels + c];
                if (yc <= 0.0) continue;
                const double gc = g[b * channels + c];
                double m = 0.0, dm_dp = 0.0;
                for (std::size_t i = 0; i < positions; ++i) {
                    const double xi = xv[(b * positions + i) * channels + c];
                    if (xi <= 0.0) continue;
                    const double xp = std::pow(xi, pv);
                    m += xp;
                    dm_dp += xp * std::log(xi);
                }
                m *= inv_n;
                dm_dp *= inv_n;
                if (gx) {
                    // dy/dx_i = m^(1/p - 1) x_i^(p - 1) / P
                    const double lead = std::pow(m, 1.0 / pv - 1.0) * inv_n;
                    for (std::size_t i = 0; i < positions; ++i) {
                        const std::size_t k = (b * positions + i) * channels + c;
                        const double xi = xv[k];
                        if (xi > 0.0 || pv == 1.0) (*gx)[k] += gc * lead * std::pow(xi, pv - 1.0);
                    }
                }
                if (gp) {
                    // y = exp(ln(m) / p)  =>  dy/dp = y (dm/dp / (p m) - ln(m) / p^2)
                    (*gp)[0] += gc * yc * (dm_dp / (pv * m) - std::log(m) / (pv * pv));
                }
            }
        }
    });
}

}  // namespace cmreid::ad
