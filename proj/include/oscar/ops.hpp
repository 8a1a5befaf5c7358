#pragma once

// Differentiable primitives. Every op validates shapes, computes its value and,
// when any input requires a gradient, records a backward rule on the tape.
// Tensors are NCHW where spatial ops are concerned.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "oscar/tensor.hpp"

namespace oscar {

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const std::string& why) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(a) + " " + why);
}

struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> a_index;  // empty when a already has the output shape
    std::vector<std::size_t> b_index;
};

inline BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
    BroadcastPlan plan;
    std::size_t rank = std::max(a.size(), b.size());
    Shape pa(rank, 1), pb(rank, 1);
    std::copy(a.begin(), a.end(), pa.begin() + (rank - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + (rank - b.size()));
    plan.out.resize(rank);
    for (std::size_t d = 0; d < rank; ++d) {
        if (pa[d] == pb[d] || pb[d] == 1) {
            plan.out[d] = pa[d];
        } else if (pa[d] == 1) {
            plan.out[d] = pb[d];
        } else {
            shape_fail(op, a, b);
        }
    }
    auto strides_for = [&](const Shape& p) {
        std::vector<std::size_t> s(rank, 0);
        std::size_t acc = 1;
        for (std::size_t d = rank; d-- > 0;) {
            s[d] = p[d] == 1 ? 0 : acc;
            acc *= p[d];
        }
        return s;
    };
    std::size_t n = numel_of(plan.out);
    auto build = [&](const Shape& p, std::vector<std::size_t>& idx) {
        if (p == plan.out) return;
        auto stride = strides_for(p);
        idx.assign(n, 0);
        std::vector<std::size_t> counter(rank, 0);
        std::size_t offset = 0;
        for (std::size_t i = 0; i < n; ++i) {
            idx[i] = offset;
            for (std::size_t d = rank; d-- > 0;) {
                offset += stride[d];
                if (++counter[d] < plan.out[d]) break;
                offset -= stride[d] * counter[d];
                counter[d] = 0;
            }
        }
    };
    build(pa, plan.a_index);
    build(pb, plan.b_index);
    return plan;
}

// Elementwise binary op with broadcasting. Fwd(a, b) -> value,
// Da(a, b, out, g) and Db(...) give the local gradient contributions.
template <class Real, class Fwd, class Da, class Db>
BasicTensor<Real> binary_op(const char* name, const BasicTensor<Real>& a, const BasicTensor<Real>& b,
                            Fwd fwd, Da da, Db db) {
    auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(name, a.shape(), b.shape()));
    std::size_t n = numel_of(plan->out);
    std::vector<Real> out(n);
    auto av = a.data();
    auto bv = b.data();
    const bool ai = !plan->a_index.empty(), bi = !plan->b_index.empty();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = fwd(av[ai ? plan->a_index[i] : i], bv[bi ? plan->b_index[i] : i]);
    }
    return make_result<Real>(
        name, plan->out, std::move(out), {a, b}, [plan, da, db, ai, bi](Node<Real>& self) {
            const auto& av = self.inputs[0]->value;
            const auto& bv = self.inputs[1]->value;
            const auto& g = self.grad;
            Real* ga = input_grad(self, 0);
            Real* gb = input_grad(self, 1);
            for (std::size_t i = 0; i < g.size(); ++i) {
                std::size_t ia = ai ? plan->a_index[i] : i;
                std::size_t ib = bi ? plan->b_index[i] : i;
                if (ga) ga[ia] += da(av[ia], bv[ib], self.value[i], g[i]);
                if (gb) gb[ib] += db(av[ia], bv[ib], self.value[i], g[i]);
            }
        });
}

// Elementwise unary op; D(x, y, g) is the gradient contribution to x.
template <class Real, class Fwd, class D>
BasicTensor<Real> unary_op(const char* name, const BasicTensor<Real>& x, Fwd fwd, D d) {
    auto xv = x.data();
    std::vector<Real> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    return make_result<Real>(name, x.shape(), std::move(out), {x}, [d](Node<Real>& self) {
        Real* gx = input_grad(self, 0);
        if (!gx) return;
        const auto& xv = self.inputs[0]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += d(xv[i], self.value[i], self.grad[i]);
    });
}

// out[m x n] (+)= a[m x k] * b[k x n]; all row-major, no aliasing. Four
// output rows share each load of a b row; every out element still
// accumulates over p in order.
template <class Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* __restrict a, const Real* __restrict b,
             Real* __restrict out) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        Real* __restrict o0 = out + i * n;
        Real* __restrict o1 = o0 + n;
        Real* __restrict o2 = o1 + n;
        Real* __restrict o3 = o2 + n;
        for (std::size_t p = 0; p < k; ++p) {
            const Real a0 = a[i * k + p], a1 = a[(i + 1) * k + p], a2 = a[(i + 2) * k + p], a3 = a[(i + 3) * k + p];
            const Real* __restrict br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const Real bv = br[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        Real* __restrict orow = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = a[i * k + p];
            const Real* __restrict br = b + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * br[j];
        }
    }
}

// out[m x n] += a[m x k] * b[n x k]^T. Transposes b so the inner loop is the
// same contiguous axpy as gemm_nn (a dot-product form would not vectorize).
template <class Real>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* out) {
    thread_local std::vector<Real> bt;
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    gemm_nn(m, k, n, a, bt.data(), out);
}

// out[k x n] += a[m x k]^T * b[m x n]; same blocking as gemm_nn over the
// rows of out.
template <class Real>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* __restrict a, const Real* __restrict b,
             Real* __restrict out) {
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
        Real* __restrict o0 = out + p * n;
        Real* __restrict o1 = o0 + n;
        Real* __restrict o2 = o1 + n;
        Real* __restrict o3 = o2 + n;
        for (std::size_t i = 0; i < m; ++i) {
            const Real a0 = a[i * k + p], a1 = a[i * k + p + 1], a2 = a[i * k + p + 2], a3 = a[i * k + p + 3];
            const Real* __restrict br = b + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const Real bv = br[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
    }
    for (; p < k; ++p) {
        Real* __restrict orow = out + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const Real av = a[i * k + p];
            const Real* __restrict br = b + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * br[j];
        }
    }
}

struct ConvGeometry {
    std::size_t c, h, w, kh, kw, stride, pad, ho, wo;
    std::size_t k() const { return c * kh * kw; }
    std::size_t p() const { return ho * wo; }
    bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <class Real>
void im2col(const ConvGeometry& g, const Real* x, Real* col) {
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                Real* row = col + ((c * g.kh + i) * g.kw + j) * g.p();
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        long xx = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
                        bool inside = y >= 0 && xx >= 0 && y < static_cast<long>(g.h) && xx < static_cast<long>(g.w);
                        row[oy * g.wo + ox] = inside ? x[(c * g.h + y) * g.w + xx] : Real(0);
                    }
                }
            }
}

template <class Real>
void col2im(const ConvGeometry& g, const Real* col, Real* x) {
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                const Real* row = col + ((c * g.kh + i) * g.kw + j) * g.p();
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
                    if (y < 0 || y >= static_cast<long>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        long xx = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
                        if (xx < 0 || xx >= static_cast<long>(g.w)) continue;
                        x[(c * g.h + y) * g.w + xx] += row[oy * g.wo + ox];
                    }
                }
            }
}

}  // namespace detail

// ---- elementwise arithmetic (numpy broadcasting) ----

template <class Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    return detail::binary_op(
        "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real, Real, Real g) { return g; },
        [](Real, Real, Real, Real g) { return g; });
}

template <class Real>
BasicTensor<Real> sub(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    return detail::binary_op(
        "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real, Real, Real g) { return g; },
        [](Real, Real, Real, Real g) { return -g; });
}

template <class Real>
BasicTensor<Real> mul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    return detail::binary_op(
        "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y, Real, Real g) { return g * y; },
        [](Real x, Real, Real, Real g) { return g * x; });
}

template <class Real>
BasicTensor<Real> div(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    return detail::binary_op(
        "div", a, b, [](Real x, Real y) { return x / y; }, [](Real, Real y, Real, Real g) { return g / y; },
        [](Real, Real y, Real out, Real g) { return -g * out / y; });
}

template <class Real>
BasicTensor<Real> operator+(const BasicTensor<Real>& a, const BasicTensor<Real>& b) { return add(a, b); }
template <class Real>
BasicTensor<Real> operator-(const BasicTensor<Real>& a, const BasicTensor<Real>& b) { return sub(a, b); }
template <class Real>
BasicTensor<Real> operator*(const BasicTensor<Real>& a, const BasicTensor<Real>& b) { return mul(a, b); }
template <class Real>
BasicTensor<Real> operator/(const BasicTensor<Real>& a, const BasicTensor<Real>& b) { return div(a, b); }

template <class Real>
BasicTensor<Real> scale(const BasicTensor<Real>& x, double s) {
    const Real k = static_cast<Real>(s);
    return detail::unary_op(
        "scale", x, [k](Real v) { return k * v; }, [k](Real, Real, Real g) { return k * g; });
}

template <class Real>
BasicTensor<Real> add_scalar(const BasicTensor<Real>& x, double s) {
    const Real k = static_cast<Real>(s);
    return detail::unary_op(
        "add_scalar", x, [k](Real v) { return v + k; }, [](Real, Real, Real g) { return g; });
}

template <class Real>
BasicTensor<Real> neg(const BasicTensor<Real>& x) {
    return scale(x, -1.0);
}

template <class Real>
BasicTensor<Real> square(const BasicTensor<Real>& x) {
    return detail::unary_op(
        "square", x, [](Real v) { return v * v; }, [](Real v, Real, Real g) { return Real(2) * v * g; });
}

/// Square root; the gradient at exactly 0 is taken as 0 (subgradient choice).
template <class Real>
BasicTensor<Real> sqrt(const BasicTensor<Real>& x) {
    for (Real v : x.data())
        if (v < Real(0)) throw NumericError("sqrt: negative input");
    return detail::unary_op(
        "sqrt", x, [](Real v) { return std::sqrt(v); },
        [](Real, Real y, Real g) { return y > Real(0) ? g / (Real(2) * y) : Real(0); });
}

template <class Real>
BasicTensor<Real> log(const BasicTensor<Real>& x) {
    for (Real v : x.data())
        if (!(v > Real(0))) throw NumericError("log: non-positive input");
    return detail::unary_op(
        "log", x, [](Real v) { return std::log(v); }, [](Real v, Real, Real g) { return g / v; });
}

template <class Real>
BasicTensor<Real> exp(const BasicTensor<Real>& x) {
    return detail::unary_op(
        "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y, Real g) { return g * y; });
}

template <class Real>
BasicTensor<Real> sigmoid(const BasicTensor<Real>& x) {
    return detail::unary_op(
        "sigmoid", x, [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
        [](Real, Real y, Real g) { return g * y * (Real(1) - y); });
}

template <class Real>
BasicTensor<Real> silu(const BasicTensor<Real>& x) {
    return detail::unary_op(
        "silu", x, [](Real v) { return v / (Real(1) + std::exp(-v)); },
        [](Real v, Real, Real g) {
            Real s = Real(1) / (Real(1) + std::exp(-v));
            return g * s * (Real(1) + v * (Real(1) - s));
        });
}

/// log(1 + e^x), evaluated stably.
template <class Real>
BasicTensor<Real> softplus(const BasicTensor<Real>& x) {
    return detail::unary_op(
        "softplus", x,
        [](Real v) { return v > Real(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](Real v, Real, Real g) { return g / (Real(1) + std::exp(-v)); });
}

/// Clamp into [lo, hi]; zero gradient outside the interval.
template <class Real>
BasicTensor<Real> clamp(const BasicTensor<Real>& x, double lo, double hi) {
    const Real l = static_cast<Real>(lo), h = static_cast<Real>(hi);
    return detail::unary_op(
        "clamp", x, [l, h](Real v) { return std::min(std::max(v, l), h); },
        [l, h](Real v, Real, Real g) { return (v >= l && v <= h) ? g : Real(0); });
}

// ---- reductions (accumulated in double) ----

template <class Real>
BasicTensor<Real> sum(const BasicTensor<Real>& x) {
    double acc = 0.0;
    for (Real v : x.data()) acc += v;
    return detail::make_result<Real>("sum", {}, {static_cast<Real>(acc)}, {x}, [](detail::Node<Real>& self) {
        Real* gx = detail::input_grad(self, 0);
        if (!gx) return;
        const Real g = self.grad[0];
        for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) gx[i] += g;
    });
}

template <class Real>
BasicTensor<Real> mean(const BasicTensor<Real>& x) {
    if (x.numel() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Sum over one axis. keepdim retains it with size 1.
template <class Real>
BasicTensor<Real> sum_dim(const BasicTensor<Real>& x, std::size_t axis, bool keepdim = true) {
    const auto& s = x.shape();
    if (axis >= s.size()) detail::shape_fail("sum_dim", s, "has no axis " + std::to_string(axis));
    std::size_t outer = 1, inner = 1, len = s[axis];
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    Shape out_shape = s;
    if (keepdim) {
        out_shape[axis] = 1;
    } else {
        out_shape.erase(out_shape.begin() + static_cast<long>(axis));
    }
    std::vector<double> acc(outer * inner, 0.0);
    auto xv = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i) acc[o * inner + i] += xv[(o * len + l) * inner + i];
    std::vector<Real> out(acc.begin(), acc.end());
    return detail::make_result<Real>(
        "sum_dim", std::move(out_shape), std::move(out), {x}, [outer, inner, len](detail::Node<Real>& self) {
            Real* gx = detail::input_grad(self, 0);
            if (!gx) return;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t l = 0; l < len; ++l)
                    for (std::size_t i = 0; i < inner; ++i) gx[(o * len + l) * inner + i] += self.grad[o * inner + i];
        });
}

template <class Real>
BasicTensor<Real> mean_dim(const BasicTensor<Real>& x, std::size_t axis, bool keepdim = true) {
    auto len = x.shape().at(axis);
    return scale(sum_dim(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

template <class Real>
BasicTensor<Real> dot(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    if (a.shape() != b.shape()) detail::shape_fail("dot", a.shape(), b.shape());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a[i]) * b[i];
    return detail::make_result<Real>("dot", {}, {static_cast<Real>(acc)}, {a, b}, [](detail::Node<Real>& self) {
        const Real g = self.grad[0];
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (Real* ga = detail::input_grad(self, 0))
            for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * bv[i];
        if (Real* gb = detail::input_grad(self, 1))
            for (std::size_t i = 0; i < bv.size(); ++i) gb[i] += g * av[i];
    });
}

/// Euclidean norm of all elements; gradient x/|x| (zero at the origin).
template <class Real>
BasicTensor<Real> l2_norm(const BasicTensor<Real>& x) {
    double acc = 0.0;
    for (Real v : x.data()) acc += static_cast<double>(v) * v;
    const Real norm = static_cast<Real>(std::sqrt(acc));
    return detail::make_result<Real>("l2_norm", {}, {norm}, {x}, [](detail::Node<Real>& self) {
        Real* gx = detail::input_grad(self, 0);
        const Real n = self.value[0];
        if (!gx || n == Real(0)) return;
        const auto& xv = self.inputs[0]->value;
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[0] * xv[i] / n;
    });
}

/// Scalar sum of already-scalar terms with fixed weights, accumulated in double
/// and rounded once.
template <class Real>
BasicTensor<Real> weighted_sum(const std::vector<BasicTensor<Real>>& terms, const std::vector<double>& weights) {
    if (terms.size() != weights.size() || terms.empty()) throw ShapeError("weighted_sum: terms/weights mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i].numel() != 1) detail::shape_fail("weighted_sum", terms[i].shape(), "is not a scalar");
        acc += weights[i] * static_cast<double>(terms[i].item());
    }
    return detail::make_result<Real>("weighted_sum", {}, {static_cast<Real>(acc)}, terms,
                                     [weights](detail::Node<Real>& self) {
                                         for (std::size_t i = 0; i < weights.size(); ++i)
                                             if (Real* g = detail::input_grad(self, i))
                                                 g[0] += static_cast<Real>(weights[i]) * self.grad[0];
                                     });
}

// ---- shape ops ----

template <class Real>
BasicTensor<Real> reshape(const BasicTensor<Real>& x, Shape shape) {
    if (numel_of(shape) != x.numel()) detail::shape_fail("reshape", x.shape(), shape);
    return detail::make_result<Real>("reshape", std::move(shape), x.to_vector(), {x}, [](detail::Node<Real>& self) {
        Real* gx = detail::input_grad(self, 0);
        if (!gx) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    });
}

/// Swaps the last two axes.
template <class Real>
BasicTensor<Real> transpose(const BasicTensor<Real>& x) {
    const auto& s = x.shape();
    if (s.size() < 2) detail::shape_fail("transpose", s, "needs rank >= 2");
    std::size_t r = s[s.size() - 2], c = s[s.size() - 1], batch = x.numel() / (r * c);
    Shape out_shape = s;
    std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
    std::vector<Real> out(x.numel());
    auto xv = x.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = xv[b * r * c + i * c + j];
    return detail::make_result<Real>(
        "transpose", std::move(out_shape), std::move(out), {x}, [r, c, batch](detail::Node<Real>& self) {
            Real* gx = detail::input_grad(self, 0);
            if (!gx) return;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gx[b * r * c + i * c + j] += self.grad[b * r * c + j * r + i];
        });
}

/// Concatenates along `axis`; all other extents must agree.
template <class Real>
BasicTensor<Real> concat(const std::vector<BasicTensor<Real>>& xs, std::size_t axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = xs[0].shape();
    if (axis >= s0.size()) detail::shape_fail("concat", s0, "has no axis " + std::to_string(axis));
    std::size_t outer = 1, inner = 1, total = 0;
    for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
    std::vector<std::size_t> lens;
    for (const auto& t : xs) {
        const auto& s = t.shape();
        if (s.size() != s0.size()) detail::shape_fail("concat", s0, s);
        for (std::size_t d = 0; d < s.size(); ++d)
            if (d != axis && s[d] != s0[d]) detail::shape_fail("concat", s0, s);
        lens.push_back(s[axis]);
        total += s[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = total;
    std::vector<Real> out(outer * total * inner);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
        auto xv = xs[k].data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(xv.begin() + static_cast<long>(o * lens[k] * inner), lens[k] * inner,
                        out.begin() + static_cast<long>((o * total + offset) * inner));
        offset += lens[k];
    }
    return detail::make_result<Real>(
        "concat", std::move(out_shape), std::move(out), xs, [outer, inner, total, lens](detail::Node<Real>& self) {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < lens.size(); ++k) {
                if (Real* gx = detail::input_grad(self, k)) {
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < lens[k] * inner; ++i)
                            gx[o * lens[k] * inner + i] += self.grad[(o * total + offset) * inner + i];
                }
                offset += lens[k];
            }
        });
}

/// Nearest-neighbour upsampling of NCHW by an integer factor.
template <class Real>
BasicTensor<Real> upsample_nearest(const BasicTensor<Real>& x, std::size_t factor) {
    const auto& s = x.shape();
    if (s.size() != 4 || factor == 0) detail::shape_fail("upsample_nearest", s, "needs NCHW and factor >= 1");
    std::size_t planes = s[0] * s[1], h = s[2], w = s[3], H = h * factor, W = w * factor;
    std::vector<Real> out(planes * H * W);
    auto xv = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx)
                out[(p * H + y) * W + xx] = xv[(p * h + y / factor) * w + xx / factor];
    return detail::make_result<Real>(
        "upsample_nearest", {s[0], s[1], H, W}, std::move(out), {x},
        [planes, h, w, H, W, factor](detail::Node<Real>& self) {
            Real* gx = detail::input_grad(self, 0);
            if (!gx) return;
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t xx = 0; xx < W; ++xx)
                        gx[(p * h + y / factor) * w + xx / factor] += self.grad[(p * H + y) * W + xx];
        });
}

/// Edge-replicating spatial padding of NCHW by `pad` on every side.
template <class Real>
BasicTensor<Real> pad_replicate(const BasicTensor<Real>& x, std::size_t pad) {
    const auto& s = x.shape();
    if (s.size() != 4) detail::shape_fail("pad_replicate", s, "needs NCHW");
    std::size_t planes = s[0] * s[1], h = s[2], w = s[3], H = h + 2 * pad, W = w + 2 * pad;
    auto src = [=](std::size_t y, std::size_t xx) {
        std::size_t sy = std::min(h - 1, y < pad ? 0 : y - pad);
        std::size_t sx = std::min(w - 1, xx < pad ? 0 : xx - pad);
        return sy * w + sx;
    };
    std::vector<Real> out(planes * H * W);
    auto xv = x.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) out[(p * H + y) * W + xx] = xv[p * h * w + src(y, xx)];
    return detail::make_result<Real>("pad_replicate", {s[0], s[1], H, W}, std::move(out), {x},
                                     [planes, h, w, H, W, src](detail::Node<Real>& self) {
                                         Real* gx = detail::input_grad(self, 0);
                                         if (!gx) return;
                                         for (std::size_t p = 0; p < planes; ++p)
                                             for (std::size_t y = 0; y < H; ++y)
                                                 for (std::size_t xx = 0; xx < W; ++xx)
                                                     gx[p * h * w + src(y, xx)] += self.grad[(p * H + y) * W + xx];
                                     });
}

// ---- linear algebra and network primitives ----

/// [m,k] x [k,n] -> [m,n], or batched [b,m,k] x [b,k,n] -> [b,m,n].
template <class Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    bool batched = sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0];
    bool plain = sa.size() == 2 && sb.size() == 2;
    if (!(batched || plain) || sa[sa.size() - 1] != sb[sb.size() - 2]) detail::shape_fail("matmul", sa, sb);
    std::size_t batch = batched ? sa[0] : 1;
    std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1], n = sb[sb.size() - 1];
    std::vector<Real> out(batch * m * n, Real(0));
    for (std::size_t i = 0; i < batch; ++i)
        detail::gemm_nn(m, k, n, a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n);
    Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
    return detail::make_result<Real>(
        "matmul", std::move(out_shape), std::move(out), {a, b}, [batch, m, k, n](detail::Node<Real>& self) {
            const Real* av = self.inputs[0]->value.data();
            const Real* bv = self.inputs[1]->value.data();
            Real* ga = detail::input_grad(self, 0);
            Real* gb = detail::input_grad(self, 1);
            for (std::size_t i = 0; i < batch; ++i) {
                const Real* g = self.grad.data() + i * m * n;
                if (ga) detail::gemm_nt(m, n, k, g, bv + i * k * n, ga + i * m * k);
                if (gb) detail::gemm_tn(m, k, n, av + i * m * k, g, gb + i * k * n);
            }
        });
}

/// 2-D cross-correlation. x [N,C,H,W], weight [O,C,kh,kw], optional bias [O].
template <class Real>
BasicTensor<Real> conv2d(const BasicTensor<Real>& x, const BasicTensor<Real>& weight,
                         const BasicTensor<Real>& bias = {}, std::size_t stride = 1, std::size_t pad = 0) {
    const auto& sx = x.shape();
    const auto& sw = weight.shape();
    if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1] || stride == 0) detail::shape_fail("conv2d", sx, sw);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != sw[0])) detail::shape_fail("conv2d", sw, bias.shape());
    if (sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3]) detail::shape_fail("conv2d", sx, sw);
    detail::ConvGeometry g{sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad,
                           (sx[2] + 2 * pad - sw[2]) / stride + 1, (sx[3] + 2 * pad - sw[3]) / stride + 1};
    const std::size_t n = sx[0], o = sw[0], K = g.k(), P = g.p();
    std::vector<Real> out(n * o * P, Real(0));
    std::vector<Real> col(g.pointwise() ? 0 : K * P);
    const Real* wv = weight.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const Real* xi = x.data().data() + i * g.c * g.h * g.w;
        Real* oi = out.data() + i * o * P;
        if (bias.defined())
            for (std::size_t c = 0; c < o; ++c) std::fill_n(oi + c * P, P, bias[c]);
        const Real* cv = xi;
        if (!g.pointwise()) {
            detail::im2col(g, xi, col.data());
            cv = col.data();
        }
        detail::gemm_nn(o, K, P, wv, cv, oi);
    }
    std::vector<BasicTensor<Real>> inputs{x, weight};
    const bool has_bias = bias.defined();
    if (has_bias) inputs.push_back(bias);
    return detail::make_result<Real>(
        "conv2d", {n, o, g.ho, g.wo}, std::move(out), std::move(inputs),
        [g, n, o, K, P, has_bias](detail::Node<Real>& self) {
            const Real* xv = self.inputs[0]->value.data();
            const Real* wv = self.inputs[1]->value.data();
            Real* gx = detail::input_grad(self, 0);
            Real* gw = detail::input_grad(self, 1);
            Real* gb = has_bias ? detail::input_grad(self, 2) : nullptr;
            std::vector<Real> col(g.pointwise() ? 0 : K * P), dcol(gx && !g.pointwise() ? K * P : 0);
            const std::size_t in_sz = g.c * g.h * g.w;
            for (std::size_t i = 0; i < n; ++i) {
                const Real* gi = self.grad.data() + i * o * P;
                if (gb)
                    for (std::size_t c = 0; c < o; ++c)
                        for (std::size_t p = 0; p < P; ++p) gb[c] += gi[p + c * P];
                if (gw) {
                    const Real* cv = xv + i * in_sz;
                    if (!g.pointwise()) {
                        detail::im2col(g, cv, col.data());
                        cv = col.data();
                    }
                    detail::gemm_nt(o, P, K, gi, cv, gw);
                }
                if (gx) {
                    if (g.pointwise()) {
                        detail::gemm_tn(o, K, P, wv, gi, gx + i * in_sz);
                    } else {
                        std::fill(dcol.begin(), dcol.end(), Real(0));
                        detail::gemm_tn(o, K, P, wv, gi, dcol.data());
                        detail::col2im(g, dcol.data(), gx + i * in_sz);
                    }
                }
            }
        });
}

/// Group normalization with a single group: each sample is standardized over
/// (C,H,W), then scaled and shifted per channel by gamma/beta [C].
template <class Real>
BasicTensor<Real> group_norm(const BasicTensor<Real>& x, const BasicTensor<Real>& gamma,
                             const BasicTensor<Real>& beta, double eps = 1e-5) {
    const auto& s = x.shape();
    if (s.size() < 2) detail::shape_fail("group_norm", s, "needs rank >= 2");
    const std::size_t n = s[0], c = s[1], m = x.numel() / n, hw = m / c;
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) detail::shape_fail("group_norm", s, gamma.shape());
    std::vector<Real> out(x.numel());
    auto xhat = std::make_shared<std::vector<Real>>(x.numel());
    auto inv_std = std::make_shared<std::vector<Real>>(n);
    auto xv = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0, var = 0.0;
        for (std::size_t j = 0; j < m; ++j) mu += xv[i * m + j];
        mu /= static_cast<double>(m);
        for (std::size_t j = 0; j < m; ++j) {
            double d = xv[i * m + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(m);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = static_cast<Real>(is);
        for (std::size_t j = 0; j < m; ++j) {
            Real xh = static_cast<Real>((xv[i * m + j] - mu) * is);
            (*xhat)[i * m + j] = xh;
            std::size_t ch = j / hw;
            out[i * m + j] = xh * gamma[ch] + beta[ch];
        }
    }
    return detail::make_result<Real>(
        "group_norm", s, std::move(out), {x, gamma, beta}, [n, c, m, hw, xhat, inv_std](detail::Node<Real>& self) {
            const auto& gam = self.inputs[1]->value;
            Real* gx = detail::input_grad(self, 0);
            Real* gg = detail::input_grad(self, 1);
            Real* gbeta = detail::input_grad(self, 2);
            std::vector<Real> dxh(m);
            for (std::size_t i = 0; i < n; ++i) {
                const Real* g = self.grad.data() + i * m;
                const Real* xh = xhat->data() + i * m;
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t j = 0; j < m; ++j) {
                    std::size_t ch = j / hw;
                    if (gg) gg[ch] += g[j] * xh[j];
                    if (gbeta) gbeta[ch] += g[j];
                    dxh[j] = g[j] * gam[ch];
                    mean_d += dxh[j];
                    mean_dx += static_cast<double>(dxh[j]) * xh[j];
                }
                if (!gx) continue;
                mean_d /= static_cast<double>(m);
                mean_dx /= static_cast<double>(m);
                const Real is = (*inv_std)[i];
                for (std::size_t j = 0; j < m; ++j)
                    gx[i * m + j] += is * static_cast<Real>(dxh[j] - mean_d - xh[j] * mean_dx);
            }
            (void)c;
        });
}

/// Softmax over the last axis.
template <class Real>
BasicTensor<Real> softmax(const BasicTensor<Real>& x) {
    const auto& s = x.shape();
    if (s.empty()) detail::shape_fail("softmax", s, "needs rank >= 1");
    const std::size_t len = s.back(), rows = x.numel() / len;
    std::vector<Real> out(x.numel());
    auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* in = xv.data() + r * len;
        Real* o = out.data() + r * len;
        Real mx = *std::max_element(in, in + len);
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
            o[j] = std::exp(in[j] - mx);
            z += o[j];
        }
        for (std::size_t j = 0; j < len; ++j) o[j] = static_cast<Real>(o[j] / z);
    }
    return detail::make_result<Real>("softmax", s, std::move(out), {x}, [rows, len](detail::Node<Real>& self) {
        Real* gx = detail::input_grad(self, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const Real* y = self.value.data() + r * len;
            const Real* g = self.grad.data() + r * len;
            double dotp = 0.0;
            for (std::size_t j = 0; j < len; ++j) dotp += static_cast<double>(g[j]) * y[j];
            for (std::size_t j = 0; j < len; ++j) gx[r * len + j] += y[j] * static_cast<Real>(g[j] - dotp);
        }
    });
}

/// Forward value of `quantized`, backward identity into `features`
/// (straight-through estimator). `quantized` never receives a gradient.
template <class Real>
BasicTensor<Real> straight_through(const BasicTensor<Real>& features, const BasicTensor<Real>& quantized) {
    if (features.shape() != quantized.shape()) detail::shape_fail("straight_through", features.shape(), quantized.shape());
    return detail::make_result<Real>("straight_through", features.shape(), quantized.to_vector(), {features},
                                     [](detail::Node<Real>& self) {
                                         Real* gx = detail::input_grad(self, 0);
                                         if (!gx) return;
                                         for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                                     });
}

/// Mean of squared differences over all elements.
template <class Real>
BasicTensor<Real> mse(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    if (a.shape() != b.shape()) detail::shape_fail("mse", a.shape(), b.shape());
    return mean(square(sub(a, b)));
}

}  // namespace oscar
