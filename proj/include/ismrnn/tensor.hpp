#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace ismrnn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// C (M x N) = A (M x K) * B (K x N), row-major, optionally accumulating.
//
// Per output element the K terms are added in ascending k through std::fma.
// The whole project is built with floating-point contraction disabled, so this
// loop fixes the exact bit pattern of every matrix product; the equivalence
// tests reproduce results with plain std::fma dot products and compare
// bitwise.  Keep the loop order and the fma if touching this.
inline void gemm_nn(const double* A, const double* B, double* C,
                    std::size_t M, std::size_t K, std::size_t N, bool accumulate) {
    for (std::size_t m = 0; m < M; ++m) {
        double* crow = C + m * N;
        if (!accumulate) std::fill(crow, crow + N, 0.0);
        const double* arow = A + m * K;
        for (std::size_t k = 0; k < K; ++k) {
            const double a = arow[k];
            const double* brow = B + k * N;
            for (std::size_t n = 0; n < N; ++n)
                crow[n] = std::fma(a, brow[n], crow[n]);
        }
    }
}

// C (K x N) (+)= A^T * G where A is (M x K), G is (M x N).
inline void gemm_tn(const double* A, const double* G, double* C,
                    std::size_t M, std::size_t K, std::size_t N, bool accumulate) {
    if (!accumulate) std::fill(C, C + K * N, 0.0);
    for (std::size_t m = 0; m < M; ++m) {
        const double* arow = A + m * K;
        const double* grow = G + m * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double a = arow[k];
            double* crow = C + k * N;
            for (std::size_t n = 0; n < N; ++n)
                crow[n] = std::fma(a, grow[n], crow[n]);
        }
    }
}

inline void transpose_raw(const double* src, double* dst, std::size_t R, std::size_t C) {
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c)
            dst[c * R + r] = src[r * C + c];
}

} // namespace detail

struct TensorNode {
    Shape shape;
    std::shared_ptr<std::vector<double>> val;
    // Allocated eagerly for tracked nodes so reshape views can alias it.
    std::shared_ptr<std::vector<double>> grad;
    bool tracked = false;
};

class Tape;

// Shared-storage handle over a TensorNode.  Copies alias the same data; a
// reshape aliases both value and gradient storage of its source.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

    static Tensor from_values(Shape shape, std::vector<double> vals) {
        if (shape_size(shape) != vals.size())
            throw ShapeError("from_values: " + std::to_string(vals.size()) +
                             " values for shape " + shape_str(shape));
        return raw(std::move(shape), std::move(vals), false);
    }
    static Tensor zeros(Shape shape) {
        std::vector<double> v(shape_size(shape), 0.0);
        return raw(std::move(shape), std::move(v), false);
    }
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
    static Tensor full(Shape shape, double value) {
        std::vector<double> v(shape_size(shape), value);
        return raw(std::move(shape), std::move(v), false);
    }
    static Tensor scalar(double value) { return full({1}, value); }
    static Tensor randu(Shape shape, RngStream& rng, double lo, double hi) {
        std::vector<double> v(shape_size(shape));
        for (double& x : v) x = rng.next_uniform(lo, hi);
        return raw(std::move(shape), std::move(v), false);
    }
    static Tensor randn(Shape shape, RngStream& rng, double mean = 0.0, double stddev = 1.0) {
        std::vector<double> v(shape_size(shape));
        for (double& x : v) x = mean + stddev * rng.next_normal();
        return raw(std::move(shape), std::move(v), false);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::size_t rank() const { return n_->shape.size(); }
    std::size_t size() const { return n_->val->size(); }
    std::size_t dim(std::size_t i) const { return n_->shape.at(i); }

    std::size_t rows() const {
        require_rank2("rows");
        return n_->shape[0];
    }
    std::size_t cols() const {
        require_rank2("cols");
        return n_->shape[1];
    }

    const std::vector<double>& values() const { return *n_->val; }
    std::vector<double>& values() { return *n_->val; }
    const double* data() const { return n_->val->data(); }
    double* data() { return n_->val->data(); }

    double item() const {
        if (size() != 1)
            throw ContractError("item: tensor " + shape_str(shape()) + " is not a scalar");
        return (*n_->val)[0];
    }

    bool tracked() const { return n_->tracked; }

    // Marks a leaf as a trainable parameter; its gradient buffer persists and
    // accumulates across backward passes until zero_grad.
    Tensor& set_tracked(bool t = true) {
        n_->tracked = t;
        if (t && !n_->grad)
            n_->grad = std::make_shared<std::vector<double>>(size(), 0.0);
        return *this;
    }

    bool has_grad() const { return n_->grad != nullptr; }
    std::vector<double>& grad() {
        if (!n_->grad)
            throw StateError("grad: no gradient buffer on an untracked tensor");
        return *n_->grad;
    }
    const std::vector<double>& grad() const {
        if (!n_->grad)
            throw StateError("grad: no gradient buffer on an untracked tensor");
        return *n_->grad;
    }
    void zero_grad() {
        if (n_->grad) std::fill(n_->grad->begin(), n_->grad->end(), 0.0);
    }

    const std::shared_ptr<TensorNode>& node() const { return n_; }

    // Internal factory; tracked nodes get their gradient buffer up front.
    static Tensor raw(Shape shape, std::vector<double> vals, bool tracked) {
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->val = std::make_shared<std::vector<double>>(std::move(vals));
        node->tracked = tracked;
        if (tracked)
            node->grad = std::make_shared<std::vector<double>>(node->val->size(), 0.0);
        return Tensor(node);
    }

private:
    void require_rank2(const char* who) const {
        if (rank() != 2)
            throw ShapeError(std::string(who) + ": expected a matrix, got " + shape_str(shape()));
    }

    std::shared_ptr<TensorNode> n_;
};

// Records the forward pass as a linear sequence of entries; the recording
// order is a topological order, so reverse playback is the backward pass.
// After backward the tape freezes and rejects further use.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registration point for custom primitives: `pull` must accumulate into
    // the gradients of whichever inputs are tracked, reading the gradient of
    // `output`.
    void record(std::vector<std::shared_ptr<TensorNode>> inputs,
                std::shared_ptr<TensorNode> output,
                std::function<void()> pull) {
        if (frozen_)
            throw StateError("record: tape is frozen after backward");
        entries_.push_back({std::move(inputs), std::move(output), std::move(pull)});
    }

    void backward(const Tensor& loss) {
        if (frozen_)
            throw StateError("backward: tape is frozen after a previous backward");
        if (loss.size() != 1)
            throw ContractError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
        if (!loss.tracked())
            throw ContractError("backward: loss is not connected to this tape");
        frozen_ = true;
        (*loss.node()->grad)[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
            it->pull();
    }

    bool frozen() const { return frozen_; }
    std::size_t size() const { return entries_.size(); }

    static Tape* active() { return active_; }

    // RAII activation.  Ops executed inside a scope with at least one tracked
    // input are recorded; with no scope active everything runs untracked,
    // which is the evaluation mode.
    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active_) { active_ = &t; }
        ~Scope() { active_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

private:
    struct Entry {
        std::vector<std::shared_ptr<TensorNode>> inputs;
        std::shared_ptr<TensorNode> output;
        std::function<void()> pull;
    };

    std::vector<Entry> entries_;
    bool frozen_ = false;
    static thread_local Tape* active_;
};

inline thread_local Tape* Tape::active_ = nullptr;

namespace detail {

inline bool want_track(std::initializer_list<const Tensor*> ins) {
    if (!Tape::active()) return false;
    for (const Tensor* t : ins)
        if (t->tracked()) return true;
    return false;
}

inline std::vector<double>& grad_of(const std::shared_ptr<TensorNode>& n) { return *n->grad; }

// Broadcast layouts for binary ops: the smaller operand is either the same
// shape, a scalar (either side), a row vector matched against the last axis,
// or a column vector matched against matrix rows.
enum class BCast { Same, ScalarB, ScalarA, RowB, ColB };

inline BCast classify(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return BCast::Same;
    if (b.size() == 1) return BCast::ScalarB;
    if (a.size() == 1) return BCast::ScalarA;
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    std::size_t last = as.empty() ? 1 : as.back();
    if ((bs.size() == 1 && bs[0] == last) ||
        (bs.size() == 2 && bs[0] == 1 && bs[1] == last))
        return BCast::RowB;
    if (as.size() == 2 && bs.size() == 2 && bs[0] == as[0] && bs[1] == 1)
        return BCast::ColB;
    shape_fail(op, as, bs);
}

// f(av, bv) -> out; dfa/dfb map (gout, av, bv, out) to the gradient term for
// that element of a / b.  Broadcast cases reduce the b terms into b's slot.
template <class F, class DFA, class DFB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DFA dfa, DFB dfb) {
    const BCast bc = classify(name, a, b);
    const std::size_t n = (bc == BCast::ScalarA) ? b.size() : a.size();
    const Shape out_shape = (bc == BCast::ScalarA) ? b.shape() : a.shape();
    const std::size_t last = out_shape.empty() ? 1 : out_shape.back();
    const double* av = a.data();
    const double* bv = b.data();
    std::vector<double> out(n);

    auto bindex = [&](std::size_t i) -> std::size_t {
        switch (bc) {
        case BCast::Same: return i;
        case BCast::ScalarB: return 0;
        case BCast::ScalarA: return i;
        case BCast::RowB: return i % last;
        case BCast::ColB: return i / last;
        }
        return 0;
    };
    auto aindex = [&](std::size_t i) -> std::size_t { return bc == BCast::ScalarA ? 0 : i; };

    for (std::size_t i = 0; i < n; ++i)
        out[i] = f(av[aindex(i)], bv[bindex(i)]);

    bool track = want_track({&a, &b});
    Tensor res = Tensor::raw(out_shape, std::move(out), track);
    if (!track) return res;

    auto an = a.node();
    auto bn = b.node();
    auto on = res.node();
    Tape::active()->record({an, bn}, on, [an, bn, on, bc, last, n, dfa, dfb]() {
        const double* g = on->grad->data();
        const double* avd = an->val->data();
        const double* bvd = bn->val->data();
        const double* ov = on->val->data();
        auto bidx = [&](std::size_t i) -> std::size_t {
            switch (bc) {
            case BCast::Same: return i;
            case BCast::ScalarB: return 0;
            case BCast::ScalarA: return i;
            case BCast::RowB: return i % last;
            case BCast::ColB: return i / last;
            }
            return 0;
        };
        auto aidx = [&](std::size_t i) -> std::size_t { return bc == BCast::ScalarA ? 0 : i; };
        if (an->tracked) {
            double* da = an->grad->data();
            for (std::size_t i = 0; i < n; ++i)
                da[aidx(i)] += dfa(g[i], avd[aidx(i)], bvd[bidx(i)], ov[i]);
        }
        if (bn->tracked) {
            double* db = bn->grad->data();
            for (std::size_t i = 0; i < n; ++i)
                db[bidx(i)] += dfb(g[i], avd[aidx(i)], bvd[bidx(i)], ov[i]);
        }
    });
    return res;
}

// Elementwise unary op; df maps (gout, xv, yv) to the input-gradient term.
template <class F, class DF>
Tensor map_op(const Tensor& x, F f, DF df) {
    const std::size_t n = x.size();
    const double* xv = x.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(xv[i]);

    bool track = want_track({&x});
    Tensor res = Tensor::raw(x.shape(), std::move(out), track);
    if (!track) return res;

    auto xn = x.node();
    auto on = res.node();
    Tape::active()->record({xn}, on, [xn, on, n, df]() {
        if (!xn->tracked) return;
        const double* g = on->grad->data();
        const double* xvd = xn->val->data();
        const double* yv = on->val->data();
        double* dx = xn->grad->data();
        for (std::size_t i = 0; i < n; ++i)
            dx[i] += df(g[i], xvd[i], yv[i]);
    });
    return res;
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double stable_softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

} // namespace detail

// ---- arithmetic ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op("add", a, b,
        [](double x, double y) { return x + y; },
        [](double g, double, double, double) { return g; },
        [](double g, double, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op("sub", a, b,
        [](double x, double y) { return x - y; },
        [](double g, double, double, double) { return g; },
        [](double g, double, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op("mul", a, b,
        [](double x, double y) { return x * y; },
        [](double g, double, double y, double) { return g * y; },
        [](double g, double x, double, double) { return g * x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op("div", a, b,
        [](double x, double y) { return x / y; },
        [](double g, double, double y, double) { return g / y; },
        [](double g, double, double y, double o) { return -g * o / y; });
}

inline Tensor neg(const Tensor& x) {
    return detail::map_op(x,
        [](double v) { return -v; },
        [](double g, double, double) { return -g; });
}

inline Tensor scale(const Tensor& x, double c) {
    return detail::map_op(x,
        [c](double v) { return c * v; },
        [c](double g, double, double) { return c * g; });
}

inline Tensor add_const(const Tensor& x, double c) {
    return detail::map_op(x,
        [c](double v) { return v + c; },
        [](double g, double, double) { return g; });
}

// c - x, elementwise; convenient for gate complements.
inline Tensor rsub_const(double c, const Tensor& x) {
    return detail::map_op(x,
        [c](double v) { return c - v; },
        [](double g, double, double) { return -g; });
}

// ---- elementwise functions ----

inline Tensor exp(const Tensor& x) {
    return detail::map_op(x,
        [](double v) { return std::exp(v); },
        [](double g, double, double y) { return g * y; });
}

inline Tensor sqrt(const Tensor& x) {
    return detail::map_op(x,
        [](double v) { return std::sqrt(v); },
        [](double g, double, double y) { return 0.5 * g / y; });
}

inline Tensor abs(const Tensor& x) {
    return detail::map_op(x,
        [](double v) { return std::abs(v); },
        [](double g, double v, double) { return v > 0.0 ? g : (v < 0.0 ? -g : 0.0); });
}

inline Tensor square(const Tensor& x) {
    return detail::map_op(x,
        [](double v) { return v * v; },
        [](double g, double v, double) { return 2.0 * g * v; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::map_op(x,
        [](double v) { return detail::stable_sigmoid(v); },
        [](double g, double, double y) { return g * y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
    return detail::map_op(x,
        [](double v) { return std::tanh(v); },
        [](double g, double, double y) { return g * (1.0 - y * y); });
}

inline Tensor silu(const Tensor& x) {
    return detail::map_op(x,
        [](double v) { return v * detail::stable_sigmoid(v); },
        [](double g, double v, double) {
            double s = detail::stable_sigmoid(v);
            return g * (s + v * s * (1.0 - s));
        });
}

inline Tensor softplus(const Tensor& x) {
    return detail::map_op(x,
        [](double v) { return detail::stable_softplus(v); },
        [](double g, double v, double) { return g * detail::stable_sigmoid(v); });
}

// ---- matrix product ----

// matmul(a, b, ta, tb) = op(a) * op(b) for matrices; transposed operands are
// materialized once so the accumulation runs through the fma kernel either
// way.  Gradients flow to both operands.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false) {
    if (a.rank() != 2 || b.rank() != 2)
        detail::shape_fail("matmul", a.shape(), b.shape());
    const std::size_t M = ta ? a.cols() : a.rows();
    const std::size_t K = ta ? a.rows() : a.cols();
    const std::size_t Kb = tb ? b.cols() : b.rows();
    const std::size_t N = tb ? b.rows() : b.cols();
    if (K != Kb)
        detail::shape_fail("matmul", a.shape(), b.shape());

    std::vector<double> aT, bT;
    const double* A = a.data();
    const double* B = b.data();
    if (ta) {
        aT.resize(M * K);
        detail::transpose_raw(a.data(), aT.data(), K, M);
        A = aT.data();
    }
    if (tb) {
        bT.resize(K * N);
        detail::transpose_raw(b.data(), bT.data(), N, K);
        B = bT.data();
    }

    std::vector<double> out(M * N);
    detail::gemm_nn(A, B, out.data(), M, K, N, false);

    bool track = detail::want_track({&a, &b});
    Tensor res = Tensor::raw({M, N}, std::move(out), track);
    if (!track) return res;

    auto an = a.node();
    auto bn = b.node();
    auto on = res.node();
    Tape::active()->record({an, bn}, on, [an, bn, on, ta, tb, M, K, N]() {
        const double* g = on->grad->data();
        // Effective operands: Ae (M x K), Be (K x N).
        if (an->tracked) {
            // dAe = g * Be^T.  Be^T is b's storage when tb, else materialized.
            std::vector<double> beT;
            const double* BT;
            if (tb) {
                BT = bn->val->data();
            } else {
                beT.resize(N * K);
                detail::transpose_raw(bn->val->data(), beT.data(), K, N);
                BT = beT.data();
            }
            if (!ta) {
                detail::gemm_nn(g, BT, an->grad->data(), M, N, K, true);
            } else {
                std::vector<double> tmp(M * K);
                detail::gemm_nn(g, BT, tmp.data(), M, N, K, false);
                double* da = an->grad->data();
                for (std::size_t m = 0; m < M; ++m)
                    for (std::size_t k = 0; k < K; ++k)
                        da[k * M + m] += tmp[m * K + k];
            }
        }
        if (bn->tracked) {
            // dBe = Ae^T * g.  When ta, Ae^T is a's storage.
            std::vector<double> tmp;
            double* target = bn->grad->data();
            if (ta) {
                if (!tb) {
                    detail::gemm_nn(an->val->data(), g, target, K, M, N, true);
                } else {
                    tmp.resize(K * N);
                    detail::gemm_nn(an->val->data(), g, tmp.data(), K, M, N, false);
                }
            } else {
                if (!tb) {
                    detail::gemm_tn(an->val->data(), g, target, M, K, N, true);
                } else {
                    tmp.resize(K * N);
                    detail::gemm_tn(an->val->data(), g, tmp.data(), M, K, N, false);
                }
            }
            if (tb) {
                double* db = bn->grad->data();
                for (std::size_t k = 0; k < K; ++k)
                    for (std::size_t n2 = 0; n2 < N; ++n2)
                        db[n2 * K + k] += tmp[k * N + n2];
            }
        }
    });
    return res;
}

// x (R x in) * w (in x out) + b (out).  Weights are stored input-major so the
// forward product takes the fast kernel path; b may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
    Tensor y = matmul(x, w);
    if (b.defined()) y = add(y, b);
    return y;
}

// ---- structure ops ----

// Shares value and gradient storage with x: no copy, no tape entry.  Writing
// through either handle is visible through both.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size())
        detail::shape_fail("reshape", x.shape(), shape);
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->val = x.node()->val;
    node->grad = x.node()->grad;
    node->tracked = x.tracked();
    return Tensor(node);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty())
        throw ParamError("concat_cols: no tensors given");
    const std::size_t R = parts[0].rows();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.rows() != R)
            detail::shape_fail("concat_cols", parts[0].shape(), p.shape());
        total += p.cols();
    }
    std::vector<double> out(R * total);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t C = p.cols();
        const double* src = p.data();
        for (std::size_t r = 0; r < R; ++r)
            std::memcpy(out.data() + r * total + off, src + r * C, C * sizeof(double));
        off += C;
    }

    bool track = false;
    if (Tape::active())
        for (const Tensor& p : parts)
            if (p.tracked()) track = true;
    Tensor res = Tensor::raw({R, total}, std::move(out), track);
    if (!track) return res;

    std::vector<std::shared_ptr<TensorNode>> ins;
    for (const Tensor& p : parts) ins.push_back(p.node());
    auto on = res.node();
    Tape::active()->record(ins, on, [ins, on, R, total]() {
        const double* g = on->grad->data();
        std::size_t off2 = 0;
        for (const auto& in : ins) {
            const std::size_t C = in->shape[1];
            if (in->tracked) {
                double* d = in->grad->data();
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c)
                        d[r * C + c] += g[r * total + off2 + c];
            }
            off2 += C;
        }
    });
    return res;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty())
        throw ParamError("concat_rows: no tensors given");
    const std::size_t C = parts[0].cols();
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.cols() != C)
            detail::shape_fail("concat_rows", parts[0].shape(), p.shape());
        total += p.rows();
    }
    std::vector<double> out;
    out.reserve(total * C);
    for (const Tensor& p : parts)
        out.insert(out.end(), p.values().begin(), p.values().end());

    bool track = false;
    if (Tape::active())
        for (const Tensor& p : parts)
            if (p.tracked()) track = true;
    Tensor res = Tensor::raw({total, C}, std::move(out), track);
    if (!track) return res;

    std::vector<std::shared_ptr<TensorNode>> ins;
    for (const Tensor& p : parts) ins.push_back(p.node());
    auto on = res.node();
    Tape::active()->record(ins, on, [ins, on, C]() {
        const double* g = on->grad->data();
        std::size_t row = 0;
        for (const auto& in : ins) {
            const std::size_t R = in->shape[0];
            if (in->tracked) {
                double* d = in->grad->data();
                for (std::size_t i = 0; i < R * C; ++i)
                    d[i] += g[row * C + i];
            }
            row += R;
        }
    });
    return res;
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    const std::size_t R = x.rows(), C = x.cols();
    if (c0 > c1 || c1 > C)
        throw ParamError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") out of bounds for " + shape_str(x.shape()));
    const std::size_t W = c1 - c0;
    std::vector<double> out(R * W);
    const double* src = x.data();
    for (std::size_t r = 0; r < R; ++r)
        std::memcpy(out.data() + r * W, src + r * C + c0, W * sizeof(double));

    bool track = detail::want_track({&x});
    Tensor res = Tensor::raw({R, W}, std::move(out), track);
    if (!track) return res;

    auto xn = x.node();
    auto on = res.node();
    Tape::active()->record({xn}, on, [xn, on, R, C, c0, W]() {
        if (!xn->tracked) return;
        const double* g = on->grad->data();
        double* d = xn->grad->data();
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < W; ++c)
                d[r * C + c0 + c] += g[r * W + c];
    });
    return res;
}

// Rows [r0, r1) along the first axis; works for any rank >= 1.
inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    if (x.rank() < 1)
        throw ShapeError("slice_rows: scalar input " + shape_str(x.shape()));
    const std::size_t R = x.dim(0);
    if (r0 > r1 || r1 > R)
        throw ParamError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") out of bounds for " + shape_str(x.shape()));
    const std::size_t W = x.size() / R;
    Shape out_shape = x.shape();
    out_shape[0] = r1 - r0;
    std::vector<double> out(x.data() + r0 * W, x.data() + r1 * W);

    bool track = detail::want_track({&x});
    Tensor res = Tensor::raw(std::move(out_shape), std::move(out), track);
    if (!track) return res;

    auto xn = x.node();
    auto on = res.node();
    const std::size_t n = res.size();
    Tape::active()->record({xn}, on, [xn, on, r0, W, n]() {
        if (!xn->tracked) return;
        const double* g = on->grad->data();
        double* d = xn->grad->data() + r0 * W;
        for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
    });
    return res;
}

inline Tensor transpose(const Tensor& x) {
    const std::size_t R = x.rows(), C = x.cols();
    std::vector<double> out(R * C);
    detail::transpose_raw(x.data(), out.data(), R, C);

    bool track = detail::want_track({&x});
    Tensor res = Tensor::raw({C, R}, std::move(out), track);
    if (!track) return res;

    auto xn = x.node();
    auto on = res.node();
    Tape::active()->record({xn}, on, [xn, on, R, C]() {
        if (!xn->tracked) return;
        const double* g = on->grad->data();
        double* d = xn->grad->data();
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c)
                d[r * C + c] += g[c * R + r];
    });
    return res;
}

// (B, X, Y) -> (B, Y, X).
inline Tensor transpose_inner(const Tensor& x) {
    if (x.rank() != 3)
        throw ShapeError("transpose_inner: expected rank 3, got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), X = x.dim(1), Y = x.dim(2);
    std::vector<double> out(B * X * Y);
    const double* src = x.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < X; ++i)
            for (std::size_t j = 0; j < Y; ++j)
                out[(b * Y + j) * X + i] = src[(b * X + i) * Y + j];

    bool track = detail::want_track({&x});
    Tensor res = Tensor::raw({B, Y, X}, std::move(out), track);
    if (!track) return res;

    auto xn = x.node();
    auto on = res.node();
    Tape::active()->record({xn}, on, [xn, on, B, X, Y]() {
        if (!xn->tracked) return;
        const double* g = on->grad->data();
        double* d = xn->grad->data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < X; ++i)
                for (std::size_t j = 0; j < Y; ++j)
                    d[(b * X + i) * Y + j] += g[(b * Y + j) * X + i];
    });
    return res;
}

// (X, Y, Z) -> (Y, X, Z); its own inverse.
inline Tensor permute102(const Tensor& x) {
    if (x.rank() != 3)
        throw ShapeError("permute102: expected rank 3, got " + shape_str(x.shape()));
    const std::size_t X = x.dim(0), Y = x.dim(1), Z = x.dim(2);
    std::vector<double> out(X * Y * Z);
    const double* src = x.data();
    for (std::size_t i = 0; i < X; ++i)
        for (std::size_t j = 0; j < Y; ++j)
            std::memcpy(out.data() + (j * X + i) * Z, src + (i * Y + j) * Z, Z * sizeof(double));

    bool track = detail::want_track({&x});
    Tensor res = Tensor::raw({Y, X, Z}, std::move(out), track);
    if (!track) return res;

    auto xn = x.node();
    auto on = res.node();
    Tape::active()->record({xn}, on, [xn, on, X, Y, Z]() {
        if (!xn->tracked) return;
        const double* g = on->grad->data();
        double* d = xn->grad->data();
        for (std::size_t i = 0; i < X; ++i)
            for (std::size_t j = 0; j < Y; ++j)
                for (std::size_t k = 0; k < Z; ++k)
                    d[(i * Y + j) * Z + k] += g[(j * X + i) * Z + k];
    });
    return res;
}

// ---- reductions ----

// Mean over one axis of a tensor of rank <= 3; the axis disappears.
inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
    if (x.rank() > 3 || axis >= x.rank())
        throw ShapeError("mean_axis: axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
    std::size_t P = 1, Q = 1;
    for (std::size_t i = 0; i < axis; ++i) P *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) Q *= x.dim(i);
    const std::size_t n = x.dim(axis);
    Shape out_shape;
    for (std::size_t i = 0; i < x.rank(); ++i)
        if (i != axis) out_shape.push_back(x.dim(i));
    if (out_shape.empty()) out_shape = {1};

    std::vector<double> out(P * Q, 0.0);
    const double* src = x.data();
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t q = 0; q < Q; ++q)
                out[p * Q + q] += src[(p * n + t) * Q + q];
    const double inv = 1.0 / static_cast<double>(n);
    for (double& v : out) v *= inv;

    bool track = detail::want_track({&x});
    Tensor res = Tensor::raw(std::move(out_shape), std::move(out), track);
    if (!track) return res;

    auto xn = x.node();
    auto on = res.node();
    Tape::active()->record({xn}, on, [xn, on, P, n, Q, inv]() {
        if (!xn->tracked) return;
        const double* g = on->grad->data();
        double* d = xn->grad->data();
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t q = 0; q < Q; ++q)
                    d[(p * n + t) * Q + q] += g[p * Q + q] * inv;
    });
    return res;
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;

    bool track = detail::want_track({&x});
    Tensor res = Tensor::raw({1}, {s}, track);
    if (!track) return res;

    auto xn = x.node();
    auto on = res.node();
    Tape::active()->record({xn}, on, [xn, on]() {
        if (!xn->tracked) return;
        const double g = (*on->grad)[0];
        for (double& d : *xn->grad) d += g;
    });
    return res;
}

inline Tensor mean_all(const Tensor& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// ---- indexing ----

// Row gather on a matrix; indices may repeat, the backward pass scatter-adds.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> idx) {
    const std::size_t R = x.rows(), C = x.cols();
    for (std::size_t i : idx)
        if (i >= R)
            throw ParamError("gather_rows: index " + std::to_string(i) +
                             " out of range for " + shape_str(x.shape()));
    std::vector<double> out(idx.size() * C);
    const double* src = x.data();
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::memcpy(out.data() + r * C, src + idx[r] * C, C * sizeof(double));

    bool track = detail::want_track({&x});
    Tensor res = Tensor::raw({idx.size(), C}, std::move(out), track);
    if (!track) return res;

    auto xn = x.node();
    auto on = res.node();
    auto ix = std::make_shared<std::vector<std::size_t>>(std::move(idx));
    Tape::active()->record({xn}, on, [xn, on, ix, C]() {
        if (!xn->tracked) return;
        const double* g = on->grad->data();
        double* d = xn->grad->data();
        for (std::size_t r = 0; r < ix->size(); ++r) {
            double* drow = d + (*ix)[r] * C;
            const double* grow = g + r * C;
            for (std::size_t c = 0; c < C; ++c) drow[c] += grow[c];
        }
    });
    return res;
}

// ---- regularization ----

// Inverted-scaling dropout.  With train == false (or rate 0) this is the
// identity and consumes no randomness; the returned handle is x itself.
inline Tensor dropout(const Tensor& x, double rate, bool train, RngStream& rng) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw ParamError("dropout: rate " + std::to_string(rate) + " outside [0, 1)");
    if (!train || rate == 0.0) return x;

    const std::size_t n = x.size();
    const double inv = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i)
        (*mask)[i] = rng.next_uniform() < rate ? 0.0 : inv;

    const double* xv = x.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] * (*mask)[i];

    bool track = detail::want_track({&x});
    Tensor res = Tensor::raw(x.shape(), std::move(out), track);
    if (!track) return res;

    auto xn = x.node();
    auto on = res.node();
    Tape::active()->record({xn}, on, [xn, on, mask, n]() {
        if (!xn->tracked) return;
        const double* g = on->grad->data();
        double* d = xn->grad->data();
        for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * (*mask)[i];
    });
    return res;
}

// ---- sequence ops ----

// Depthwise causal convolution over x (B, L, E) with taps w (E, k) and bias
// b (E).  Tap i multiplies the sample i steps in the past; positions before
// the sequence start read zero, so output t depends on inputs [0, t] only.
inline Tensor causal_depthwise_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 3)
        throw ShapeError("causal_depthwise_conv: expected (B, L, E) input, got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), L = x.dim(1), E = x.dim(2);
    if (w.rank() != 2 || w.rows() != E)
        detail::shape_fail("causal_depthwise_conv", x.shape(), w.shape());
    if (b.defined() && b.size() != E)
        detail::shape_fail("causal_depthwise_conv", x.shape(), b.shape());
    const std::size_t k = w.cols();

    const double* xv = x.data();
    const double* wv = w.data();
    std::vector<double> out(B * L * E, 0.0);
    for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t t = 0; t < L; ++t) {
            double* orow = out.data() + (bb * L + t) * E;
            if (b.defined()) {
                const double* bv = b.data();
                for (std::size_t e = 0; e < E; ++e) orow[e] = bv[e];
            }
            for (std::size_t i = 0; i <= std::min(t, k - 1); ++i) {
                const double* xrow = xv + (bb * L + t - i) * E;
                for (std::size_t e = 0; e < E; ++e)
                    orow[e] += wv[e * k + i] * xrow[e];
            }
        }

    bool track = b.defined() ? detail::want_track({&x, &w, &b}) : detail::want_track({&x, &w});
    Tensor res = Tensor::raw({B, L, E}, std::move(out), track);
    if (!track) return res;

    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    auto on = res.node();
    std::vector<std::shared_ptr<TensorNode>> ins{xn, wn};
    if (bn) ins.push_back(bn);
    Tape::active()->record(ins, on, [xn, wn, bn, on, B, L, E, k]() {
        const double* g = on->grad->data();
        const double* xv2 = xn->val->data();
        const double* wv2 = wn->val->data();
        for (std::size_t bb = 0; bb < B; ++bb)
            for (std::size_t t = 0; t < L; ++t) {
                const double* grow = g + (bb * L + t) * E;
                for (std::size_t i = 0; i <= std::min(t, k - 1); ++i) {
                    const std::size_t src = (bb * L + t - i) * E;
                    if (xn->tracked) {
                        double* dx = xn->grad->data() + src;
                        for (std::size_t e = 0; e < E; ++e)
                            dx[e] += grow[e] * wv2[e * k + i];
                    }
                    if (wn->tracked) {
                        double* dw = wn->grad->data();
                        for (std::size_t e = 0; e < E; ++e)
                            dw[e * k + i] += grow[e] * xv2[src + e];
                    }
                }
                if (bn && bn->tracked) {
                    double* db = bn->grad->data();
                    for (std::size_t e = 0; e < E; ++e) db[e] += grow[e];
                }
            }
    });
    return res;
}

// Folds step over the leading axis of xs (T, R, K): h <- step(x_t, h) for
// t = 0..T-1, returning the final h.  The step may build arbitrary recorded
// ops; the loop is unrolled onto the tape.
template <class StepF>
Tensor scan_time(const Tensor& xs, Tensor h, StepF step) {
    if (xs.rank() != 3)
        throw ShapeError("scan_time: expected (T, R, K) input, got " + shape_str(xs.shape()));
    const std::size_t T = xs.dim(0), R = xs.dim(1), K = xs.dim(2);
    Tensor flat = reshape(xs, {T * R, K});
    for (std::size_t t = 0; t < T; ++t)
        h = step(slice_rows(flat, t * R, (t + 1) * R), h);
    return h;
}

} // namespace ismrnn
