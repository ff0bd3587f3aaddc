#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ismrnn {

// Selective-scan recurrence, fused into one tape primitive.
//
//   per batch b and inner channel e, with h_0 = 0:
//     Abar_t = exp(delta_t[e] * A[e])          (elementwise over the N states)
//     h_t    = Abar_t o h_{t-1} + delta_t[e] * B_t * u_t[e]
//     y_t[e] = <C_t, h_t> + D_skip[e] * u_t[e]
//
// The simplified zero-order hold (Bbar = delta * B) follows the minimal
// reference formulation.  All L*E*N hidden states are kept for the backward
// sweep, which walks t backwards carrying dL/dh.
//
// Shapes: u, delta (B, L, E); A (E, N); Bp, Cp (B, L, N); Dskip (E).
inline Tensor ssm_scan(const Tensor& u, const Tensor& delta, const Tensor& A,
                       const Tensor& Bp, const Tensor& Cp, const Tensor& Dskip) {
    if (u.rank() != 3)
        throw ShapeError("ssm_scan: expected (B, L, E) input, got " + shape_str(u.shape()));
    const std::size_t B = u.dim(0), L = u.dim(1), E = u.dim(2);
    if (delta.shape() != u.shape())
        detail::shape_fail("ssm_scan", u.shape(), delta.shape());
    if (A.rank() != 2 || A.rows() != E)
        detail::shape_fail("ssm_scan", u.shape(), A.shape());
    const std::size_t N = A.cols();
    if (Bp.rank() != 3 || Bp.dim(0) != B || Bp.dim(1) != L || Bp.dim(2) != N)
        detail::shape_fail("ssm_scan", u.shape(), Bp.shape());
    if (Cp.shape() != Bp.shape())
        detail::shape_fail("ssm_scan", Bp.shape(), Cp.shape());
    if (Dskip.size() != E)
        detail::shape_fail("ssm_scan", u.shape(), Dskip.shape());

    const double* dv = delta.data();
    for (std::size_t i = 0; i < delta.size(); ++i)
        if (!(dv[i] > 0.0))
            throw NumericError("ssm_scan: delta must be positive, got " +
                               std::to_string(dv[i]) + " at flat index " + std::to_string(i));

    const double* uv = u.data();
    const double* av = A.data();
    const double* bv = Bp.data();
    const double* cv = Cp.data();
    const double* skv = Dskip.data();

    // All hidden states, laid out (B, L, E, N).
    auto hs = std::make_shared<std::vector<double>>(B * L * E * N, 0.0);
    std::vector<double> out(B * L * E, 0.0);

    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < L; ++t) {
            const std::size_t rt = b * L + t;
            const double* hprev = t == 0 ? nullptr : hs->data() + (rt - 1) * E * N;
            double* hcur = hs->data() + rt * E * N;
            for (std::size_t e = 0; e < E; ++e) {
                const double dt = dv[rt * E + e];
                const double ue = uv[rt * E + e];
                double acc = 0.0;
                for (std::size_t j = 0; j < N; ++j) {
                    const double abar = std::exp(dt * av[e * N + j]);
                    const double prev = hprev ? hprev[e * N + j] : 0.0;
                    const double h = abar * prev + dt * bv[rt * N + j] * ue;
                    hcur[e * N + j] = h;
                    acc += cv[rt * N + j] * h;
                }
                out[rt * E + e] = acc + skv[e] * ue;
            }
        }
    }

    bool track = detail::want_track({&u, &delta, &A, &Bp, &Cp, &Dskip});
    Tensor res = Tensor::raw({B, L, E}, std::move(out), track);
    if (!track) return res;

    auto un = u.node();
    auto dn = delta.node();
    auto an = A.node();
    auto bn = Bp.node();
    auto cn = Cp.node();
    auto skn = Dskip.node();
    auto on = res.node();
    Tape::active()->record(
        {un, dn, an, bn, cn, skn}, on, [un, dn, an, bn, cn, skn, on, hs, B, L, E, N]() {
            const double* g = on->grad->data();
            const double* uv2 = un->val->data();
            const double* dv2 = dn->val->data();
            const double* av2 = an->val->data();
            const double* bv2 = bn->val->data();
            const double* cv2 = cn->val->data();
            const double* skv2 = skn->val->data();
            std::vector<double> dh(E * N);
            for (std::size_t b = 0; b < B; ++b) {
                std::fill(dh.begin(), dh.end(), 0.0);
                for (std::size_t t = L; t-- > 0;) {
                    const std::size_t rt = b * L + t;
                    const double* hcur = hs->data() + rt * E * N;
                    const double* hprev = t == 0 ? nullptr : hs->data() + (rt - 1) * E * N;
                    for (std::size_t e = 0; e < E; ++e) {
                        const double gy = g[rt * E + e];
                        const double dt = dv2[rt * E + e];
                        const double ue = uv2[rt * E + e];
                        // Readout terms.
                        if (cn->tracked) {
                            double* dc = cn->grad->data() + rt * N;
                            for (std::size_t j = 0; j < N; ++j)
                                dc[j] += gy * hcur[e * N + j];
                        }
                        if (skn->tracked) (*skn->grad)[e] += gy * ue;
                        double du = un->tracked ? gy * skv2[e] : 0.0;
                        double ddt = 0.0;
                        for (std::size_t j = 0; j < N; ++j) {
                            double dhj = dh[e * N + j] + gy * cv2[rt * N + j];
                            const double a = av2[e * N + j];
                            const double abar = std::exp(dt * a);
                            const double prev = hprev ? hprev[e * N + j] : 0.0;
                            const double bj = bv2[rt * N + j];
                            du += dhj * dt * bj;
                            ddt += dhj * (a * abar * prev + bj * ue);
                            if (an->tracked)
                                (*an->grad)[e * N + j] += dhj * dt * abar * prev;
                            if (bn->tracked)
                                (*bn->grad)[rt * N + j] += dhj * dt * ue;
                            // Carry to h_{t-1}.
                            dh[e * N + j] = dhj * abar;
                        }
                        if (un->tracked) (*un->grad)[rt * E + e] += du;
                        if (dn->tracked) (*dn->grad)[rt * E + e] += ddt;
                    }
                }
            }
        });
    return res;
}

// The selective state-space preprocessing block.  Operating width D matches
// the series it is given; inner width E = 2D, state width N.  All parameter
// tensors are owned by the surrounding model's registry.
struct SsmBlock {
    std::size_t D = 0, E = 0, N = 0, k = 0;
    bool use_conv = false;

    Tensor in_w;    // (D, 2E), no bias
    Tensor conv_w;  // (E, k), depthwise taps, present iff use_conv
    Tensor conv_b;  // (E)
    Tensor dt_w;    // (E, E)
    Tensor dt_b;    // (E)
    Tensor b_w;     // (E, N), no bias
    Tensor c_w;     // (E, N), no bias
    Tensor a_log;   // (E, N); A = -exp(a_log) keeps the recurrence stable
    Tensor d_skip;  // (E)
    Tensor out_w;   // (E, D), no bias

    // (B, L, D) -> (B, L, D) with an outer additive skip, so an all-zero
    // block is the identity on the series.
    Tensor forward(const Tensor& x) const {
        if (x.rank() != 3 || x.dim(2) != D)
            throw ShapeError("ssm block: expected (B, L, " + std::to_string(D) +
                             ") input, got " + shape_str(x.shape()));
        const std::size_t B = x.dim(0), L = x.dim(1);
        Tensor flat = reshape(x, {B * L, D});
        Tensor proj = matmul(flat, in_w);
        Tensor xs = slice_cols(proj, 0, E);
        Tensor z = slice_cols(proj, E, 2 * E);
        if (use_conv) {
            Tensor x3 = causal_depthwise_conv(reshape(xs, {B, L, E}), conv_w, conv_b);
            xs = reshape(x3, {B * L, E});
        }
        xs = silu(xs);
        Tensor dt = softplus(linear(xs, dt_w, dt_b));
        Tensor bp = matmul(xs, b_w);
        Tensor cp = matmul(xs, c_w);
        Tensor A = neg(exp(a_log));
        Tensor y = ssm_scan(reshape(xs, {B, L, E}), reshape(dt, {B, L, E}), A,
                            reshape(bp, {B, L, N}), reshape(cp, {B, L, N}), d_skip);
        Tensor gated = mul(reshape(y, {B * L, E}), silu(z));
        Tensor out = matmul(gated, out_w);
        return add(x, reshape(out, {B, L, D}));
    }
};

} // namespace ismrnn
