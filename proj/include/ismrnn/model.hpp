#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "mamba.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ismrnn {

enum class NormKind { Last, Revin, None };
enum class MambaMode { Mix, PerChannel };

struct ModelConfig {
    std::size_t L = 96;       // lookback
    std::size_t H = 0;        // horizon
    std::size_t C = 0;        // channels
    std::size_t seg_len = 24; // w
    std::size_t d = 512;      // hidden width
    std::size_t d_state = 4;  // SSM state width
    double dropout = 0.1;
    bool use_mamba = true;
    bool use_implicit_residual = true; // implicit segmentation + residual, one toggle
    bool use_conv = false;
    std::size_t conv_kernel = 4;
    bool per_segment_compress = false;
    NormKind norm = NormKind::Last;
    MambaMode mamba_mode = MambaMode::Mix;

    std::size_t n() const { return L / seg_len; }
    // Horizons that do not divide evenly decode one extra segment and
    // truncate; every benchmark config divides evenly.
    std::size_t m() const { return (H + seg_len - 1) / seg_len; }

    void validate() const {
        if (H == 0) throw ConfigError("horizon must be set and positive");
        if (C == 0) throw ConfigError("channel count must be positive");
        if (L == 0 || seg_len == 0)
            throw ConfigError("lookback and seg_len must be positive");
        if (L % seg_len != 0)
            throw ConfigError("lookback " + std::to_string(L) +
                              " is not divisible by seg_len " + std::to_string(seg_len));
        if (d < 2 || d % 2 != 0)
            throw ConfigError("hidden width d must be even (got " + std::to_string(d) +
                              "): the decoder splits it into positional and channel halves");
        if (!(dropout >= 0.0 && dropout < 1.0))
            throw ConfigError("dropout " + std::to_string(dropout) + " outside [0, 1)");
        if (d_state == 0) throw ConfigError("d_state must be positive");
        if (use_conv && conv_kernel == 0) throw ConfigError("conv_kernel must be positive");
    }
};

// Last-value anchoring: subtract each channel's final lookback value.
// Returns the normalized window and the anchor used to undo it.
inline std::pair<Tensor, Tensor> last_value_norm(const Tensor& x) {
    if (x.rank() != 3)
        throw ShapeError("last_value_norm: expected (B, L, C), got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
    Tensor flat = reshape(x, {B * L, C});
    std::vector<std::size_t> last(B);
    for (std::size_t b = 0; b < B; ++b) last[b] = b * L + L - 1;
    Tensor anchor = gather_rows(flat, last);
    std::vector<std::size_t> rep(B * L);
    for (std::size_t i = 0; i < B * L; ++i) rep[i] = i / L;
    Tensor norm = sub(flat, gather_rows(anchor, rep));
    return {reshape(norm, {B, L, C}), anchor};
}

inline Tensor last_value_denorm(const Tensor& y, const Tensor& anchor) {
    if (y.rank() != 3)
        throw ShapeError("last_value_denorm: expected (B, H, C), got " + shape_str(y.shape()));
    const std::size_t B = y.dim(0), H = y.dim(1), C = y.dim(2);
    Tensor flat = reshape(y, {B * H, C});
    std::vector<std::size_t> rep(B * H);
    for (std::size_t i = 0; i < B * H; ++i) rep[i] = i / H;
    return reshape(add(flat, gather_rows(anchor, rep)), {B, H, C});
}

// The segment recurrent forecaster.  forward() is the whole pipeline; the
// public stage methods operate on channel-flattened rows (R = B*C sequences
// of length L) and exist so each stage can be pinned down in isolation.
class IsmrnnModel {
public:
    IsmrnnModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg), drop_rng_(seed, "dropout") {
        cfg_.validate();
        init_params(seed);
    }

    const ModelConfig& config() const { return cfg_; }

    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

    Tensor param(const std::string& name) const {
        for (const auto& [n, t] : params_)
            if (n == name) return t;
        throw ParamError("no parameter named '" + name + "'");
    }

    std::size_t parameter_count() const {
        std::size_t total = 0;
        for (const auto& [n, t] : params_) total += t.size();
        return total;
    }

    // Closed-form count; the registry must agree with it for every config.
    static std::size_t expected_parameter_count(const ModelConfig& cfg) {
        const std::size_t L = cfg.L, d = cfg.d, w = cfg.seg_len, C = cfg.C;
        const std::size_t n = cfg.n(), m = cfg.m();
        std::size_t total = 0;
        if (cfg.use_implicit_residual) {
            total += n + n; // expand
            total += cfg.per_segment_compress ? n * L * d + n * d : L * d + d;
            total += L * d + d; // residual map
        } else {
            total += w * d + d; // shared segment embedding
        }
        total += 6 * d * d + 6 * d;          // one GRU, gate order r,z,n
        total += m * (d / 2) + C * (d / 2);  // decoder embeddings
        total += d * w + w;                  // output head
        if (cfg.use_mamba) {
            const std::size_t D = cfg.mamba_mode == MambaMode::Mix ? C : 1;
            const std::size_t E = 2 * D, N = cfg.d_state;
            total += D * 2 * E;                      // input projection
            if (cfg.use_conv) total += E * cfg.conv_kernel + E;
            total += E * E + E;                      // delta projection
            total += 3 * E * N;                      // B, C projections and A_log
            total += E + E * D;                      // skip and output projection
        }
        return total;
    }

    void zero_grads() {
        for (auto& [n, t] : params_) t.zero_grad();
    }

    RngStream& dropout_rng() { return drop_rng_; }

    // ---- stages ----

    // x (R, L) -> {expanded (n*R, L) segment-major, embedded (n*R, d)}.
    // Expansion is time-pointwise: row (j, r) of the expanded form is
    // exp_w[j] * x[r] + exp_b[j], so every segment sees the whole lookback.
    std::pair<Tensor, Tensor> implicit_segment(const Tensor& x) const {
        require_rows_l(x, "implicit_segment");
        const std::size_t R = x.rows(), n = cfg_.n(), L = cfg_.L;
        std::vector<std::size_t> rep_r(n * R), rep_j(n * R);
        for (std::size_t i = 0; i < n * R; ++i) {
            rep_r[i] = i % R;
            rep_j[i] = i / R;
        }
        Tensor xbar = add(mul(gather_rows(x, rep_r), gather_rows(exp_w_, rep_j)),
                          gather_rows(exp_b_, rep_j));
        Tensor emb;
        if (!cfg_.per_segment_compress) {
            emb = linear(xbar, cmp_w_, cmp_b_);
        } else {
            std::vector<Tensor> parts;
            for (std::size_t j = 0; j < n; ++j) {
                Tensor xj = slice_rows(xbar, j * R, (j + 1) * R);
                Tensor wj = slice_rows(cmp_w_, j * L, (j + 1) * L);
                parts.push_back(add(matmul(xj, wj), slice_rows(cmp_b_, j, j + 1)));
            }
            emb = concat_rows(parts);
        }
        return {xbar, emb};
    }

    // x (R, L) -> (n*R, d) segment-major: hard truncation into n blocks of
    // width w, one shared w->d map.
    Tensor explicit_segment(const Tensor& x) const {
        require_rows_l(x, "explicit_segment");
        const std::size_t R = x.rows(), n = cfg_.n(), w = cfg_.seg_len;
        Tensor emb = linear(reshape(x, {R * n, w}), seg_w_, seg_b_);
        std::vector<std::size_t> reorder(n * R);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t r = 0; r < R; ++r) reorder[j * R + r] = r * n + j;
        return gather_rows(emb, reorder);
    }

    // One step of the shared GRU; gate order reset, update, candidate.
    Tensor gru_step(const Tensor& x, const Tensor& h) const {
        const std::size_t d = cfg_.d;
        Tensor gx = linear(x, gru_wi_, gru_bi_);
        Tensor gh = linear(h, gru_wh_, gru_bh_);
        Tensor r = sigmoid(add(slice_cols(gx, 0, d), slice_cols(gh, 0, d)));
        Tensor z = sigmoid(add(slice_cols(gx, d, 2 * d), slice_cols(gh, d, 2 * d)));
        Tensor nc = tanh(add(slice_cols(gx, 2 * d, 3 * d),
                             mul(r, slice_cols(gh, 2 * d, 3 * d))));
        return add(mul(rsub_const(1.0, z), nc), mul(z, h));
    }

    // (n*R, d) segment-major -> final hidden state (R, d), h_0 = 0.
    Tensor gru_encode(const Tensor& seg) const {
        const std::size_t n = cfg_.n();
        if (seg.rank() != 2 || seg.rows() % n != 0)
            throw ShapeError("gru_encode: expected n*R rows, got " + shape_str(seg.shape()));
        const std::size_t R = seg.rows() / n;
        Tensor h = Tensor::zeros({R, cfg_.d});
        return scan_time(reshape(seg, {n, R, cfg_.d}), h,
                         [this](const Tensor& x, const Tensor& h) { return gru_step(x, h); });
    }

    // (n*R, L) expanded form -> (R, d): mean over the segment axis, then one
    // L->d map.  Added to the encoder output so information can skip the
    // recurrence.
    Tensor residual_path(const Tensor& xbar) const {
        const std::size_t n = cfg_.n();
        if (xbar.rank() != 2 || xbar.rows() % n != 0 || xbar.cols() != cfg_.L)
            throw ShapeError("residual_path: expected (n*R, L), got " + shape_str(xbar.shape()));
        const std::size_t R = xbar.rows() / n;
        Tensor pool = mean_axis(reshape(xbar, {n, R, cfg_.L}), 0);
        return linear(pool, res_w_, res_b_);
    }

    // h (R, d) with R = B*C -> (R, H).  All m output segments decode in
    // parallel: one GRU step from h on concat(position, channel) embeddings,
    // dropout, then the shared w-wide head.
    Tensor pmf_decode(const Tensor& h, bool train) {
        const std::size_t R = h.rows(), C = cfg_.C, m = cfg_.m(), w = cfg_.seg_len;
        if (h.cols() != cfg_.d || R % C != 0)
            throw ShapeError("pmf_decode: expected (B*C, d) hidden, got " + shape_str(h.shape()));
        std::vector<std::size_t> pos_idx(m * R), ch_idx(m * R), h_idx(m * R);
        for (std::size_t i = 0; i < m * R; ++i) {
            pos_idx[i] = i / R;
            ch_idx[i] = (i % R) % C;
            h_idx[i] = i % R;
        }
        Tensor dec_in = concat_cols({gather_rows(pos_emb_, pos_idx), gather_rows(chan_emb_, ch_idx)});
        Tensor hd = gru_step(dec_in, gather_rows(h, h_idx));
        hd = dropout(hd, cfg_.dropout, train, drop_rng_);
        Tensor seg = linear(hd, out_w_, out_b_);
        Tensor y = reshape(permute102(reshape(seg, {m, R, w})), {R, m * w});
        if (m * w > cfg_.H) y = slice_cols(y, 0, cfg_.H);
        return y;
    }

    // ---- full pipeline ----

    // x (B, L, C) -> predictions (B, H, C).  Train mode draws dropout masks
    // from the model's stream; eval mode is deterministic.
    Tensor forward(const Tensor& x, bool train = false) {
        if (x.rank() != 3 || x.dim(1) != cfg_.L || x.dim(2) != cfg_.C)
            throw ShapeError("forward: expected (B, " + std::to_string(cfg_.L) + ", " +
                             std::to_string(cfg_.C) + "), got " + shape_str(x.shape()));
        const std::size_t B = x.dim(0), L = cfg_.L, C = cfg_.C, H = cfg_.H;

        Tensor xn, anchor, mu, sigma;
        switch (cfg_.norm) {
        case NormKind::Last: {
            auto [n0, a0] = last_value_norm(x);
            xn = n0;
            anchor = a0;
            break;
        }
        case NormKind::Revin: {
            Tensor flat = reshape(x, {B * L, C});
            mu = mean_axis(x, 1);
            std::vector<std::size_t> rep(B * L);
            for (std::size_t i = 0; i < B * L; ++i) rep[i] = i / L;
            Tensor cen = sub(flat, gather_rows(mu, rep));
            Tensor var = mean_axis(reshape(square(cen), {B, L, C}), 1);
            sigma = sqrt(add_const(var, 1e-5));
            xn = reshape(div(cen, gather_rows(sigma, rep)), {B, L, C});
            break;
        }
        case NormKind::None:
            xn = x;
            break;
        }

        if (cfg_.use_mamba) {
            if (cfg_.mamba_mode == MambaMode::Mix) {
                xn = ssm_.forward(xn);
            } else {
                Tensor seq = reshape(transpose_inner(xn), {B * C, L, 1});
                xn = transpose_inner(reshape(ssm_.forward(seq), {B, C, L}));
            }
        }

        Tensor xci = reshape(transpose_inner(xn), {B * C, L});

        Tensor h;
        if (cfg_.use_implicit_residual) {
            auto [xbar, emb] = implicit_segment(xci);
            h = add(gru_encode(emb), residual_path(xbar));
        } else {
            h = gru_encode(explicit_segment(xci));
        }

        Tensor y = pmf_decode(h, train);                             // (B*C, H)
        Tensor y3 = transpose_inner(reshape(y, {B, C, H}));          // (B, H, C)

        switch (cfg_.norm) {
        case NormKind::Last:
            y3 = last_value_denorm(y3, anchor);
            break;
        case NormKind::Revin: {
            Tensor flat = reshape(y3, {B * H, C});
            std::vector<std::size_t> rep(B * H);
            for (std::size_t i = 0; i < B * H; ++i) rep[i] = i / H;
            flat = add(mul(flat, gather_rows(sigma, rep)), gather_rows(mu, rep));
            y3 = reshape(flat, {B, H, C});
            break;
        }
        case NormKind::None:
            break;
        }
        return y3;
    }

private:
    void require_rows_l(const Tensor& x, const char* who) const {
        if (x.rank() != 2 || x.cols() != cfg_.L)
            throw ShapeError(std::string(who) + ": expected (R, " + std::to_string(cfg_.L) +
                             "), got " + shape_str(x.shape()));
    }

    Tensor add_param(const std::string& name, Shape shape, std::uint64_t seed, double bound) {
        RngStream rng(seed, "init/" + name);
        Tensor t = bound > 0.0 ? Tensor::randu(std::move(shape), rng, -bound, bound)
                               : Tensor::randn(std::move(shape), rng);
        t.set_tracked();
        params_.emplace_back(name, t);
        return t;
    }

    void init_params(std::uint64_t seed) {
        const std::size_t L = cfg_.L, d = cfg_.d, w = cfg_.seg_len, C = cfg_.C;
        const std::size_t n = cfg_.n(), m = cfg_.m();
        const double inv_l = 1.0 / std::sqrt(static_cast<double>(L));
        const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));
        const double inv_w = 1.0 / std::sqrt(static_cast<double>(w));

        if (cfg_.use_implicit_residual) {
            exp_w_ = add_param("expand.w", {n, 1}, seed, 1.0);
            exp_b_ = add_param("expand.b", {n, 1}, seed, 1.0);
            if (!cfg_.per_segment_compress) {
                cmp_w_ = add_param("compress.w", {L, d}, seed, inv_l);
                cmp_b_ = add_param("compress.b", {d}, seed, inv_l);
            } else {
                cmp_w_ = add_param("compress.w", {n * L, d}, seed, inv_l);
                cmp_b_ = add_param("compress.b", {n, d}, seed, inv_l);
            }
            res_w_ = add_param("residual.w", {L, d}, seed, inv_l);
            res_b_ = add_param("residual.b", {d}, seed, inv_l);
        } else {
            seg_w_ = add_param("segment.w", {w, d}, seed, inv_w);
            seg_b_ = add_param("segment.b", {d}, seed, inv_w);
        }

        gru_wi_ = add_param("gru.wi", {d, 3 * d}, seed, inv_d);
        gru_wh_ = add_param("gru.wh", {d, 3 * d}, seed, inv_d);
        gru_bi_ = add_param("gru.bi", {3 * d}, seed, inv_d);
        gru_bh_ = add_param("gru.bh", {3 * d}, seed, inv_d);

        pos_emb_ = add_param("decoder.pos", {m, d / 2}, seed, 0.0);
        chan_emb_ = add_param("decoder.chan", {C, d / 2}, seed, 0.0);
        out_w_ = add_param("head.w", {d, w}, seed, inv_d);
        out_b_ = add_param("head.b", {w}, seed, inv_d);

        if (cfg_.use_mamba) {
            const std::size_t D = cfg_.mamba_mode == MambaMode::Mix ? C : 1;
            const std::size_t E = 2 * D, N = cfg_.d_state;
            ssm_.D = D;
            ssm_.E = E;
            ssm_.N = N;
            ssm_.k = cfg_.conv_kernel;
            ssm_.use_conv = cfg_.use_conv;
            const double inv_sd = 1.0 / std::sqrt(static_cast<double>(D));
            const double inv_se = 1.0 / std::sqrt(static_cast<double>(E));
            ssm_.in_w = add_param("mamba.in_w", {D, 2 * E}, seed, inv_sd);
            if (cfg_.use_conv) {
                const double inv_k = 1.0 / std::sqrt(static_cast<double>(cfg_.conv_kernel));
                ssm_.conv_w = add_param("mamba.conv_w", {E, cfg_.conv_kernel}, seed, inv_k);
                ssm_.conv_b = add_param("mamba.conv_b", {E}, seed, inv_k);
            }
            ssm_.dt_w = add_param("mamba.dt_w", {E, E}, seed, inv_se);
            ssm_.dt_b = add_param("mamba.dt_b", {E}, seed, 0.0);
            {
                // softplus(dt_b) starts log-uniform in [1e-3, 1e-1].
                RngStream rng(seed, "init/mamba.dt_b");
                for (double& v : ssm_.dt_b.values()) {
                    double u = std::exp(rng.next_uniform(std::log(1e-3), std::log(1e-1)));
                    v = std::log(std::expm1(u));
                }
            }
            ssm_.b_w = add_param("mamba.b_w", {E, N}, seed, inv_se);
            ssm_.c_w = add_param("mamba.c_w", {E, N}, seed, inv_se);
            ssm_.a_log = add_param("mamba.a_log", {E, N}, seed, 0.0);
            for (std::size_t e = 0; e < E; ++e)
                for (std::size_t j = 0; j < N; ++j)
                    ssm_.a_log.values()[e * N + j] = std::log(static_cast<double>(j + 1));
            ssm_.d_skip = add_param("mamba.d_skip", {E}, seed, 0.0);
            for (double& v : ssm_.d_skip.values()) v = 1.0;
            ssm_.out_w = add_param("mamba.out_w", {E, D}, seed, inv_se);
        }
    }

    ModelConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;
    RngStream drop_rng_;

    Tensor exp_w_, exp_b_, cmp_w_, cmp_b_, res_w_, res_b_;
    Tensor seg_w_, seg_b_;
    Tensor gru_wi_, gru_wh_, gru_bi_, gru_bh_;
    Tensor pos_emb_, chan_emb_, out_w_, out_b_;
    SsmBlock ssm_;
};

} // namespace ismrnn
