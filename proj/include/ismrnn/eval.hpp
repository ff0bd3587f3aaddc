#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "ismrnn/checkpoint.hpp"
#include "ismrnn/train.hpp"

// Experiment harness: test-set scoring, the four-way ablation grid, lookback
// sweeps, one-epoch runtime/memory profiles, and per-window prediction dumps.
// Everything here scores standardized data with the model in eval mode.

namespace ismrnn {

struct EvalMetrics {
    double mse = 0.0;
    double mae = 0.0;
};

// Mean squared and absolute error over every (window, step, channel) element.
// Error sums are accumulated per window and divided once at the end, so the
// result cannot depend on how windows were grouped into batches.
inline EvalMetrics evaluate(IsmrnnModel& model, const WindowedDataset& ds,
                            std::size_t batch_size = 64) {
    if (ds.size() == 0) throw DataError("evaluate: empty dataset");
    double total_se = 0.0, total_ae = 0.0;
    std::size_t count = 0;
    auto batches = make_batches(ds.size(), batch_size, false, 0, 0);
    for (const auto& idx : batches) {
        auto [x, y] = ds.get_batch(idx);
        Tensor pred = model.forward(x, false);
        const std::size_t per = ds.horizon() * ds.channels();
        for (std::size_t b = 0; b < idx.size(); ++b) {
            double se = 0.0, ae = 0.0;
            for (std::size_t i = 0; i < per; ++i) {
                const double d = pred.values()[b * per + i] - y.values()[b * per + i];
                se += d * d;
                ae += std::abs(d);
            }
            total_se += se;
            total_ae += ae;
            count += per;
        }
    }
    return {total_se / static_cast<double>(count), total_ae / static_cast<double>(count)};
}

// ---- ablation variants ----

// The 2x2 grid over the two removable pieces: the state-space preprocessing
// block and the implicit-segmentation + residual path.  "none" keeps only the
// plain segment recurrence, i.e. the baseline model.
enum class Variant { Full, ResidualOnly, MambaOnly, Plain };

inline const char* variant_name(Variant v) {
    switch (v) {
    case Variant::Full: return "M&LR";
    case Variant::ResidualOnly: return "LR";
    case Variant::MambaOnly: return "M";
    case Variant::Plain: return "none";
    }
    return "?";
}

inline ModelConfig variant_config(ModelConfig base, Variant v) {
    base.use_mamba = v == Variant::Full || v == Variant::MambaOnly;
    base.use_implicit_residual = v == Variant::Full || v == Variant::ResidualOnly;
    return base;
}

// ---- reports ----

struct ExperimentReport {
    std::string dataset;
    std::size_t lookback = 0;
    std::size_t horizon = 0;
    std::string variant;   // "M&LR", "LR", "M", or "none"
    bool use_conv = false;
    double mse = 0.0;
    double mae = 0.0;
    std::vector<double> epoch_seconds;
    std::size_t peak_rss_bytes = 0;
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
    std::uint64_t data_hash = 0;
    std::size_t parameter_count = 0;
};

// Fingerprint of everything that shapes a run: the full model configuration
// plus the training schedule.  Two runs with equal hashes and equal data
// hashes are rerenders of the same experiment.
inline std::uint64_t config_hash(const ModelConfig& mc, const TrainConfig& tc) {
    detail::ByteWriter w;
    detail::write_config(w, mc);
    w.u64(tc.epochs);
    w.f64(tc.lr);
    w.u64(tc.decay_start);
    w.f64(tc.decay_factor);
    w.u64(tc.batch_size);
    w.u64(tc.seed);
    w.u8(tc.loss == LossKind::Mse ? 0 : 1);
    w.f64(tc.clip_norm);
    w.u64(tc.patience);
    return fnv1a64(w.bytes.data(), w.bytes.size());
}

namespace detail {

// Process-wide peak resident set size in bytes, from the kernel's high-water
// mark.  The mark never decreases, so when comparing two configurations the
// smaller one has to be measured first.
inline std::size_t peak_rss_bytes() {
    std::ifstream f("/proc/self/status");
    std::string line;
    while (std::getline(f, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            std::size_t kb = 0;
            std::sscanf(line.c_str() + 6, "%zu", &kb);
            return kb * 1024;
        }
    }
    return 0;
}

// Train one variant with the shared schedule, score it on the test split, and
// fill in a report row.
inline ExperimentReport run_variant(const std::string& dataset_name, const DataBundle& data,
                                    const ModelConfig& mc, const TrainConfig& tc,
                                    const char* tag) {
    IsmrnnModel model(mc, tc.seed);
    std::vector<double> epoch_secs;
    auto mark = std::chrono::steady_clock::now();
    fit(model, data.train, data.val, tc, nullptr, [&](const EpochRecord&) {
        auto now = std::chrono::steady_clock::now();
        epoch_secs.push_back(std::chrono::duration<double>(now - mark).count());
        mark = now;
    });
    EvalMetrics m = evaluate(model, data.test, tc.batch_size);
    ExperimentReport r;
    r.dataset = dataset_name;
    r.lookback = mc.L;
    r.horizon = mc.H;
    r.variant = tag;
    r.use_conv = mc.use_conv;
    r.mse = m.mse;
    r.mae = m.mae;
    r.epoch_seconds = std::move(epoch_secs);
    r.peak_rss_bytes = peak_rss_bytes();
    r.seed = tc.seed;
    r.config_hash = config_hash(mc, tc);
    r.data_hash = data.series.content_hash;
    r.parameter_count = model.parameter_count();
    return r;
}

} // namespace detail

// Train and score all four ablation variants of `base` under one shared
// schedule, seed, and dataset.  Reports come back in grid order: M&LR, LR,
// M, none.
inline std::vector<ExperimentReport> run_ablation(const std::string& dataset_name,
                                                  const DataBundle& data,
                                                  const ModelConfig& base,
                                                  const TrainConfig& tc) {
    std::vector<ExperimentReport> out;
    for (Variant v : {Variant::Full, Variant::ResidualOnly, Variant::MambaOnly, Variant::Plain})
        out.push_back(detail::run_variant(dataset_name, data, variant_config(base, v), tc,
                                          variant_name(v)));
    return out;
}

// For each lookback length, train the full model and the plain baseline on
// freshly cut windows and score both on the test split.  Reports alternate
// full, plain per lookback, so entry 2k and 2k+1 share a lookback.
inline std::vector<ExperimentReport> lookback_sweep(
    const std::string& dataset_name, const StandardizedSeries& series, const SplitRanges& ranges,
    const ModelConfig& base, const TrainConfig& tc,
    const std::vector<std::size_t>& lookbacks = {48, 96, 192, 336}) {
    std::vector<ExperimentReport> out;
    for (std::size_t L : lookbacks) {
        if (L == 0 || L % base.seg_len != 0)
            throw ConfigError("lookback sweep: lookback " + std::to_string(L) +
                              " is not divisible by segment length " +
                              std::to_string(base.seg_len));
        DataBundle data;
        data.series = series;
        data.ranges = ranges;
        data.train = windows_for_split(series, ranges, SplitTag::Train, L, base.H);
        data.val = windows_for_split(series, ranges, SplitTag::Val, L, base.H);
        data.test = windows_for_split(series, ranges, SplitTag::Test, L, base.H);
        for (Variant v : {Variant::Full, Variant::Plain}) {
            ModelConfig mc = variant_config(base, v);
            mc.L = L;
            out.push_back(detail::run_variant(dataset_name, data, mc, tc, variant_name(v)));
        }
    }
    return out;
}

// ---- profiling ----

struct ProfileResult {
    double epoch_seconds = 0.0;
    std::size_t peak_rss_bytes = 0;
    std::size_t parameter_count = 0;
};

// Wall-clock one full training epoch (forward, backward, clip, Adam over
// every batch) and report it with the process peak memory.  The optimizer
// state is local, so profiling leaves no trace beyond one epoch of updates
// to the model.
inline ProfileResult profile(IsmrnnModel& model, const WindowedDataset& ds,
                             std::size_t batch_size = 8) {
    if (ds.size() == 0) throw DataError("profile: empty dataset");
    TrainState st = make_train_state(model);
    auto batches = make_batches(ds.size(), batch_size, false, 0, 0);
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& idx : batches) {
        auto [x, y] = ds.get_batch(idx);
        model.zero_grads();
        Tape tape;
        Tensor loss;
        {
            Tape::Scope scope(tape);
            loss = loss_value(model.forward(x, true), y, LossKind::Mse);
        }
        tape.backward(loss);
        clip_global_norm(model, 5.0);
        adam_step(model, st, 1e-3);
    }
    const auto t1 = std::chrono::steady_clock::now();
    ProfileResult r;
    r.epoch_seconds = std::chrono::duration<double>(t1 - t0).count();
    r.peak_rss_bytes = detail::peak_rss_bytes();
    r.parameter_count = model.parameter_count();
    return r;
}

// ---- prediction dumps ----

// One CSV row per predicted element: absolute series position, channel,
// target, prediction, and the split the window came from.  Values are
// printed with enough digits to round-trip, so re-scoring the file
// reproduces evaluate() exactly.
inline void dump_predictions(IsmrnnModel& model, const WindowedDataset& ds,
                             const std::vector<std::size_t>& indices, const std::string& path,
                             std::size_t batch_size = 64) {
    for (std::size_t i : indices)
        if (i >= ds.size())
            throw ParamError("dump_predictions: window index " + std::to_string(i) +
                             " out of range (dataset has " + std::to_string(ds.size()) +
                             " windows)");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open prediction file '" + path + "' for writing");
    out << "t,channel,y_true,y_pred,split\n";
    const char* split = split_name(ds.tag());
    const std::size_t H = ds.horizon(), C = ds.channels();
    char buf[160];
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        const std::size_t stop = std::min(indices.size(), start + batch_size);
        std::vector<std::size_t> idx(indices.begin() + start, indices.begin() + stop);
        auto [x, y] = ds.get_batch(idx);
        Tensor pred = model.forward(x, false);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const std::size_t base_t = ds.offset(idx[b]) + ds.lookback();
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t at = (b * H + h) * C + c;
                    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%s\n", base_t + h, c,
                                  y.values()[at], pred.values()[at], split);
                    out << buf;
                }
        }
    }
    if (!out) throw DataError("failed writing prediction file '" + path + "'");
}

} // namespace ismrnn
