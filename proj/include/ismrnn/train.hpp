#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace ismrnn {

enum class LossKind { Mse, Mae };

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "mse") return LossKind::Mse;
    if (s == "mae") return LossKind::Mae;
    throw ConfigError("unknown loss '" + s + "' (expected mse or mae)");
}

// Mean over every element of the squared or absolute error.
inline Tensor loss_value(const Tensor& pred, const Tensor& target, LossKind kind) {
    if (pred.shape() != target.shape())
        detail::shape_fail("loss", pred.shape(), target.shape());
    Tensor err = sub(pred, target);
    return mean_all(kind == LossKind::Mse ? square(err) : abs(err));
}

struct TrainConfig {
    std::size_t epochs = 30;
    double lr = 1e-3;
    std::size_t decay_start = 15; // constant through this epoch, decays after
    double decay_factor = 0.9;
    std::size_t batch_size = 256;
    std::uint64_t seed = 1;
    LossKind loss = LossKind::Mse;
    double clip_norm = 5.0; // global-norm gradient clip; 0 disables
    std::size_t patience = 0; // stop after this many epochs without a new best; 0 runs all

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (!(decay_factor > 0.0 && decay_factor <= 1.0))
            throw ConfigError("decay factor must be in (0, 1]");
        if (decay_start > epochs)
            throw ConfigError("decay start " + std::to_string(decay_start) +
                              " exceeds epoch count " + std::to_string(epochs));
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (clip_norm < 0.0) throw ConfigError("clip norm must be >= 0");
    }
};

// Constant through decay_start, then multiplied by the factor each epoch.
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
    if (epoch < 1) throw ParamError("lr_at: epochs are 1-based");
    if (epoch <= cfg.decay_start) return cfg.lr;
    return cfg.lr * std::pow(cfg.decay_factor, static_cast<double>(epoch - cfg.decay_start));
}

struct TrainState {
    std::vector<std::vector<double>> m, v; // first/second moments, registry order
    std::size_t step = 0;
    std::size_t epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
};

inline TrainState make_train_state(const IsmrnnModel& model) {
    TrainState st;
    for (const auto& [name, t] : model.parameters()) {
        st.m.emplace_back(t.size(), 0.0);
        st.v.emplace_back(t.size(), 0.0);
    }
    return st;
}

// Scales all gradients so their global L2 norm is at most max_norm.
inline double clip_global_norm(IsmrnnModel& model, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, t] : model.parameters())
        for (double g : t.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (const auto& [name, t] : model.parameters()) {
            Tensor h = t;
            for (double& g : h.grad()) g *= scale;
        }
    }
    return norm;
}

// One Adam update over every parameter from its accumulated gradients.
inline void adam_step(IsmrnnModel& model, TrainState& st, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    st.step += 1;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    const auto& params = model.parameters();
    for (std::size_t p = 0; p < params.size(); ++p) {
        const auto& [name, t] = params[p];
        Tensor h = t;
        std::vector<double>& val = h.values();
        const std::vector<double>& g = h.grad();
        std::vector<double>& m = st.m[p];
        std::vector<double>& v = st.v[p];
        for (std::size_t i = 0; i < val.size(); ++i) {
            if (!std::isfinite(g[i]))
                throw NumericError("non-finite gradient in parameter '" + name +
                                   "' at element " + std::to_string(i));
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

struct EpochRecord {
    std::size_t epoch;
    double train_loss;
    double val_loss;
    double lr;
};

struct FitResult {
    std::vector<EpochRecord> history;
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    std::size_t steps = 0;
};

namespace detail {

// Validation MSE with one 64-bit accumulator per run, summed per window and
// divided once, so the answer does not depend on the batch partition.
inline double dataset_mse(IsmrnnModel& model, const WindowedDataset& ds,
                          std::size_t batch_size) {
    double total = 0.0;
    std::size_t count = 0;
    auto batches = make_batches(ds.size(), batch_size, false, 0, 0);
    for (const auto& idx : batches) {
        auto [x, y] = ds.get_batch(idx);
        Tensor pred = model.forward(x, false);
        const std::size_t per = ds.horizon() * ds.channels();
        for (std::size_t b = 0; b < idx.size(); ++b) {
            double s = 0.0;
            for (std::size_t i = 0; i < per; ++i) {
                const double d = pred.values()[b * per + i] - y.values()[b * per + i];
                s += d * d;
            }
            total += s;
            count += per;
        }
    }
    return total / static_cast<double>(count);
}

} // namespace detail

// Epoch loop: shuffled batches, backward, clip, Adam at the scheduled rate;
// after each epoch the validation MSE decides whether to snapshot the
// parameters.  The model ends holding the best-validation parameters.
template <class PerEpoch = std::nullptr_t>
FitResult fit(IsmrnnModel& model, const WindowedDataset& train_ds, const WindowedDataset& val_ds,
              const TrainConfig& cfg, TrainState* state_out = nullptr,
              PerEpoch per_epoch = nullptr) {
    cfg.validate();
    if (train_ds.size() == 0 || val_ds.size() == 0)
        throw DataError("fit: empty training or validation dataset");

    TrainState st = make_train_state(model);
    FitResult res;
    std::vector<double> best_params;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        st.epoch = epoch;
        const double lr = lr_at(epoch, cfg);
        auto batches = make_batches(train_ds.size(), cfg.batch_size, true, cfg.seed, epoch);
        double loss_sum = 0.0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            auto [x, y] = train_ds.get_batch(batches[bi]);
            model.zero_grads();
            Tape tape;
            Tensor loss;
            {
                Tape::Scope scope(tape);
                loss = loss_value(model.forward(x, true), y, cfg.loss);
            }
            const double lv = loss.item();
            if (!std::isfinite(lv))
                throw NumericError("training diverged: loss " + std::to_string(lv) +
                                   " at epoch " + std::to_string(epoch) + " batch " +
                                   std::to_string(bi));
            tape.backward(loss);
            clip_global_norm(model, cfg.clip_norm);
            adam_step(model, st, lr);
            loss_sum += lv;
            ++res.steps;
        }
        const double train_loss = loss_sum / static_cast<double>(batches.size());
        const double val_loss = detail::dataset_mse(model, val_ds, cfg.batch_size);
        res.history.push_back({epoch, train_loss, val_loss, lr});

        if (val_loss < st.best_val) {
            st.best_val = val_loss;
            st.best_epoch = epoch;
            best_params.clear();
            for (const auto& [name, t] : model.parameters())
                best_params.insert(best_params.end(), t.values().begin(), t.values().end());
        }
        if constexpr (!std::is_same_v<PerEpoch, std::nullptr_t>)
            per_epoch(res.history.back());
        if (cfg.patience > 0 && epoch - st.best_epoch >= cfg.patience) break;
    }

    // hand back the best-validation weights
    if (!best_params.empty()) {
        std::size_t off = 0;
        for (const auto& [name, t] : model.parameters()) {
            Tensor h = t;
            std::copy(best_params.begin() + off, best_params.begin() + off + t.size(),
                      h.values().begin());
            off += t.size();
        }
    }
    res.best_val = st.best_val;
    res.best_epoch = st.best_epoch;
    if (state_out) *state_out = st;
    return res;
}

inline void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path, std::ios::binary); // binary: identical bytes on every platform
    if (!out) throw DataError("cannot open history file '" + path + "' for writing");
    out << "epoch,train_loss,val_loss,lr\n";
    char buf[128];
    for (const EpochRecord& r : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss,
                      r.val_loss, r.lr);
        out << buf;
    }
    if (!out) throw DataError("failed writing history file '" + path + "'");
}

} // namespace ismrnn
