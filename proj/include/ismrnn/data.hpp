#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ismrnn {

// A benchmark CSV after ingestion: `date` column parsed and order-checked,
// every remaining cell numeric.  values is T x C row-major.
struct RawSeries {
    std::vector<std::int64_t> timestamps;
    std::vector<std::string> channel_names;
    std::vector<double> values;
    std::size_t T = 0;
    std::size_t C = 0;
    std::string frequency;
    std::uint64_t content_hash = 0;
};

namespace detail {

// Encodes a calendar stamp into a key that preserves chronological order;
// only ordering matters downstream.
inline std::int64_t timestamp_key(int y, int mo, int d, int h, int mi, int s) {
    return ((((static_cast<std::int64_t>(y) * 13 + mo) * 32 + d) * 24 + h) * 60 + mi) * 60 + s;
}

inline std::int64_t parse_timestamp(const std::string& cell, std::size_t line) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
    int n = std::sscanf(cell.c_str(), "%d-%d-%d %d:%d:%d", &y, &mo, &d, &h, &mi, &s);
    if (n != 3 && n != 5 && n != 6)
        throw DataError("line " + std::to_string(line) + ": unparsable timestamp '" + cell + "'");
    if (mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59 ||
        s < 0 || s > 60)
        throw DataError("line " + std::to_string(line) + ": timestamp out of range '" + cell + "'");
    return timestamp_key(y, mo, d, h, mi, s);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
        std::size_t comma = line.find(',', start);
        std::string cell = line.substr(start, comma == std::string::npos ? comma : comma - start);
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' '))
            cell.pop_back();
        while (!cell.empty() && cell.front() == ' ')
            cell.erase(cell.begin());
        cells.push_back(std::move(cell));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return cells;
}

} // namespace detail

// Loads a benchmark CSV: first column `date`, remaining columns numeric
// channels.  Rejects missing or unparsable cells (naming line and column) and
// non-increasing timestamps; imputation would corrupt the benchmark.
inline RawSeries load_csv(const std::string& path, const std::string& frequency = "") {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open data file '" + path + "'");
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    RawSeries out;
    out.frequency = frequency;
    out.content_hash = fnv1a64(content.data(), content.size());

    std::size_t pos = 0, line_no = 0;
    auto next_line = [&](std::string& line) -> bool {
        if (pos >= content.size()) return false;
        std::size_t nl = content.find('\n', pos);
        line = content.substr(pos, nl == std::string::npos ? nl : nl - pos);
        pos = nl == std::string::npos ? content.size() : nl + 1;
        ++line_no;
        return true;
    };

    std::string line;
    if (!next_line(line))
        throw DataError("'" + path + "' is empty");
    auto header = detail::split_csv_line(line);
    if (header.size() < 2 || header[0] != "date")
        throw DataError("'" + path + "': header must start with a date column followed by channels");
    out.channel_names.assign(header.begin() + 1, header.end());
    out.C = out.channel_names.size();

    std::int64_t prev_key = 0;
    bool first = true;
    while (next_line(line)) {
        if (line.empty() || line == "\r") continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != out.C + 1)
            throw DataError("line " + std::to_string(line_no) + ": expected " +
                            std::to_string(out.C + 1) + " cells, got " +
                            std::to_string(cells.size()));
        std::int64_t key = detail::parse_timestamp(cells[0], line_no);
        if (!first && key <= prev_key)
            throw DataError("line " + std::to_string(line_no) +
                            ": timestamps not strictly increasing");
        prev_key = key;
        first = false;
        out.timestamps.push_back(key);
        for (std::size_t c = 0; c < out.C; ++c) {
            const std::string& cell = cells[c + 1];
            if (cell.empty())
                throw DataError("line " + std::to_string(line_no) + ", column '" +
                                out.channel_names[c] + "': missing cell");
            char* end = nullptr;
            double v = std::strtod(cell.c_str(), &end);
            if (end != cell.c_str() + cell.size() || !std::isfinite(v))
                throw DataError("line " + std::to_string(line_no) + ", column '" +
                                out.channel_names[c] + "': unparsable cell '" + cell + "'");
            out.values.push_back(v);
        }
    }
    out.T = out.timestamps.size();
    if (out.T == 0)
        throw DataError("'" + path + "' has no data rows");
    return out;
}

// ---- splits ----

// Ratio splits cut at floor(r*T); the electricity-transformer conventions use
// the community 12/4/4-month borders so results line up with the published
// baseline protocol.
enum class SplitConvention { Ratio, EttHourly, EttMinute };

enum class SplitTag { Train, Val, Test };

inline const char* split_name(SplitTag t) {
    switch (t) {
    case SplitTag::Train: return "train";
    case SplitTag::Val: return "val";
    case SplitTag::Test: return "test";
    }
    return "?";
}

struct SplitRanges {
    std::size_t train_begin = 0, train_end = 0;
    std::size_t val_begin = 0, val_end = 0;
    std::size_t test_begin = 0, test_end = 0;

    std::size_t begin(SplitTag t) const {
        return t == SplitTag::Train ? train_begin : t == SplitTag::Val ? val_begin : test_begin;
    }
    std::size_t end(SplitTag t) const {
        return t == SplitTag::Train ? train_end : t == SplitTag::Val ? val_end : test_end;
    }
};

inline SplitRanges split_series(std::size_t T, SplitConvention conv,
                                double r_train = 0.7, double r_val = 0.1,
                                double r_test = 0.2) {
    SplitRanges r;
    switch (conv) {
    case SplitConvention::Ratio: {
        if (std::abs(r_train + r_val + r_test - 1.0) > 1e-9)
            throw ConfigError("split ratios must sum to 1");
        const std::size_t nt = static_cast<std::size_t>(r_train * static_cast<double>(T));
        const std::size_t nv = static_cast<std::size_t>(r_val * static_cast<double>(T));
        if (nt == 0 || nv == 0 || nt + nv >= T)
            throw ConfigError("split ratios leave an empty split for T=" + std::to_string(T));
        r = {0, nt, nt, nt + nv, nt + nv, T};
        break;
    }
    case SplitConvention::EttHourly: {
        const std::size_t need = 14400;
        if (T < need)
            throw ConfigError("hourly border split needs " + std::to_string(need) +
                              " points, series has " + std::to_string(T));
        r = {0, 8640, 8640, 11520, 11520, 14400};
        break;
    }
    case SplitConvention::EttMinute: {
        const std::size_t need = 57600;
        if (T < need)
            throw ConfigError("minute border split needs " + std::to_string(need) +
                              " points, series has " + std::to_string(T));
        r = {0, 34560, 34560, 46080, 46080, 57600};
        break;
    }
    }
    return r;
}

// ---- standardization ----

// Per-channel affine transform fit on the training range only.
struct Scaler {
    std::vector<double> mean;
    std::vector<double> stddev;

    double apply_one(double x, std::size_t c) const { return (x - mean[c]) / stddev[c]; }
    double invert_one(double z, std::size_t c) const { return z * stddev[c] + mean[c]; }
};

inline Scaler fit_scaler(const std::vector<double>& values, std::size_t C,
                         std::size_t begin, std::size_t end,
                         const std::vector<std::string>* names = nullptr) {
    if (begin >= end)
        throw ContractError("fit_scaler: empty training range");
    const std::size_t n = end - begin;
    Scaler s;
    s.mean.assign(C, 0.0);
    s.stddev.assign(C, 0.0);
    for (std::size_t t = begin; t < end; ++t)
        for (std::size_t c = 0; c < C; ++c)
            s.mean[c] += values[t * C + c];
    for (std::size_t c = 0; c < C; ++c) s.mean[c] /= static_cast<double>(n);
    for (std::size_t t = begin; t < end; ++t)
        for (std::size_t c = 0; c < C; ++c) {
            const double d = values[t * C + c] - s.mean[c];
            s.stddev[c] += d * d;
        }
    for (std::size_t c = 0; c < C; ++c) {
        s.stddev[c] = std::sqrt(s.stddev[c] / static_cast<double>(n));
        if (s.stddev[c] == 0.0) {
            std::string name = names && c < names->size() ? (*names)[c] : std::to_string(c);
            throw DegenerateChannelError("channel '" + name +
                                         "' has zero variance on the training range");
        }
    }
    return s;
}

// The series after standardization, shared by every split's dataset.
struct StandardizedSeries {
    std::shared_ptr<std::vector<double>> values;
    std::size_t T = 0;
    std::size_t C = 0;
    Scaler scaler;
    std::vector<std::string> channel_names;
    std::uint64_t content_hash = 0;
};

inline StandardizedSeries standardize(const RawSeries& raw, const SplitRanges& ranges) {
    StandardizedSeries out;
    out.T = raw.T;
    out.C = raw.C;
    out.channel_names = raw.channel_names;
    out.content_hash = raw.content_hash;
    out.scaler = fit_scaler(raw.values, raw.C, ranges.train_begin, ranges.train_end,
                            &raw.channel_names);
    out.values = std::make_shared<std::vector<double>>(raw.values.size());
    for (std::size_t t = 0; t < raw.T; ++t)
        for (std::size_t c = 0; c < raw.C; ++c)
            (*out.values)[t * raw.C + c] = out.scaler.apply_one(raw.values[t * raw.C + c], c);
    return out;
}

// ---- windows ----

// Sliding supervised pairs over one split.  Windows are materialized per
// batch rather than stored: window i reads input rows [offset, offset+L) and
// target rows [offset+L, offset+L+H) straight from the shared series.
class WindowedDataset {
public:
    WindowedDataset() = default;

    WindowedDataset(std::shared_ptr<const std::vector<double>> series, std::size_t C,
                    std::size_t range_begin, std::size_t range_end, std::size_t L,
                    std::size_t H, std::size_t stride, SplitTag tag)
        : series_(std::move(series)), C_(C), L_(L), H_(H), tag_(tag) {
        if (L == 0 || H == 0)
            throw ParamError("make_windows: L and H must be positive");
        if (stride == 0)
            throw ParamError("make_windows: stride must be positive");
        if (range_end < range_begin || range_end - range_begin < L + H)
            throw ConfigError(std::string("make_windows: ") + split_name(tag) + " range of " +
                              std::to_string(range_end - range_begin) +
                              " points cannot hold one window of " + std::to_string(L + H));
        const std::size_t span = range_end - range_begin - L - H;
        for (std::size_t i = 0; i <= span; i += stride)
            offsets_.push_back(range_begin + i);
    }

    std::size_t size() const { return offsets_.size(); }
    std::size_t lookback() const { return L_; }
    std::size_t horizon() const { return H_; }
    std::size_t channels() const { return C_; }
    SplitTag tag() const { return tag_; }
    std::size_t offset(std::size_t i) const { return offsets_.at(i); }

    // (B, L, C) inputs and (B, H, C) targets for the given window indices.
    std::pair<Tensor, Tensor> get_batch(const std::vector<std::size_t>& idx) const {
        const std::size_t B = idx.size();
        std::vector<double> xs(B * L_ * C_);
        std::vector<double> ys(B * H_ * C_);
        const double* src = series_->data();
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = offsets_.at(idx[b]);
            std::memcpy(xs.data() + b * L_ * C_, src + off * C_, L_ * C_ * sizeof(double));
            std::memcpy(ys.data() + b * H_ * C_, src + (off + L_) * C_, H_ * C_ * sizeof(double));
        }
        return {Tensor::from_values({B, L_, C_}, std::move(xs)),
                Tensor::from_values({B, H_, C_}, std::move(ys))};
    }

private:
    std::shared_ptr<const std::vector<double>> series_;
    std::size_t C_ = 0, L_ = 0, H_ = 0;
    SplitTag tag_ = SplitTag::Train;
    std::vector<std::size_t> offsets_;
};

// Windows for one split of a standardized series.  Validation and test
// inputs reach back up to L points into the preceding split for lookback
// context; their targets stay inside their own range.
inline WindowedDataset windows_for_split(const StandardizedSeries& s, const SplitRanges& r,
                                         SplitTag tag, std::size_t L, std::size_t H,
                                         std::size_t stride = 1) {
    std::size_t begin = r.begin(tag);
    const std::size_t end = r.end(tag);
    if (tag != SplitTag::Train)
        begin -= std::min(begin, L);
    return WindowedDataset(std::shared_ptr<const std::vector<double>>(s.values), s.C, begin,
                           end, L, H, stride, tag);
}

// Deterministic batch order for one epoch: a pure function of (seed, epoch).
// Every index appears exactly once; the final partial batch is emitted.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t N, std::size_t batch_size,
                                                          bool shuffle, std::uint64_t seed,
                                                          std::size_t epoch) {
    if (batch_size == 0)
        throw ParamError("make_batches: batch size must be positive");
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    if (shuffle) {
        RngStream rng(seed, "shuffle/epoch-" + std::to_string(epoch));
        for (std::size_t i = N; i > 1; --i) {
            // Bounded draw by 128-bit multiply; bias is 2^-64.
            const std::size_t j = static_cast<std::size_t>(
                (static_cast<unsigned __int128>(rng.next_u64()) * i) >> 64);
            std::swap(order[i - 1], order[j]);
        }
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t at = 0; at < N; at += batch_size) {
        const std::size_t take = std::min(batch_size, N - at);
        batches.emplace_back(order.begin() + at, order.begin() + at + take);
    }
    return batches;
}

// Everything the trainer and evaluator need for one dataset.
struct DataBundle {
    StandardizedSeries series;
    SplitRanges ranges;
    WindowedDataset train, val, test;
};

inline DataBundle prepare_data(const RawSeries& raw, SplitConvention conv, std::size_t L,
                               std::size_t H, double r_train = 0.7, double r_val = 0.1,
                               double r_test = 0.2) {
    DataBundle b;
    b.ranges = split_series(raw.T, conv, r_train, r_val, r_test);
    b.series = standardize(raw, b.ranges);
    b.train = windows_for_split(b.series, b.ranges, SplitTag::Train, L, H);
    b.val = windows_for_split(b.series, b.ranges, SplitTag::Val, L, H);
    b.test = windows_for_split(b.series, b.ranges, SplitTag::Test, L, H);
    return b;
}

// Deterministic stand-in for the benchmark CSVs: two incommensurate
// harmonics per channel, phase-shifted across channels, plus light noise so
// training has something to chew on.
inline RawSeries synthetic_series(std::size_t T, std::size_t C, std::uint64_t seed = 99) {
    if (T == 0 || C == 0) throw ParamError("synthetic_series: T and C must be positive");
    RngStream rng(seed, "synthetic");
    RawSeries raw;
    raw.T = T;
    raw.C = C;
    raw.frequency = "h";
    raw.values.resize(T * C);
    for (std::size_t c = 0; c < C; ++c) raw.channel_names.push_back("s" + std::to_string(c));
    for (std::size_t t = 0; t < T; ++t) {
        raw.timestamps.push_back(static_cast<std::int64_t>(t));
        for (std::size_t c = 0; c < C; ++c) {
            const double tt = static_cast<double>(t), cc = static_cast<double>(c);
            raw.values[t * C + c] = std::sin(2.0 * 3.14159265358979323846 * tt / 24.0 + 0.7 * cc) +
                                    0.3 * std::sin(2.0 * 3.14159265358979323846 * tt / 96.0 +
                                                   1.3 * cc) +
                                    0.05 * rng.next_normal();
        }
    }
    raw.content_hash = fnv1a64(raw.values.data(), raw.values.size() * sizeof(double));
    return raw;
}

} // namespace ismrnn
