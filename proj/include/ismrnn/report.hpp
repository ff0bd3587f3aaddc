#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ismrnn/eval.hpp"

// Reports on disk: one JSON document per run, plus an aggregate CSV table
// collecting the headline numbers of many runs for side-by-side reading.

namespace ismrnn {

inline nlohmann::json report_to_json(const ExperimentReport& r) {
    nlohmann::json j;
    j["dataset"] = r.dataset;
    j["lookback"] = r.lookback;
    j["horizon"] = r.horizon;
    j["variant"] = r.variant;
    j["conv"] = r.use_conv;
    j["mse"] = r.mse;
    j["mae"] = r.mae;
    j["epoch_seconds"] = r.epoch_seconds;
    j["peak_rss_bytes"] = r.peak_rss_bytes;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    j["data_hash"] = r.data_hash;
    j["parameter_count"] = r.parameter_count;
    return j;
}

inline ExperimentReport report_from_json(const nlohmann::json& j) {
    ExperimentReport r;
    r.dataset = j.at("dataset").get<std::string>();
    r.lookback = j.at("lookback").get<std::size_t>();
    r.horizon = j.at("horizon").get<std::size_t>();
    r.variant = j.at("variant").get<std::string>();
    r.use_conv = j.at("conv").get<bool>();
    r.mse = j.at("mse").get<double>();
    r.mae = j.at("mae").get<double>();
    r.epoch_seconds = j.at("epoch_seconds").get<std::vector<double>>();
    r.peak_rss_bytes = j.at("peak_rss_bytes").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::uint64_t>();
    r.data_hash = j.at("data_hash").get<std::uint64_t>();
    r.parameter_count = j.at("parameter_count").get<std::size_t>();
    return r;
}

inline void write_report_json(const std::string& path, const ExperimentReport& r) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open report file '" + path + "' for writing");
    out << report_to_json(r).dump(2) << '\n';
    if (!out) throw DataError("failed writing report file '" + path + "'");
}

inline ExperimentReport read_report_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open report file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("report file '" + path + "' is not valid JSON: " + e.what());
    }
    return report_from_json(j);
}

// The cross-run table: one row per report, headline metrics only.
inline void write_aggregate_csv(const std::string& path,
                                const std::vector<ExperimentReport>& reports) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open aggregate file '" + path + "' for writing");
    out << "dataset,horizon,variant,mse,mae\n";
    char buf[256];
    for (const ExperimentReport& r : reports) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%s,%.17g,%.17g\n", r.dataset.c_str(), r.horizon,
                      r.variant.c_str(), r.mse, r.mae);
        out << buf;
    }
    if (!out) throw DataError("failed writing aggregate file '" + path + "'");
}

} // namespace ismrnn
