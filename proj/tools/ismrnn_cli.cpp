// Command-line front end: train, eval, ablate, sweep, profile, dump.
// Every run directory receives the resolved configuration, so any artifact
// in it can be re-derived from the directory alone.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
// failure, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ismrnn/checkpoint.hpp"
#include "ismrnn/config.hpp"
#include "ismrnn/eval.hpp"
#include "ismrnn/report.hpp"
#include "ismrnn/train.hpp"

namespace fs = std::filesystem;
using namespace ismrnn;

namespace {

struct CliOptions {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_override;
    std::string checkpoint;       // eval/dump: defaults to <out>/best.ckpt
    std::string split = "test";   // eval/dump
    std::size_t limit = 0;        // dump: 0 = every window
    std::vector<std::size_t> lookbacks; // sweep: empty = the default ladder
    std::size_t profile_batch = 8;
};

RunConfig resolve_config(const CliOptions& opt) {
    RunConfig rc = parse_config(opt.config_path);
    for (const std::string& kv : opt.sets) apply_config_override(rc, kv);
    if (!opt.out_override.empty()) rc.out_dir = opt.out_override;
    rc.validate();
    return rc;
}

// Create the run directory and echo the resolved config into it.
void open_run_dir(const RunConfig& rc) {
    fs::create_directories(rc.out_dir);
    write_config_file(rc.out_dir + "/config.conf", rc);
}

const WindowedDataset& pick_split(const DataBundle& data, const std::string& split) {
    if (split == "train") return data.train;
    if (split == "val") return data.val;
    if (split == "test") return data.test;
    throw ConfigError("unknown split '" + split + "' (expected train, val, or test)");
}

std::string ckpt_path(const CliOptions& opt, const RunConfig& rc) {
    return opt.checkpoint.empty() ? rc.out_dir + "/best.ckpt" : opt.checkpoint;
}

// report JSON file names stay shell-friendly: "M&LR" -> "m_lr"
std::string slug(const std::string& variant) {
    std::string s;
    for (char c : variant) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        else if (s.empty() || s.back() != '_') s += '_';
    }
    return s;
}

int cmd_train(const CliOptions& opt) {
    RunConfig rc = resolve_config(opt);
    DataBundle data = load_run_data(rc);
    open_run_dir(rc);

    IsmrnnModel model(rc.model, rc.train.seed);
    std::printf("training %s: %zu channels, %zu train / %zu val / %zu test windows, %zu "
                "parameters\n",
                rc.dataset.c_str(), rc.model.C, data.train.size(), data.val.size(),
                data.test.size(), model.parameter_count());

    TrainState st;
    std::vector<double> epoch_secs;
    auto mark = std::chrono::steady_clock::now();
    FitResult res = fit(model, data.train, data.val, rc.train, &st, [&](const EpochRecord& r) {
        auto now = std::chrono::steady_clock::now();
        epoch_secs.push_back(std::chrono::duration<double>(now - mark).count());
        mark = now;
        std::printf("epoch %zu: train %.6f  val %.6f  lr %.6g  (%.2fs)\n", r.epoch,
                    r.train_loss, r.val_loss, r.lr, epoch_secs.back());
        std::fflush(stdout);
    });

    write_history_csv(rc.out_dir + "/history.csv", res.history);
    save_checkpoint(model, rc.train.seed, rc.out_dir + "/best.ckpt", &st);

    EvalMetrics m = evaluate(model, data.test, rc.train.batch_size);
    ExperimentReport rep;
    rep.dataset = rc.dataset;
    rep.lookback = rc.model.L;
    rep.horizon = rc.model.H;
    rep.variant = variant_name(rc.model.use_mamba
                                   ? (rc.model.use_implicit_residual ? Variant::Full
                                                                     : Variant::MambaOnly)
                                   : (rc.model.use_implicit_residual ? Variant::ResidualOnly
                                                                     : Variant::Plain));
    rep.use_conv = rc.model.use_conv;
    rep.mse = m.mse;
    rep.mae = m.mae;
    rep.epoch_seconds = epoch_secs;
    rep.peak_rss_bytes = ismrnn::detail::peak_rss_bytes();
    rep.seed = rc.train.seed;
    rep.config_hash = config_hash(rc.model, rc.train);
    rep.data_hash = data.series.content_hash;
    rep.parameter_count = model.parameter_count();
    write_report_json(rc.out_dir + "/report.json", rep);

    std::printf("best val %.6f at epoch %zu\n", res.best_val, res.best_epoch);
    std::printf("test mse=%.17g mae=%.17g\n", m.mse, m.mae);
    return 0;
}

int cmd_eval(const CliOptions& opt) {
    RunConfig rc = resolve_config(opt);
    DataBundle data = load_run_data(rc);
    open_run_dir(rc);

    IsmrnnModel model = load_checkpoint(ckpt_path(opt, rc));
    if (model.config().C != rc.model.C)
        throw ShapeError("checkpoint expects " + std::to_string(model.config().C) +
                         " channels but the dataset has " + std::to_string(rc.model.C));
    const WindowedDataset& ds = pick_split(data, opt.split);
    EvalMetrics m = evaluate(model, ds, rc.train.batch_size);
    std::printf("%s mse=%.17g mae=%.17g\n", opt.split.c_str(), m.mse, m.mae);
    return 0;
}

int cmd_ablate(const CliOptions& opt) {
    RunConfig rc = resolve_config(opt);
    DataBundle data = load_run_data(rc);
    open_run_dir(rc);

    auto reports = run_ablation(rc.dataset, data, rc.model, rc.train);
    for (const ExperimentReport& r : reports) {
        write_report_json(rc.out_dir + "/ablation_" + slug(r.variant) + ".json", r);
        std::printf("%-5s mse=%.6f mae=%.6f (%zu parameters)\n", r.variant.c_str(), r.mse,
                    r.mae, r.parameter_count);
    }
    write_aggregate_csv(rc.out_dir + "/aggregate.csv", reports);
    return 0;
}

int cmd_sweep(const CliOptions& opt) {
    RunConfig rc = resolve_config(opt);
    // windows are re-cut per lookback, so load the series once
    RawSeries raw = rc.dataset == "synthetic"
                        ? synthetic_series(rc.synthetic_length, rc.synthetic_channels,
                                           rc.train.seed)
                        : load_csv(rc.data_path);
    rc.model.C = raw.C;
    rc.model.validate();
    open_run_dir(rc);
    SplitRanges ranges = split_series(raw.T, convention_for(rc.dataset));
    StandardizedSeries series = standardize(raw, ranges);

    auto reports = opt.lookbacks.empty()
                       ? lookback_sweep(rc.dataset, series, ranges, rc.model, rc.train)
                       : lookback_sweep(rc.dataset, series, ranges, rc.model, rc.train,
                                        opt.lookbacks);
    for (const ExperimentReport& r : reports) {
        write_report_json(rc.out_dir + "/sweep_l" + std::to_string(r.lookback) + "_" +
                              slug(r.variant) + ".json",
                          r);
        std::printf("L=%-4zu %-5s mse=%.6f mae=%.6f\n", r.lookback, r.variant.c_str(), r.mse,
                    r.mae);
    }
    write_aggregate_csv(rc.out_dir + "/aggregate.csv", reports);
    return 0;
}

int cmd_profile(const CliOptions& opt) {
    RunConfig rc = resolve_config(opt);
    DataBundle data = load_run_data(rc);
    open_run_dir(rc);

    IsmrnnModel model(rc.model, rc.train.seed);
    ProfileResult r = profile(model, data.train, opt.profile_batch);
    std::printf("epoch_seconds=%.6f peak_rss_bytes=%zu parameters=%zu\n", r.epoch_seconds,
                r.peak_rss_bytes, r.parameter_count);
    std::ofstream out(rc.out_dir + "/profile.json", std::ios::binary);
    out << "{\n  \"epoch_seconds\": " << r.epoch_seconds
        << ",\n  \"peak_rss_bytes\": " << r.peak_rss_bytes
        << ",\n  \"parameter_count\": " << r.parameter_count << "\n}\n";
    return 0;
}

int cmd_dump(const CliOptions& opt) {
    RunConfig rc = resolve_config(opt);
    DataBundle data = load_run_data(rc);
    open_run_dir(rc);

    IsmrnnModel model = load_checkpoint(ckpt_path(opt, rc));
    const WindowedDataset& ds = pick_split(data, opt.split);
    const std::size_t n = opt.limit == 0 ? ds.size() : std::min(opt.limit, ds.size());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const std::string path = rc.out_dir + "/predictions.csv";
    dump_predictions(model, ds, idx, path);
    std::printf("wrote %zu windows (%zu rows) to %s\n", n, n * ds.horizon() * ds.channels(),
                path.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"segment recurrent forecaster with state-space preprocessing"};
    app.require_subcommand(1);

    CliOptions opt;
    int (*run)(const CliOptions&) = nullptr;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "run configuration file")->required();
        sub->add_option("--set", opt.sets, "override a config key, e.g. --set epochs=3");
        sub->add_option("--out", opt.out_override, "output directory (wins over the config)");
    };

    CLI::App* train = app.add_subcommand("train", "fit a model; writes checkpoint + history");
    add_common(train);
    train->callback([&] { run = cmd_train; });

    CLI::App* eval = app.add_subcommand("eval", "score a saved checkpoint on one split");
    add_common(eval);
    eval->add_option("--checkpoint", opt.checkpoint, "checkpoint path (default <out>/best.ckpt)");
    eval->add_option("--split", opt.split, "train, val, or test (default test)");
    eval->callback([&] { run = cmd_eval; });

    CLI::App* ablate = app.add_subcommand("ablate", "train all four component variants");
    add_common(ablate);
    ablate->callback([&] { run = cmd_ablate; });

    CLI::App* sweep = app.add_subcommand("sweep", "train full and plain across lookbacks");
    add_common(sweep);
    sweep->add_option("--lookbacks", opt.lookbacks, "lookback lengths (default 48 96 192 336)");
    sweep->callback([&] { run = cmd_sweep; });

    CLI::App* profile = app.add_subcommand("profile", "time one training epoch");
    add_common(profile);
    profile->add_option("--batch", opt.profile_batch, "profiling batch size (default 8)");
    profile->callback([&] { run = cmd_profile; });

    CLI::App* dump = app.add_subcommand("dump", "write per-window predictions to CSV");
    add_common(dump);
    dump->add_option("--checkpoint", opt.checkpoint, "checkpoint path (default <out>/best.ckpt)");
    dump->add_option("--split", opt.split, "train, val, or test (default test)");
    dump->add_option("--limit", opt.limit, "dump only the first N windows (default all)");
    dump->callback([&] { run = cmd_dump; });

    CLI11_PARSE(app, argc, argv);

    try {
        return run(opt);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ParamError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
