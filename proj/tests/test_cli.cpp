#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ismrnn/config.hpp"

// End-to-end checks of the command-line tool, driven as a subprocess the way
// a user would run it.

namespace fs = std::filesystem;

namespace {

const std::string kCli = ISMRNN_CLI;
const std::string kSmoke = std::string(ISMRNN_CONFIG_DIR) + "/synthetic_smoke.conf";

struct Sandbox {
    fs::path dir;
    Sandbox() {
        dir = fs::temp_directory_path() / "ismrnn_cli_test";
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Sandbox() { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
};

int run_cli(const std::string& args, const std::string& log) {
    const std::string cmd = kCli + " " + args + " >'" + log + "' 2>&1";
    const int rc = std::system(cmd.c_str());
    if (rc == -1 || !WIFEXITED(rc)) return -1;
    return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t count_lines(const std::string& text) {
    std::size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

TEST(CliTrain, LeavesCheckpointHistoryReportAndResolvedConfig) {
    Sandbox sb;
    const std::string out = sb.path("run");
    ASSERT_EQ(run_cli("train --config " + kSmoke + " --out " + out, sb.path("log")), 0)
        << slurp(sb.path("log"));
    EXPECT_TRUE(fs::exists(out + "/best.ckpt"));
    EXPECT_TRUE(fs::exists(out + "/report.json"));
    const std::string history = slurp(out + "/history.csv");
    EXPECT_EQ(count_lines(history), 3u); // header + one row per epoch
    EXPECT_EQ(history.rfind("epoch,train_loss,val_loss,lr\n", 0), 0u);

    // the resolved config in the run directory parses back and pins the run
    ismrnn::RunConfig rc = ismrnn::parse_config(out + "/config.conf");
    rc.validate();
    EXPECT_EQ(rc.dataset, "synthetic");
    EXPECT_EQ(rc.train.epochs, 2u);
    EXPECT_EQ(rc.out_dir, out);
}

TEST(CliTrain, SetOverrideWinsOverTheConfigFile) {
    Sandbox sb;
    const std::string out = sb.path("run");
    ASSERT_EQ(run_cli("train --config " + kSmoke + " --set epochs=1 --out " + out,
                      sb.path("log")),
              0);
    EXPECT_EQ(count_lines(slurp(out + "/history.csv")), 2u);
    ismrnn::RunConfig rc = ismrnn::parse_config(out + "/config.conf");
    EXPECT_EQ(rc.train.epochs, 1u); // the echo records the override, not the file
}

TEST(CliTrain, TwoRunsAreBitwiseIdentical) {
    Sandbox sb;
    ASSERT_EQ(run_cli("train --config " + kSmoke + " --out " + sb.path("a"), sb.path("log1")),
              0);
    ASSERT_EQ(run_cli("train --config " + kSmoke + " --out " + sb.path("b"), sb.path("log2")),
              0);
    EXPECT_EQ(slurp(sb.path("a") + "/history.csv"), slurp(sb.path("b") + "/history.csv"));
    EXPECT_EQ(slurp(sb.path("a") + "/best.ckpt"), slurp(sb.path("b") + "/best.ckpt"));
}

TEST(CliEval, ReproducesTheTrainingTimeValidationMetric) {
    Sandbox sb;
    const std::string out = sb.path("run");
    ASSERT_EQ(run_cli("train --config " + kSmoke + " --out " + out, sb.path("log")), 0);

    // best validation MSE according to the history file
    std::istringstream hist(slurp(out + "/history.csv"));
    std::string line;
    std::getline(hist, line); // header
    double best_val = 1e300;
    while (std::getline(hist, line)) {
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        std::getline(ss, cell, ',');
        std::getline(ss, cell, ',');
        best_val = std::min(best_val, std::strtod(cell.c_str(), nullptr));
    }

    ASSERT_EQ(run_cli("eval --config " + kSmoke + " --out " + out + " --split val",
                      sb.path("eval_log")),
              0);
    const std::string eval_out = slurp(sb.path("eval_log"));
    const std::size_t at = eval_out.find("mse=");
    ASSERT_NE(at, std::string::npos) << eval_out;
    const double mse = std::strtod(eval_out.c_str() + at + 4, nullptr);
    EXPECT_NEAR(mse, best_val, 1e-12);
}

TEST(CliAblate, LeavesExactlyFourReportJsonsAndTheAggregate) {
    Sandbox sb;
    const std::string out = sb.path("run");
    ASSERT_EQ(run_cli("ablate --config " + kSmoke + " --set epochs=1 --out " + out,
                      sb.path("log")),
              0)
        << slurp(sb.path("log"));
    std::size_t jsons = 0;
    for (const auto& e : fs::directory_iterator(out))
        if (e.path().filename().string().rfind("ablation_", 0) == 0 &&
            e.path().extension() == ".json")
            ++jsons;
    EXPECT_EQ(jsons, 4u);
    const std::string agg = slurp(out + "/aggregate.csv");
    EXPECT_EQ(count_lines(agg), 5u); // header + one row per variant
    EXPECT_EQ(agg.rfind("dataset,horizon,variant,mse,mae\n", 0), 0u);
}

TEST(CliSweep, WritesPairedReportsPerLookback) {
    Sandbox sb;
    const std::string out = sb.path("run");
    ASSERT_EQ(run_cli("sweep --config " + kSmoke + " --set epochs=1 --out " + out +
                          " --lookbacks 12 24",
                      sb.path("log")),
              0)
        << slurp(sb.path("log"));
    EXPECT_TRUE(fs::exists(out + "/sweep_l12_m_lr.json"));
    EXPECT_TRUE(fs::exists(out + "/sweep_l12_none.json"));
    EXPECT_TRUE(fs::exists(out + "/sweep_l24_m_lr.json"));
    EXPECT_TRUE(fs::exists(out + "/sweep_l24_none.json"));
    EXPECT_EQ(count_lines(slurp(out + "/aggregate.csv")), 5u);
}

TEST(CliDump, WritesTheRequestedWindowCount) {
    Sandbox sb;
    const std::string out = sb.path("run");
    ASSERT_EQ(run_cli("train --config " + kSmoke + " --out " + out, sb.path("log")), 0);
    ASSERT_EQ(run_cli("dump --config " + kSmoke + " --out " + out + " --limit 2",
                      sb.path("dump_log")),
              0);
    // header + limit * horizon * channels rows
    EXPECT_EQ(count_lines(slurp(out + "/predictions.csv")), 1u + 2u * 12u * 2u);
}

TEST(CliProfile, PrintsOneParseableMetricsLine) {
    Sandbox sb;
    ASSERT_EQ(run_cli("profile --config " + kSmoke + " --out " + sb.path("run"),
                      sb.path("log")),
              0);
    const std::string log = slurp(sb.path("log"));
    EXPECT_EQ(log.rfind("epoch_seconds=", 0), 0u) << log;
    EXPECT_NE(log.find("peak_rss_bytes="), std::string::npos);
    EXPECT_TRUE(fs::exists(sb.path("run") + "/profile.json"));
}

TEST(CliErrors, UnknownOverrideKeyExitsWithConfigCode) {
    Sandbox sb;
    EXPECT_EQ(run_cli("train --config " + kSmoke + " --set bogus=1 --out " + sb.path("run"),
                      sb.path("log")),
              2);
    EXPECT_NE(slurp(sb.path("log")).find("bogus"), std::string::npos);
}

TEST(CliErrors, MissingHorizonExitsWithConfigCode) {
    Sandbox sb;
    std::ofstream(sb.path("no_h.conf")) << "dataset = synthetic\n";
    EXPECT_EQ(run_cli("train --config " + sb.path("no_h.conf") + " --out " + sb.path("run"),
                      sb.path("log")),
              2);
    EXPECT_NE(slurp(sb.path("log")).find("horizon"), std::string::npos);
}

TEST(CliErrors, MissingDataFileExitsWithDataCode) {
    Sandbox sb;
    EXPECT_EQ(run_cli("train --config " + kSmoke + " --set dataset=etth2 --set d_state=4" +
                          " --set data=" + sb.path("absent.csv") + " --out " + sb.path("run"),
                      sb.path("log")),
              3);
    EXPECT_NE(slurp(sb.path("log")).find("absent.csv"), std::string::npos);
}

TEST(CliErrors, MissingCheckpointExitsWithDataCode) {
    Sandbox sb;
    EXPECT_EQ(run_cli("eval --config " + kSmoke + " --out " + sb.path("run"), sb.path("log")),
              3);
}

} // namespace
