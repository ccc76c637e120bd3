#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "hjbcert/cli.hpp"

namespace fs = std::filesystem;
using namespace hjbcert;

namespace {

const fs::path kSpecs = HJBCERT_SPECS_DIR;

struct Outcome {
    int code;
    std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir = fs::temp_directory_path() / (std::string("hjbcert_cli_") + info->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    std::string put(const std::string& name, const std::string& text) {
        std::ofstream(dir / name) << text;
        return (dir / name).string();
    }

    fs::path dir;
};

json load(const fs::path& p) { return io::read_json_file(p); }

}  // namespace

TEST_F(CliTest, OracleEvaluatesMerton) {
    auto r = run_cli({"--out-dir", dir.string(), "oracle", "--family", "merton", "--params",
                      "mu=0.1,sigma=0.2,p=0.5,T=1,B=10", "--eval", "0,1"});
    EXPECT_EQ(r.code, cli::kOk) << r.err;
    EXPECT_NE(r.out.find("1.13314845307"), std::string::npos) << r.out;
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
}

TEST_F(CliTest, InputErrorsExitTwo) {
    EXPECT_EQ(run_cli({"oracle", "--bogus"}).code, cli::kInputError);
    EXPECT_EQ(run_cli({}).code, cli::kInputError);
    auto r = run_cli({"--out-dir", dir.string(), "solve", "--problem", (dir / "missing.json").string(), "--grid",
                      (kSpecs / "merton/grid.json").string()});
    EXPECT_EQ(r.code, cli::kInputError);
    const json m = load(dir / "manifest.json");
    EXPECT_EQ(m.at("status"), "failed");
    EXPECT_TRUE(m.contains("error"));
}

TEST_F(CliTest, FaceliftLeavesConcavePayoffUnchanged) {
    const auto problem = put("problem.json", R"({"family": "merton", "payoff": {"type": "power", "exponent": 0.5}})");
    const auto grid = put("grid.json", R"({"axes": [{"lower": 0.2, "upper": 5, "nodes": 41}]})");
    auto r = run_cli({"--out-dir", dir.string(), "facelift", "--problem", problem, "--grid", grid});
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    std::ifstream in(dir / "ghat.csv");
    const GridFunction ghat = read_csv(in);
    ASSERT_EQ(ghat.size(), 41u);
    for (std::size_t k = 0; k < ghat.size(); ++k) EXPECT_DOUBLE_EQ(ghat[k], std::sqrt(ghat.grid.physical_point(k)[0]));
    EXPECT_EQ(load(dir / "facelift-report.json").at("sup_distance_to_payoff"), 0.0);
}

TEST_F(CliTest, GeneralFaceliftNonConvergenceExitsThree) {
    const auto problem = put("problem.json", R"({"family": "constant", "params": {"s": [[0.3]]},
        "payoff": {"type": "abs", "center": 1}, "constraint": {"type": "linear", "m": [[-1]]}})");
    const auto grid = put("grid.json", R"({"axes": [{"lower": 0, "upper": 2, "nodes": 41}], "facelift": {"max_iters": 1}})");
    auto r = run_cli({"--out-dir", dir.string(), "facelift", "--problem", problem, "--grid", grid});
    EXPECT_EQ(r.code, cli::kComputeError) << r.out << r.err;
    EXPECT_EQ(load(dir / "manifest.json").at("failed_stage"), "facelift");
}

TEST_F(CliTest, InflatedSubsolutionIsNotCertified) {
    auto r = run_cli({"--out-dir", dir.string(), "certify", "--problem", (kSpecs / "merton/problem.json").string(),
                      "--candidate", (kSpecs / "merton/inflated_sub.json").string(), "--budget", "10000", "--fail-fast"});
    EXPECT_EQ(r.code, cli::kNotCertified) << r.err;
    const json rep = load(dir / "report.json");
    EXPECT_FALSE(rep.at("passed").get<bool>());
    ASSERT_FALSE(rep.at("failing").empty());
    EXPECT_NE(r.out.find("failing:"), std::string::npos);
    EXPECT_EQ(load(dir / "manifest.json").at("status"), "not-certified");
}

TEST_F(CliTest, ReplayReproducesSimulationAndDetectsTampering) {
    const fs::path first = dir / "first";
    auto r = run_cli({"--out-dir", first.string(), "--seed", "7", "simulate", "--problem",
                      (kSpecs / "merton/problem.json").string(), "--policy", (kSpecs / "merton/optimal_policy.json").string(),
                      "--x0", "1", "--paths", "2000", "--steps", "16", "--terminal-csv", "terminal.csv"});
    ASSERT_EQ(r.code, cli::kOk) << r.err;
    auto again = run_cli({"--manifest", (first / "manifest.json").string(), "--out-dir", (dir / "second").string()});
    EXPECT_EQ(again.code, cli::kOk) << again.err;
    EXPECT_TRUE(load(dir / "second/manifest.json").at("replay_matches").get<bool>());

    json m = load(first / "manifest.json");
    m["outputs"][0]["sha256"] = std::string(64, '0');
    std::ofstream(dir / "tampered.json") << m.dump();
    auto bad = run_cli({"--manifest", (dir / "tampered.json").string(), "--out-dir", (dir / "third").string()});
    EXPECT_EQ(bad.code, cli::kComputeError);
    EXPECT_NE(bad.err.find("differ"), std::string::npos);
}

TEST_F(CliTest, ReplayIntoRecordedDirectoryRejected) {
    const fs::path first = dir / "first";
    ASSERT_EQ(run_cli({"--out-dir", first.string(), "oracle", "--family", "heat", "--params", "sigma=1,T=1", "--eval", "0,0"}).code,
              cli::kOk);
    EXPECT_EQ(run_cli({"--manifest", (first / "manifest.json").string(), "--out-dir", first.string()}).code, cli::kInputError);
}

TEST(Sha256, KnownDigest) {
    EXPECT_EQ(cli::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
