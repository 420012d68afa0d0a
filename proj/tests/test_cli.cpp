// End-to-end tests of the bsde-hedge command line tool: argument parsing,
// exit codes, the preset/config interfaces, artifact lifecycle, report
// merging, and rerun determinism.  Each test drives the installed binary
// as a subprocess in a scratch directory.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#ifndef BSDEHEDGE_CLI_PATH
#error "BSDEHEDGE_CLI_PATH must point at the bsde-hedge binary"
#endif

namespace {

namespace fs = std::filesystem;

struct CommandResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::string line;
  std::istringstream is(text);
  while (std::getline(is, line)) out.push_back(line);
  return out;
}

// Fresh scratch directory per test, named after the test itself.
fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path dir = fs::temp_directory_path() /
                 (std::string("bsdehedge_cli_") + info->test_suite_name() +
                  "_" + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CommandResult run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path out_path = scratch / "stdout.txt";
  const fs::path err_path = scratch / "stderr.txt";
  const std::string command = std::string(BSDEHEDGE_CLI_PATH) + " " + args +
                              " > " + out_path.string() + " 2> " +
                              err_path.string();
  const int raw = std::system(command.c_str());
  CommandResult result;
#ifdef _WIN32
  result.exit_code = raw;
#else
  result.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
#endif
  result.out = slurp(out_path);
  result.err = slurp(err_path);
  return result;
}

// Minimal one-asset experiment that trains in well under a second: four
// time steps, two 8-unit hidden layers, and a delta-gamma hedge backed by
// a same-strike put.
std::string mini_config_text() {
  return R"({
  "name": "cli-mini",
  "seed": 11,
  "model": {
    "kind": "black_scholes",
    "d": 1, "m": 1, "r": 0.0,
    "q": [0.0], "x0": [100.0], "mu_bar": [0.0],
    "sigma_bar": [0.25],
    "corr": [[1.0]]
  },
  "grid": {"horizon": 1.0, "steps": 4},
  "contracts": [{"kind": "vanilla_call", "strike": 100.0, "assets": [1],
                 "reflections": 1}],
  "train": {"steps_last": 24, "steps_rest": 8, "batch_size": 16,
            "hidden_layers": 2, "hidden_width": 8},
  "hedge": {
    "strategy": "delta-gamma",
    "rebalances": [1, 2],
    "index_set": "full",
    "instruments": [{"kind": "bs_vanilla", "asset": 1, "strike": 100.0,
                     "option": "put", "maturity": 2.0}],
    "paths": 64,
    "closed_form_greeks": false
  }
})";
}

fs::path write_mini_config(const fs::path& scratch) {
  const fs::path path = scratch / "mini.json";
  std::ofstream os(path);
  os << mini_config_text();
  return path;
}

std::string grep_line(const std::string& text, const std::string& needle) {
  for (const std::string& line : lines_of(text))
    if (line.find(needle) != std::string::npos) return line;
  return {};
}

}  // namespace

TEST(CliParsing, RequiresASubcommand) {
  const auto scratch = scratch_dir();
  EXPECT_EQ(run_cli("", scratch).exit_code, 2);
}

TEST(CliParsing, RejectsUnknownFlags) {
  const auto scratch = scratch_dir();
  const CommandResult r = run_cli("train --definitely-not-a-flag", scratch);
  EXPECT_EQ(r.exit_code, 2);
}

TEST(CliParsing, PresetAndConfigAreMutuallyExclusive) {
  const auto scratch = scratch_dir();
  const fs::path config = write_mini_config(scratch);
  const CommandResult r = run_cli(
      "train --preset fig1-bs-1d --config " + config.string(), scratch);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("not both"), std::string::npos) << r.err;
}

TEST(CliPresets, ListsTheCatalog) {
  const auto scratch = scratch_dir();
  const CommandResult r = run_cli("presets list", scratch);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NE(r.out.find("fig1-bs-1d"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("ex2-basket-d5"), std::string::npos);
  EXPECT_NE(r.out.find("ex3-portfolio-case3"), std::string::npos);
}

TEST(CliMargrabe, VerifiesClosedFormAgainstFiniteDifferences) {
  const auto scratch = scratch_dir();
  const CommandResult r = run_cli("margrabe-check --draws 10 --seed 4",
                                  scratch);
  EXPECT_EQ(r.exit_code, 0) << r.out << r.err;
}

TEST(CliHedge, ClosedFormLadderWritesReportKdeAndLedger) {
  const auto scratch = scratch_dir();
  const fs::path out = scratch / "runs";
  const CommandResult r = run_cli(
      "hedge --preset fig1-bs-1d --strategy delta --rebalances 1,2 "
      "--paths 120 --ledger --threads 1 --seed 9 --name ladder --out " +
          out.string(),
      scratch);
  ASSERT_EQ(r.exit_code, 0) << r.out << r.err;

  const fs::path run_dir = out / "ladder";
  const std::string report = slurp(run_dir / "report.csv");
  const auto rows = lines_of(report);
  ASSERT_EQ(rows.size(), 4u) << report;
  EXPECT_EQ(rows[0], "# name=ladder seed=9");
  EXPECT_EQ(rows[1],
            "strategy,N_rebalance,mean,variance,var95,es95,es99,"
            "semivariance,n_paths,excluded");
  EXPECT_EQ(rows[2].rfind("delta,1,", 0), 0u) << rows[2];
  EXPECT_EQ(rows[3].rfind("delta,2,", 0), 0u) << rows[3];
  // All 120 paths survive, none excluded.
  EXPECT_NE(rows[2].find(",120,0"), std::string::npos) << rows[2];

  for (const char* tag : {"N1", "N2"}) {
    const fs::path ledger =
        run_dir / (std::string("ledger_delta_") + tag + ".csv");
    ASSERT_TRUE(fs::exists(ledger)) << ledger;
    const auto ledger_lines = lines_of(slurp(ledger));
    ASSERT_GE(ledger_lines.size(), 3u);
    EXPECT_EQ(ledger_lines[0], "# name=ladder seed=9");
    // Delta hedging drops the preset's put, so there are no beta columns.
    EXPECT_EQ(ledger_lines[1], "path,step,t,P,B,alpha_1,exercised_mask");
    EXPECT_TRUE(fs::exists(run_dir /
                           (std::string("kde_delta_") + tag + ".csv")));
  }
}

TEST(CliHedge, RequiresATrainedArtifact) {
  const auto scratch = scratch_dir();
  const fs::path config = write_mini_config(scratch);
  const CommandResult r = run_cli(
      "hedge --config " + config.string() + " --out " +
          (scratch / "runs").string(),
      scratch);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("run the train subcommand first"), std::string::npos)
      << r.err;
}

TEST(CliHedge, RejectsRebalanceCountsOffTheGrid) {
  const auto scratch = scratch_dir();
  const CommandResult r = run_cli(
      "hedge --preset fig1-bs-1d --rebalances 3 --paths 32 --out " +
          (scratch / "runs").string(),
      scratch);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("does not divide"), std::string::npos) << r.err;
}

TEST(CliHedge, TooFewPathsIsANumericFailure) {
  const auto scratch = scratch_dir();
  const CommandResult r = run_cli(
      "hedge --preset fig1-bs-1d --strategy delta --rebalances 1 "
      "--paths 8 --out " +
          (scratch / "runs").string(),
      scratch);
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_NE(r.err.find("numeric failure"), std::string::npos) << r.err;
}

TEST(CliTrain, WritesArtifactConfigAndFingerprint) {
  const auto scratch = scratch_dir();
  const fs::path config = write_mini_config(scratch);
  const fs::path out = scratch / "runs";
  const CommandResult r = run_cli(
      "train --config " + config.string() + " --out " + out.string(),
      scratch);
  ASSERT_EQ(r.exit_code, 0) << r.out << r.err;
  EXPECT_FALSE(grep_line(r.out, "manifest hash:").empty()) << r.out;
  EXPECT_FALSE(grep_line(r.out, "price at the initial state:").empty());

  const fs::path run_dir = out / "cli-mini";
  EXPECT_TRUE(fs::exists(run_dir / "config.json"));
  EXPECT_TRUE(fs::exists(run_dir / "artifact" / "manifest.json"));
}

TEST(CliTrain, RerunsAreDeterministic) {
  const auto scratch = scratch_dir();
  const fs::path config = write_mini_config(scratch);
  const fs::path out_a = scratch / "runs_a";
  const fs::path out_b = scratch / "runs_b";

  std::string hashes[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path& out = i == 0 ? out_a : out_b;
    const CommandResult train = run_cli(
        "train --config " + config.string() + " --out " + out.string(),
        scratch);
    ASSERT_EQ(train.exit_code, 0) << train.out << train.err;
    hashes[i] = grep_line(train.out, "manifest hash:");
    ASSERT_FALSE(hashes[i].empty());

    const CommandResult hedge = run_cli(
        "hedge --config " + config.string() + " --threads 1 --out " +
            out.string(),
        scratch);
    ASSERT_EQ(hedge.exit_code, 0) << hedge.out << hedge.err;
  }
  EXPECT_EQ(hashes[0], hashes[1]);

  const std::string report_a = slurp(out_a / "cli-mini" / "report.csv");
  const std::string report_b = slurp(out_b / "cli-mini" / "report.csv");
  ASSERT_FALSE(report_a.empty());
  EXPECT_EQ(report_a, report_b);
  EXPECT_EQ(lines_of(report_a).size(), 4u) << report_a;  // preamble+header+2
}

TEST(CliHedge, SecondOrderNeedsSecondOrderTraining) {
  const auto scratch = scratch_dir();
  const fs::path config = write_mini_config(scratch);
  const fs::path out = scratch / "runs";
  const CommandResult train = run_cli(
      "train --config " + config.string() + " --scheme rdbdp --out " +
          out.string(),
      scratch);
  ASSERT_EQ(train.exit_code, 0) << train.out << train.err;

  const CommandResult hedge = run_cli(
      "hedge --config " + config.string() + " --out " + out.string(),
      scratch);
  EXPECT_EQ(hedge.exit_code, 2);
  EXPECT_NE(hedge.err.find("retrain with --scheme osm"), std::string::npos)
      << hedge.err;

  // The same artifact still serves a plain delta hedge.
  const CommandResult delta = run_cli(
      "hedge --config " + config.string() + " --strategy delta "
      "--threads 1 --out " +
          out.string(),
      scratch);
  EXPECT_EQ(delta.exit_code, 0) << delta.out << delta.err;
}

TEST(CliReport, MergesRunsIntoSummaryTables) {
  const auto scratch = scratch_dir();
  const fs::path out = scratch / "runs";
  for (const auto& [name, rebalances, seed] :
       {std::tuple{"ladder-a", "1,2", "9"}, {"ladder-b", "5,10", "10"}}) {
    const CommandResult r = run_cli(
        std::string("hedge --preset fig1-bs-1d --strategy delta "
                    "--rebalances ") +
            rebalances + " --paths 60 --threads 1 --seed " + seed +
            " --name " + name + " --out " + out.string(),
        scratch);
    ASSERT_EQ(r.exit_code, 0) << r.out << r.err;
  }

  const fs::path merged_dir = scratch / "summary";
  const CommandResult r = run_cli(
      "report " + (out / "ladder-a").string() + " " +
          (out / "ladder-b").string() + " --markdown --out " +
          merged_dir.string(),
      scratch);
  ASSERT_EQ(r.exit_code, 0) << r.out << r.err;

  const std::string merged = slurp(merged_dir / "merged.csv");
  EXPECT_NE(merged.find("ladder-a"), std::string::npos) << merged;
  EXPECT_NE(merged.find("ladder-b"), std::string::npos);
  EXPECT_TRUE(fs::exists(merged_dir / "convergence.csv"));
  EXPECT_TRUE(fs::exists(merged_dir / "report.md"));
}

TEST(CliReport, FailsWhenNothingToMerge) {
  const auto scratch = scratch_dir();
  const fs::path empty = scratch / "empty";
  fs::create_directories(empty);
  const CommandResult r = run_cli(
      "report " + empty.string() + " --out " + (scratch / "rpt").string(),
      scratch);
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("no report.csv"), std::string::npos) << r.err;
}
