#include "json.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

std::string cli() {
  const char* p = std::getenv("RFTLAB_CLI");
  return p ? p : "rftlab";
}

Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" + cli() + "' " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("rftlab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string config(const std::string& name, const std::string& text) const {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p.string();
  }
  std::string out(const std::string& name) const { return (dir_ / name).string(); }
  nlohmann::json manifest(const std::string& name) const { return nlohmann::json::parse(slurp(dir_ / name / "manifest.json")); }

  fs::path dir_;
};

const char* kTinyData =
    "seed = 5\n"
    "[data]\n"
    "n_samples = 40\ninput_dim = 6\nn_labels = 5\nn_pretrain_labels = 2\nflip_fraction = 0.25\nhidden = 12\n"
    "[pretrain]\nlearning_rate = 0.01\nepochs = 150\n";

}  // namespace

TEST_F(Cli, VersionAndUsage) {
  EXPECT_EQ(run("--version").code, 0);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("no-such-command").code, 1);
  EXPECT_EQ(run("gradflow --jobs 0").code, 1);
}

TEST_F(Cli, MalformedConfigExitsOneWithLine) {
  const std::string cfg = config("bad.ini", "[bounds]\ncount = 5\nthis line is broken\n");
  const Result r = run("verify-bounds --config " + cfg + " --out " + out("o"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("bad.ini:3:"), std::string::npos) << r.output;
}

TEST_F(Cli, UnknownKeyExitsOne) {
  const std::string cfg = config("u.ini", "[bounds]\ncount = 5\ncuont = 3\n");
  const Result r = run("verify-bounds --config " + cfg + " --out " + out("o"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("u.ini:3:"), std::string::npos) << r.output;
  EXPECT_EQ(run("verify-bounds --config " + out("missing.ini")).code, 1);
}

TEST_F(Cli, VerifyBoundsEmptySweep) {
  const std::string cfg = config("c.ini", "[bounds]\ncount = 0\n");
  ASSERT_EQ(run("verify-bounds --config " + cfg + " --out " + out("o")).code, 0);
  EXPECT_EQ(slurp(dir_ / "o" / "bounds.jsonl"), "");
  const auto m = manifest("o");
  EXPECT_EQ(m["status"], "ok");
  EXPECT_EQ(m["exit_code"], 0);
  EXPECT_EQ(m["seed"], 42);
  EXPECT_EQ(m["config_digest"].get<std::string>().size(), 16u);
  EXPECT_FALSE(fs::exists(dir_ / "o" / "manifest.json.tmp"));
}

TEST_F(Cli, VerifyBoundsSmallSweep) {
  const std::string cfg = config("c.ini", "[bounds]\ncount = 40\n");
  ASSERT_EQ(run("verify-bounds --config " + cfg + " --out " + out("o")).code, 0);
  const std::string jsonl = slurp(dir_ / "o" / "bounds.jsonl");
  EXPECT_EQ(std::count(jsonl.begin(), jsonl.end(), '\n'), 40);
  const auto s = nlohmann::json::parse(slurp(dir_ / "o" / "bounds_summary.json"));
  EXPECT_EQ(s["count"], 40);
  const auto m = manifest("o");
  EXPECT_NE(std::find(m["outputs"].begin(), m["outputs"].end(), "bounds.jsonl"), m["outputs"].end());
}

TEST_F(Cli, GradflowDefaultsAndViolation) {
  ASSERT_EQ(run("gradflow --out " + out("g")).code, 0);
  const std::string sweep = slurp(dir_ / "g" / "gradflow_sweep.csv");
  EXPECT_EQ(sweep.substr(0, sweep.find('\n')), "mu0,sigma0,t_rft_closed,t_rft_numeric,t_sft_closed,t_sft_numeric");
  const auto fit = nlohmann::json::parse(slurp(dir_ / "g" / "gradflow_fit.json"));
  EXPECT_EQ(fit["within_windows"], true);
  EXPECT_EQ(fit["checks"], 72);
  EXPECT_LE(fit["max_conservation_residual"].get<double>(), 1e-6);
  const std::string cfg = config("v.ini", "[gradflow]\nslope_min = 3.0\nslope_max = 4.0\n");
  EXPECT_EQ(run("gradflow --config " + cfg + " --out " + out("v")).code, 2);
  EXPECT_EQ(manifest("v")["status"], "violation");
}

TEST_F(Cli, GradflowSinglePoint) {
  const std::string cfg = config("s.ini", "[gradflow]\nmu0_grid = 0\ncheck_K = 2\ncheck_N = 1\ncheck_mu0 = -1\n");
  const Result r = run("gradflow --config " + cfg + " --out " + out("s"));
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(nlohmann::json::parse(slurp(dir_ / "s" / "gradflow_fit.json"))["tail_points"], 0);
  const std::string sweep = slurp(dir_ / "s" / "gradflow_sweep.csv");
  EXPECT_EQ(std::count(sweep.begin(), sweep.end(), '\n'), 2);
  EXPECT_NE(sweep.find("\n0,1,0,"), std::string::npos) << sweep;
}

TEST_F(Cli, ControlledZeroEpochsGivesInitialOnlyTrace) {
  const std::string cfg = config("c.ini", std::string(kTinyData) + "[controlled]\nepochs = 0\n");
  const Result r = run("controlled --config " + cfg + " --out " + out("c"));
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* run_name : {"rft", "sft"}) {
    const std::string t = slurp(dir_ / "c" / (std::string("trace_") + run_name + ".csv"));
    EXPECT_EQ(std::count(t.begin(), t.end(), '\n'), 4) << t;  // header + three groups at step 0
  }
  const auto s = nlohmann::json::parse(slurp(dir_ / "c" / "controlled_summary.json"));
  EXPECT_EQ(s["seed"], 5);
}

TEST_F(Cli, SeedPrecedence) {
  const std::string cfg = config("c.ini", "seed = 9\n[bounds]\ncount = 0\n");
  ASSERT_EQ(run("verify-bounds --config " + cfg + " --out " + out("a")).code, 0);
  EXPECT_EQ(manifest("a")["seed"], 9);
  ASSERT_EQ(run("verify-bounds --config " + cfg + " --out " + out("b"), "RFTLAB_SEED=11").code, 0);
  EXPECT_EQ(manifest("b")["seed"], 11);
  ASSERT_EQ(run("verify-bounds --seed 12 --config " + cfg + " --out " + out("c"), "RFTLAB_SEED=11").code, 0);
  EXPECT_EQ(manifest("c")["seed"], 12);
  ASSERT_EQ(run("verify-bounds --config " + cfg, "RFTLAB_OUT=" + out("d")).code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "d" / "manifest.json"));
}

TEST_F(Cli, ReproducibleOutputsAcrossRunsAndJobs) {
  const std::string cfg =
      config("c.ini", std::string(kTinyData) + "[controlled]\nepochs = 20\nlog_every = 5\nbatch = 16\n");
  ASSERT_EQ(run("controlled --config " + cfg + " --out " + out("r1")).code, 0);
  ASSERT_EQ(run("controlled --jobs 2 --config " + cfg + " --out " + out("r2")).code, 0);
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "r1")) {
    const std::string name = e.path().filename().string();
    if (name == "manifest.json") continue;
    EXPECT_EQ(slurp(e.path()), slurp(dir_ / "r2" / name)) << name;
    ++compared;
  }
  EXPECT_GE(compared, 6u);
  EXPECT_EQ(manifest("r1")["config_digest"], manifest("r2")["config_digest"]);
}

TEST_F(Cli, MitigateGridRowCount) {
  const std::string cfg = config("m.ini", std::string(kTinyData) +
                                              "[mitigate]\nsteps_fractions = 0.5\nsamples_fractions = 0.25, 0.5\n"
                                              "write_traces = false\nlog_every = 5\n"
                                              "[mitigate.sft]\nepochs = 10\n[mitigate.rft]\nepochs = 10\n");
  const Result r = run("mitigate --config " + cfg + " --out " + out("m"));
  ASSERT_EQ(r.code, 0) << r.output;
  const std::string csv = slurp(dir_ / "m" / "mitigation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3) << csv;
  const auto j = nlohmann::json::parse(slurp(dir_ / "m" / "mitigation_report.json"));
  EXPECT_EQ(j["cells"].size(), 3u);  // the full-SFT reference cell is reported separately
}

TEST_F(Cli, DiagnoseWritesScatterAndSummary) {
  const std::string cfg = config("d.ini", std::string(kTinyData) +
                                              "[controlled]\nepochs = 30\nlog_every = 10\n"
                                              "[diagnose]\nsample_count = 50\nconvergence_n = 10, 100, 1000\n"
                                              "convergence_reps = 5\n");
  const Result r = run("diagnose --config " + cfg + " --out " + out("d"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto j = nlohmann::json::parse(slurp(dir_ / "d" / "diagnose_summary.json"));
  EXPECT_TRUE(j.contains("correlation_exact"));
  EXPECT_TRUE(j.contains("rft_minus_sft_reward"));
  EXPECT_TRUE(fs::exists(dir_ / "d" / "sampling_convergence.csv"));
}

TEST_F(Cli, PlotDataHeaderOnlyAndErrors) {
  const std::string trace = config("empty.csv", "step,group,reward_mean,reward_std_mean,grad_norm_mean,ce_loss,accuracy\n");
  ASSERT_EQ(run("plot-data --out " + out("p") + " " + trace).code, 0);
  for (const char* panel : {"reward", "reward_std", "grad_norm", "accuracy"})
    EXPECT_EQ(slurp(dir_ / "p" / (std::string("empty_") + panel + ".csv")), "step,small_std,large_std,all\n");
  EXPECT_EQ(run("plot-data --out " + out("q") + " " + out("nope.csv")).code, 1);
  EXPECT_EQ(run("plot-data --out " + out("q")).code, 1);
}

TEST_F(Cli, PlotDataRoundTrip) {
  const std::string trace = config(
      "t.csv",
      "step,group,reward_mean,reward_std_mean,grad_norm_mean,ce_loss,accuracy\n"
      "0,small_std,-1,0.125,0.5,2,0\n0,large_std,0.25,0.75,3,1,0.5\n0,all,0.125,0.5,2.75,1.5,0.375\n"
      "10,small_std,-0.5,0.25,0.25,1.5,0.25\n10,large_std,0.875,0.25,1,0.25,0.9375\n10,all,0.75,0.25,0.5,0.5,0.875\n");
  ASSERT_EQ(run("plot-data --out " + out("p") + " " + trace).code, 0);
  EXPECT_EQ(slurp(dir_ / "p" / "t_reward.csv"), "step,small_std,large_std,all\n0,-1,0.25,0.125\n10,-0.5,0.875,0.75\n");
  EXPECT_EQ(slurp(dir_ / "p" / "t_accuracy.csv"), "step,small_std,large_std,all\n0,0,0.5,0.375\n10,0.25,0.9375,0.875\n");
}

TEST_F(Cli, RuntimeErrorWritesFailedManifest) {
  const std::string data = config("ds.csv", "x0,pretrain_labels,finetune_label\n0.5,1;2,1\n0.25,1,oops\n");
  const std::string cfg = config("c.ini", "[data]\nn_labels = 5\nn_pretrain_labels = 2\ndataset_csv = " + data + "\n");
  const Result r = run("controlled --config " + cfg + " --out " + out("e"));
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find("ds.csv:3:"), std::string::npos) << r.output;
  const auto m = manifest("e");
  EXPECT_EQ(m["status"], "failed");
  EXPECT_EQ(m["exit_code"], 3);
}
