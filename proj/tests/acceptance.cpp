#include "rftlab/commands.hpp"
#include "support.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

using namespace rftlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::ostringstream g_log;  // command chatter, kept off the report

Outcome gradient_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  SweepConfig c;
  c.seed = 1001;
  const std::size_t count = 120;
  double worst = 0.0;
  std::size_t clip_checked = 0, kinds[3] = {0, 0, 0};
  for (std::uint64_t i = 0; i < count; ++i) {
    const Instance in = random_instance(c, i);
    const auto e = testing::oracle_errors(in);
    worst = std::max({worst, e.rft, e.sft, e.ppo_kl, e.ppo_clip.value_or(0.0)});
    clip_checked += e.ppo_clip.has_value();
    ++kinds[static_cast<int>(in.policy.kind())];
  }
  const double secs = seconds_since(t0);
  const bool all_kinds = kinds[0] && kinds[1] && kinds[2];
  return {worst <= 1e-4 && secs <= 120.0 && all_kinds,
          std::to_string(count) + " instances (tabular " + std::to_string(kinds[0]) + ", linear " +
              std::to_string(kinds[1]) + ", mlp " + std::to_string(kinds[2]) + "), clip checked on " +
              std::to_string(clip_checked) + ", max rel error " + fmt("%.2e", worst) + ", " + fmt("%.1f", secs) + " s"};
}

Outcome bound_universality() {
  const auto t0 = std::chrono::steady_clock::now();
  SweepConfig c;
  const SweepResult r = bound_sweep(c);
  const double secs = seconds_since(t0);
  std::string d = std::to_string(r.records.size()) + " instances";
  for (const auto& s : r.summary) d += ", " + s.bound + " " + std::to_string(s.violations);
  d += ", " + fmt("%.1f", secs) + " s";
  return {r.violations() == 0 && r.records.size() == 1000 && secs <= 300.0, d};
}

Outcome reference_coincidence() {
  SweepConfig c;
  c.seed = 2002;
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const Instance in = testing::at_reference(random_instance(c, i));
    const Vector gv = grad_value(in.policy, in.x, in.reward).values;
    worst = std::max(worst, (grad_ppo_clip(in.policy, in.ref, in.x, in.reward, in.delta).values - gv).cwiseAbs().maxCoeff());
    worst = std::max(worst, (grad_ppo_kl(in.policy, in.ref, in.x, in.reward, in.lambda).values - gv).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-12, "50 instances, max |grad diff| " + fmt("%.2e", worst)};
}

Outcome gradflow_closed_forms() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_rel = 0.0, worst_cons = 0.0;
  for (int K : {2, 5, 10})
    for (double N : {1.0, 10.0})
      for (double mu0 : {-0.1, -0.5, -1.0, -2.0, -4.0, -6.0})
        for (Dynamics d : {Dynamics::RFT, Dynamics::SFT}) {
          const LinearSetting s{K, N, mu0};
          const MuTrajectory tr = integrate_mu(d, s);
          const double tc = t_closed(d, s);
          worst_rel = tr.crossing_time ? std::max(worst_rel, std::abs(*tr.crossing_time - tc) / tc) : 1.0;
          worst_cons = std::max(worst_cons, tr.conservation_residual);
        }
  const LinearSetting spot{2, 1.0, -1.0};
  const double tr = t_rft_closed(spot), ts = t_sft_closed(spot);
  const bool spots = std::abs(tr - 1.08760) < 5e-6 && std::abs(ts - 0.81606) < 5e-6;
  const double secs = seconds_since(t0);
  return {worst_rel <= 1e-3 && worst_cons <= 1e-6 && spots && secs <= 60.0,
          "72 crossings, max rel error " + fmt("%.2e", worst_rel) + ", max conservation residual " +
              fmt("%.2e", worst_cons) + ", t_RFT " + fmt("%.5f", tr) + ", t_SFT " + fmt("%.5f", ts)};
}

std::vector<double> separation_grid() {
  std::vector<double> g;
  for (double mu0 = -0.5; mu0 >= -16.0; mu0 -= 0.5) g.push_back(mu0);
  return g;
}

Outcome separation_shape() {
  const SeparationResult r = separation_sweep(2, 1.0, separation_grid());
  if (!r.fit) return {false, "tail has fewer than two points"};
  const auto& f = *r.fit;
  const bool ok = f.rft_loglog.slope >= 1.8 && f.rft_loglog.slope <= 2.2 && f.sft_linear.r2 >= 0.99 &&
                  f.ratio_increasing && f.rft_loglog.n >= 8;
  return {ok, std::to_string(f.rft_loglog.n) + " tail points, slope " + fmt("%.4f", f.rft_loglog.slope) +
                  ", SFT R^2 " + fmt("%.6f", f.sft_linear.r2) + ", ratio increasing " +
                  (f.ratio_increasing ? "yes" : "no")};
}

Outcome sigma0_identity() {
  const RewardSpec r = RewardSpec::label_match({{{0}}});
  double worst = 0.0;
  std::size_t n = 0;
  for (int K : {2, 5, 10})
    for (double mu0 : separation_grid()) {
      SoftmaxPolicy p = SoftmaxPolicy::linear({K, 1}, 1);
      p.params().values.setZero();
      p.params().values[0] = mu0;
      worst = std::max(worst, std::abs(sigma0_from_mu0(mu0, K) - reward_std(p, {0, Vector::Ones(1)}, r)));
      ++n;
    }
  return {worst <= 1e-10, std::to_string(n) + " (K, mu0) points, max |diff| " + fmt("%.2e", worst)};
}

// Pretraining plus finetuning runs shared by the controlled-experiment criteria.
struct ControlledRuns {
  PreparedData pd;
  SampleStats pre;
  std::vector<FinetuneRun> runs;
  double seconds = 0.0;
  const FinetuneRun& run(const std::string& name) const {
    for (const auto& r : runs)
      if (r.name == name) return r;
    throw Error("missing run " + name);
  }
};

RunContext quiet_context() {
  RunContext ctx;
  ctx.log = &g_log;
  return ctx;
}

ControlledRuns& controlled_runs() {
  static ControlledRuns cr = [] {
    const auto t0 = std::chrono::steady_clock::now();
    const Config c;
    const RunContext ctx = quiet_context();
    ControlledRuns r{prepare_controlled(c, ctx), {}, {}, 0.0};
    r.pre = evaluate_samples(r.pd.pre.policy, r.pd.data, r.pd.reward, TrainMode::RFT);
    r.runs = run_finetunes(c, ctx, r.pd);
    r.seconds = seconds_since(t0);
    return r;
  }();
  return cr;
}

double flipped_final(const TrainingTrace& t, const ControlledDataset& ds) {
  return group_mean(t.final->reward_mean, ds, Group::SMALL_STD);
}

Outcome controlled_experiment() {
  const ControlledRuns& cr = controlled_runs();
  const auto& ds = cr.pd.data;
  const double sd_f = group_median(cr.pre.reward_std, ds, Group::SMALL_STD);
  const double sd_k = group_median(cr.pre.reward_std, ds, Group::LARGE_STD);
  const TrainingTrace& rft = cr.run("rft").trace;
  const TrainingTrace& sft = cr.run("sft").trace;
  const double kept = group_mean(rft.final->reward_mean, ds, Group::LARGE_STD);
  const double flipped = flipped_final(rft, ds);
  const double gn_f = group_median(rft.initial->grad_norm, ds, Group::SMALL_STD);
  const double gn_k = group_median(rft.initial->grad_norm, ds, Group::LARGE_STD);
  const double acc_f = group_mean(sft.final->correct, ds, Group::SMALL_STD);
  const double acc_k = group_mean(sft.final->correct, ds, Group::LARGE_STD);
  const bool ok = sd_f < 0.2 && sd_k > 0.6 && kept > 0.9 && flipped < -0.5 && 10.0 * gn_f <= gn_k && acc_f > 0.99 &&
                  acc_k > 0.99 && cr.seconds <= 900.0;
  return {ok, "pretrain std median flipped " + fmt("%.4f", sd_f) + " kept " + fmt("%.4f", sd_k) +
                  "; RFT reward kept " + fmt("%.4f", kept) + " flipped " + fmt("%.4f", flipped) +
                  "; grad norm median flipped " + fmt("%.3g", gn_f) + " kept " + fmt("%.3g", gn_k) +
                  "; SFT accuracy flipped " + fmt("%.4f", acc_f) + " kept " + fmt("%.4f", acc_k) + "; " +
                  fmt("%.0f", cr.seconds) + " s"};
}

Outcome sgd_variant() {
  const ControlledRuns& cr = controlled_runs();
  OptimizerConfig o = default_finetune_optimizer();
  o.kind = OptimizerKind::SGD;
  o.learning_rate = 0.01;
  SoftmaxPolicy p = cr.pd.pre.policy;
  TrainOptions to;
  to.log_every = o.epochs;
  to.grad_norms = false;
  to.shuffle_seed = cr.pd.spec.seed + 17;
  const TrainingTrace t = train(p, cr.pd.data, cr.pd.reward, TrainMode::RFT, o, to);
  const double sgd = flipped_final(t, cr.pd.data), adam = flipped_final(cr.run("rft").trace, cr.pd.data);
  return {sgd <= adam + 0.05, "flipped final reward SGD " + fmt("%.4f", sgd) + ", Adam " + fmt("%.4f", adam) +
                                  ", kept SGD " + fmt("%.4f", group_mean(t.final->reward_mean, cr.pd.data, Group::LARGE_STD))};
}

Outcome high_init_reward_variant() {
  const ControlledRuns& cr = controlled_runs();
  const RewardSpec reward = finetune_reward(cr.pd.data, 0.5, cr.pd.spec.incorrect_reward_kept);
  SoftmaxPolicy p = cr.pd.pre.policy;
  TrainOptions to;
  to.log_every = default_finetune_optimizer().epochs;
  to.grad_norms = false;
  to.shuffle_seed = cr.pd.spec.seed + 17;
  const TrainingTrace t = train(p, cr.pd.data, reward, TrainMode::RFT, default_finetune_optimizer(), to);
  const double before = group_mean(t.initial->reward_mean, cr.pd.data, Group::SMALL_STD);
  const double after = flipped_final(t, cr.pd.data);
  return {std::abs(after - before) <= 0.1, "flipped reward " + fmt("%.4f", before) + " -> " + fmt("%.4f", after) +
                                               ", kept final " +
                                               fmt("%.4f", group_mean(t.final->reward_mean, cr.pd.data, Group::LARGE_STD))};
}

Outcome mitigation() {
  const auto t0 = std::chrono::steady_clock::now();
  Config c = Config::parse("[mitigate]\nsteps_fractions = 0.1, 1\nsamples_fractions = 0.1, 1\nwrite_traces = false\n",
                           "<acceptance>");
  RunContext ctx = quiet_context();
  ctx.out_dir = (fs::temp_directory_path() / "rftlab_acceptance_mitigate").string();
  fs::remove_all(ctx.out_dir);
  const int code = run_command("mitigate", c, ctx);
  if (code != kExitOk) return {false, "mitigate exited with " + std::to_string(code)};
  std::ifstream in(fs::path(ctx.out_dir) / "mitigation_report.json");
  const auto j = nlohmann::json::parse(in);
  double ratio = 0.0;
  std::size_t before = 0, after = 0;
  for (const auto& cell : j["cells"])
    if (cell["steps_fraction"] == 0.1 && cell["samples_fraction"] == 0.1) {
      ratio = cell["ratio_to_full"].get<double>();
      before = cell["count_before"];
      after = cell["count_after"];
    }
  fs::remove_all(ctx.out_dir);
  const bool ok = ratio >= 0.9 && before > 0 && 2 * after <= before;
  return {ok, "(10% steps, 10% samples) final/full " + fmt("%.4f", ratio) + ", small-std suboptimal count " +
                  std::to_string(before) + " -> " + std::to_string(after) + ", RFT-only final " +
                  fmt("%.4f", j["baseline_final_reward"].get<double>()) + ", " + fmt("%.0f", seconds_since(t0)) + " s"};
}

Outcome diagnostics_checks() {
  std::vector<double> xs, up, down;
  for (int i = 0; i < 20; ++i) {
    xs.push_back(0.37 * i - 2.0);
    up.push_back(3.5 * xs.back() + 1.25);
    down.push_back(-0.5 * xs.back() + 7.0);
  }
  const double pu = pearson(xs, up), pd = pearson(xs, down);
  const bool affine = std::abs(pu - 1.0) <= 1e-12 && std::abs(pd + 1.0) <= 1e-12;

  const ControlledRuns& cr = controlled_runs();
  const auto& ds = cr.pd.data;
  Eigen::Index probe = 0;
  cr.pre.reward_std.maxCoeff(&probe);
  const std::vector<std::size_t> ns{100, 1000, 10000, 100000};
  const auto conv = sampling_convergence(cr.pd.pre.policy, ds.input(static_cast<std::size_t>(probe)), cr.pd.reward, ns, 40, 77);
  std::vector<double> ln, lm, ls;
  for (const auto& p : conv) {
    ln.push_back(std::log(static_cast<double>(p.n)));
    lm.push_back(std::log(p.mean_error));
    ls.push_back(std::log(p.std_error));
  }
  const double sm = least_squares(ln, lm).slope, ss = least_squares(ln, ls).slope;
  const bool slopes = sm >= -0.65 && sm <= -0.35 && ss >= -0.65 && ss <= -0.35;

  const auto pre = exact_stats(cr.pre);
  const double c_rft = correlation_report(pre, exact_stats(*cr.run("rft").trace.final));
  const double c_sft = correlation_report(pre, exact_stats(*cr.run("sft").trace.final));
  return {affine && slopes && c_rft > c_sft,
          "pearson affine " + fmt("%.15f", pu) + " / " + fmt("%.15f", pd) + "; convergence slopes mean " +
              fmt("%.3f", sm) + " std " + fmt("%.3f", ss) + "; correlation RFT " + fmt("%.4f", c_rft) + " SFT " +
              fmt("%.4f", c_sft)};
}

std::map<std::string, std::string> read_outputs(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().filename() == "manifest.json") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    files[e.path().filename().string()] = ss.str();
  }
  return files;
}

Outcome reproducibility() {
  const std::string tiny =
      "seed = 11\n[data]\nn_samples = 60\ninput_dim = 8\nn_labels = 5\nn_pretrain_labels = 2\nflip_fraction = 0.2\n"
      "hidden = 16, 8\n[pretrain]\nlearning_rate = 0.01\nepochs = 100\n";
  const std::vector<std::pair<std::string, std::string>> cases{
      {"verify-bounds", "[bounds]\ncount = 60\nexponent_probe = true\n"},
      {"gradflow", ""},
      {"controlled", tiny + "[controlled]\nepochs = 30\nlog_every = 5\nbatch = 16\n"},
      {"mitigate", tiny + "[mitigate]\nsteps_fractions = 0.5\nsamples_fractions = 0.5, 1\nlog_every = 5\n"
                          "[mitigate.sft]\nepochs = 10\nbatch = 16\n[mitigate.rft]\nepochs = 10\nbatch = 16\n"},
      {"diagnose", tiny + "[controlled]\nepochs = 20\nlog_every = 10\n[diagnose]\nsample_count = 20\n"
                          "convergence_n = 10, 100\nconvergence_reps = 4\n"}};
  const fs::path root = fs::temp_directory_path() / "rftlab_acceptance_repro";
  fs::remove_all(root);
  std::size_t files = 0;
  std::string mismatch;
  for (const auto& [cmd, text] : cases) {
    const Config c = Config::parse(text, "<" + cmd + ">");
    std::map<std::string, std::string> first;
    for (unsigned jobs : {1u, 1u, 3u}) {
      RunContext ctx = quiet_context();
      ctx.jobs = jobs;
      ctx.out_dir = (root / (cmd + "_" + std::to_string(files) + "_" + std::to_string(jobs))).string();
      ++files;
      if (run_command(cmd, c, ctx) != kExitOk) return {false, cmd + " did not exit cleanly"};
      auto out = read_outputs(ctx.out_dir);
      if (first.empty()) {
        first = std::move(out);
        continue;
      }
      if (out != first) mismatch += (mismatch.empty() ? "" : ", ") + cmd + " (jobs " + std::to_string(jobs) + ")";
    }
    if (cmd == "controlled") {
      RunContext ctx = quiet_context();
      ctx.out_dir = (root / "plot").string();
      ctx.inputs = {(root / ("controlled_" + std::to_string(files - 3) + "_1") / "trace_rft.csv").string()};
      std::map<std::string, std::string> a, b;
      if (run_command("plot-data", Config(), ctx) != kExitOk) return {false, "plot-data did not exit cleanly"};
      a = read_outputs(ctx.out_dir);
      fs::remove_all(ctx.out_dir);
      run_command("plot-data", Config(), ctx);
      b = read_outputs(ctx.out_dir);
      if (a != b || a.size() != 4) mismatch += (mismatch.empty() ? "" : ", ") + std::string("plot-data");
    }
  }
  fs::remove_all(root);
  return {mismatch.empty(), mismatch.empty() ? "6 commands, repeated runs and --jobs 3 byte-identical outside the manifest"
                                             : "differing outputs: " + mismatch};
}

}  // namespace

int main(int argc, char** argv) {
  keep_heap_resident();
  std::set<std::size_t> only;  // optional criterion numbers to run
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::atoi(argv[i])));
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient oracle suite", gradient_oracles},
      {"bound universality", bound_universality},
      {"reference coincidence", reference_coincidence},
      {"gradflow closed forms", gradflow_closed_forms},
      {"separation shape", separation_shape},
      {"sigma0 identity", sigma0_identity},
      {"controlled experiment", controlled_experiment},
      {"SGD variant", sgd_variant},
      {"high initial reward variant", high_init_reward_variant},
      {"partial SFT mitigation", mitigation},
      {"diagnostics", diagnostics_checks},
      {"reproducibility", reproducibility}};
  int failed = 0;
  std::size_t ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    ++ran;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << (i + 1) << ". " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  std::cout << (ran - failed) << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
