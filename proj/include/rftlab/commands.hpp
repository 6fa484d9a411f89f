#pragma once

#include "rftlab/bounds.hpp"
#include "rftlab/config.hpp"
#include "rftlab/diagnostics.hpp"
#include "rftlab/gradflow.hpp"
#include "rftlab/serialize.hpp"
#include "rftlab/trainlab.hpp"

#include "json.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace rftlab {

inline constexpr const char* kArtifactVersion = "1.0.0";

/// Training reallocates multi-megabyte buffers every step; with glibc's
/// defaults each of them is returned to the OS and faulted back in.
inline void keep_heap_resident() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

enum ExitCode { kExitOk = 0, kExitConfig = 1, kExitViolation = 2, kExitRuntime = 3 };

struct RunContext {
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;  // overrides the config seed
  unsigned jobs = 1;
  std::vector<std::string> inputs;  // positional files (plot-data)
  std::ostream* log = &std::cerr;
};

namespace cli_detail {

inline const std::map<std::string, ValueType> optimizer_keys{
    {"optimizer", ValueType::String}, {"learning_rate", ValueType::Real}, {"beta1", ValueType::Real},
    {"beta2", ValueType::Real},       {"epsilon", ValueType::Real},       {"batch", ValueType::Int},
    {"epochs", ValueType::Int}};

inline std::map<std::string, ValueType> with(std::map<std::string, ValueType> base,
                                             const std::map<std::string, ValueType>& extra) {
  base.insert(extra.begin(), extra.end());
  return base;
}

inline const std::map<std::string, ValueType> global_keys{
    {"seed", ValueType::Int}, {"out", ValueType::String}, {"jobs", ValueType::Int}};

inline const std::map<std::string, ValueType> data_keys{
    {"n_samples", ValueType::Int},
    {"input_dim", ValueType::Int},
    {"n_labels", ValueType::Int},
    {"n_pretrain_labels", ValueType::Int},
    {"flip_fraction", ValueType::Real},
    {"incorrect_reward_flipped", ValueType::Real},
    {"incorrect_reward_kept", ValueType::Real},
    {"model", ValueType::String},
    {"hidden", ValueType::IntList},
    {"class_separation", ValueType::Real},
    {"noise", ValueType::Real},
    {"input_rms", ValueType::Real},
    {"label_source", ValueType::String},
    {"dataset_csv", ValueType::String}};

inline const std::map<std::string, ValueType> run_keys{{"runs", ValueType::StringList},
                                                       {"log_every", ValueType::Int},
                                                       {"temperature", ValueType::Real},
                                                       {"entropy_coef", ValueType::Real},
                                                       {"save_policies", ValueType::Bool}};

}  // namespace cli_detail

inline Schema schema_for(const std::string& command) {
  using namespace cli_detail;
  Schema s{{"", global_keys}};
  if (command == "verify-bounds") {
    s["bounds"] = {{"count", ValueType::Int},          {"max_vocab", ValueType::Int},
                   {"max_out_len", ValueType::Int},    {"max_outputs", ValueType::Int},
                   {"max_params", ValueType::Int},     {"kinds", ValueType::StringList},
                   {"constant_rewards", ValueType::Bool}, {"exponent_probe", ValueType::Bool}};
  } else if (command == "gradflow") {
    s["gradflow"] = {{"K", ValueType::Int},
                     {"N", ValueType::Real},
                     {"mu0_grid", ValueType::RealList},
                     {"mu0_start", ValueType::Real},
                     {"mu0_stop", ValueType::Real},
                     {"mu0_step", ValueType::Real},
                     {"tail_sigma", ValueType::Real},
                     {"slope_min", ValueType::Real},
                     {"slope_max", ValueType::Real},
                     {"r2_min", ValueType::Real},
                     {"check_K", ValueType::IntList},
                     {"check_N", ValueType::RealList},
                     {"check_mu0", ValueType::RealList},
                     {"rel_tol", ValueType::Real},
                     {"conservation_tol", ValueType::Real}};
  } else if (command == "controlled" || command == "diagnose") {
    s["data"] = data_keys;
    s["pretrain"] = optimizer_keys;
    s["controlled"] = with(optimizer_keys, run_keys);
    if (command == "diagnose")
      s["diagnose"] = {{"sample_count", ValueType::Int}, {"percentile", ValueType::Real},
                       {"mean_cutoff", ValueType::Real}, {"convergence_n", ValueType::IntList},
                       {"convergence_reps", ValueType::Int}};
  } else if (command == "mitigate") {
    s["data"] = data_keys;
    s["pretrain"] = optimizer_keys;
    s["mitigate"] = {{"steps_fractions", ValueType::RealList}, {"samples_fractions", ValueType::RealList},
                     {"std_threshold", ValueType::Real},       {"log_every", ValueType::Int},
                     {"write_traces", ValueType::Bool}};
    s["mitigate.sft"] = optimizer_keys;
    s["mitigate.rft"] = optimizer_keys;
  } else if (command == "plot-data") {
    s["plot"] = {{"traces", ValueType::StringList}};
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
  return s;
}

/// Pretraining defaults: full-batch Adam, lr 1e-3, 10000 epochs.
inline OptimizerConfig default_pretrain_optimizer() {
  OptimizerConfig o;
  o.learning_rate = 1e-3;
  o.epochs = 10000;
  return o;
}

inline OptimizerConfig default_finetune_optimizer() {
  OptimizerConfig o;
  o.learning_rate = 1e-4;
  o.epochs = 5000;
  return o;
}

inline OptimizerConfig optimizer_from(const Config& c, const std::string& section, OptimizerConfig o) {
  const std::string kind = c.get_string(section, "optimizer", o.kind == OptimizerKind::SGD ? "sgd" : "adam");
  if (kind == "adam") o.kind = OptimizerKind::ADAM;
  else if (kind == "sgd") o.kind = OptimizerKind::SGD;
  else throw ConfigError(c.source() + ": [" + section + "] optimizer must be 'adam' or 'sgd'");
  o.learning_rate = c.get_real(section, "learning_rate", o.learning_rate);
  o.beta1 = c.get_real(section, "beta1", o.beta1);
  o.beta2 = c.get_real(section, "beta2", o.beta2);
  o.epsilon = c.get_real(section, "epsilon", o.epsilon);
  const long long batch = c.get_int(section, "batch", static_cast<long long>(o.batch));
  const long long epochs = c.get_int(section, "epochs", static_cast<long long>(o.epochs));
  if (batch < 0 || epochs < 0) throw ConfigError(c.source() + ": [" + section + "] batch and epochs must be >= 0");
  o.batch = static_cast<std::size_t>(batch);
  o.epochs = static_cast<std::size_t>(epochs);
  try {
    o.validate();
  } catch (const Error& e) {
    throw ConfigError(c.source() + ": [" + section + "] " + e.what());
  }
  return o;
}

inline std::uint64_t config_seed(const Config& c, const RunContext& ctx, std::uint64_t def) {
  if (ctx.seed) return *ctx.seed;
  const long long s = c.get_int("", "seed", static_cast<long long>(def));
  if (s < 0) throw ConfigError(c.source() + ": seed must be nonnegative");
  return static_cast<std::uint64_t>(s);
}

inline ControlledSpec spec_from(const Config& c, std::uint64_t seed, ControlledSpec s = {}) {
  auto nonneg = [&](const char* key, long long v) {
    if (v < 0) throw ConfigError(c.source() + ": [data] " + key + " must be nonnegative");
    return static_cast<std::size_t>(v);
  };
  s.n_samples = nonneg("n_samples", c.get_int("data", "n_samples", static_cast<long long>(s.n_samples)));
  s.input_dim = nonneg("input_dim", c.get_int("data", "input_dim", static_cast<long long>(s.input_dim)));
  s.n_labels = static_cast<int>(c.get_int("data", "n_labels", s.n_labels));
  s.n_pretrain_labels = static_cast<int>(c.get_int("data", "n_pretrain_labels", s.n_pretrain_labels));
  s.flip_fraction = c.get_real("data", "flip_fraction", s.flip_fraction);
  s.incorrect_reward_flipped = c.get_real("data", "incorrect_reward_flipped", s.incorrect_reward_flipped);
  s.incorrect_reward_kept = c.get_real("data", "incorrect_reward_kept", s.incorrect_reward_kept);
  const std::string model = c.get_string("data", "model", s.linear_model ? "linear" : "mlp");
  if (model != "mlp" && model != "linear") throw ConfigError(c.source() + ": [data] model must be 'mlp' or 'linear'");
  s.linear_model = model == "linear";
  std::vector<long long> hidden(s.hidden.begin(), s.hidden.end());
  hidden = c.get_ints("data", "hidden", hidden);
  s.hidden.clear();
  for (long long h : hidden) s.hidden.push_back(nonneg("hidden", h));
  s.class_separation = c.get_real("data", "class_separation", s.class_separation);
  s.noise = c.get_real("data", "noise", s.noise);
  s.input_rms = c.get_real("data", "input_rms", s.input_rms);
  const std::string src = c.get_string("data", "label_source", s.label_source == LabelSource::Class ? "class" : "random");
  if (src != "random" && src != "class") throw ConfigError(c.source() + ": [data] label_source must be 'random' or 'class'");
  s.label_source = src == "class" ? LabelSource::Class : LabelSource::Random;
  s.seed = seed;
  try {
    s.validate();
  } catch (const Error& e) {
    throw ConfigError(c.source() + ": [data] " + e.what());
  }
  return s;
}

/// Output directory bookkeeping and the run manifest.
class RunRecorder {
 public:
  RunRecorder(std::string command, const Config& cfg, const RunContext& ctx, std::uint64_t seed)
      : command_(std::move(command)), dir_(ctx.out_dir), seed_(seed), digest_(fnv1a64(cfg.canonical())),
        started_(now_iso()) {
    std::filesystem::create_directories(dir_);
  }

  std::string path(const std::string& name) const { return (std::filesystem::path(dir_) / name).string(); }

  void write(const std::string& name, const std::string& content) {
    std::ofstream out(path(name), std::ios::binary);
    if (!out) throw Error("cannot write '" + path(name) + "'");
    out << content;
    if (!out) throw Error("failed writing '" + path(name) + "'");
    outputs_.push_back(name);
  }

  void note_output(const std::string& name) { outputs_.push_back(name); }

  void finish(int exit_code, const std::string& status, const std::string& message = {}) const {
    nlohmann::ordered_json m;
    m["command"] = command_;
    m["config_digest"] = hex(digest_);
    m["seed"] = seed_;
    m["artifact_version"] = kArtifactVersion;
    m["started_at"] = started_;
    m["finished_at"] = now_iso();
    m["status"] = status;
    m["exit_code"] = exit_code;
    if (!message.empty()) m["message"] = message;
    m["outputs"] = outputs_;
    const std::string tmp = path("manifest.json.tmp");
    {
      std::ofstream out(tmp, std::ios::binary);
      out << m.dump(1) << '\n';
    }
    std::filesystem::rename(tmp, path("manifest.json"));
  }

  static std::string hex(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
  }

 private:
  static std::string now_iso() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  std::string command_;
  std::string dir_;
  std::uint64_t seed_;
  std::uint64_t digest_;
  std::string started_;
  std::vector<std::string> outputs_;
};

/// Runs fn(i) for i in [0, n) on up to `jobs` threads.
inline void parallel_for(std::size_t n, unsigned jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(jobs);
  for (unsigned w = 0; w < jobs; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += jobs) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::string json_line(const nlohmann::ordered_json& j) { return j.dump() + "\n"; }

inline int cmd_verify_bounds(const Config& c, const RunContext& ctx, RunRecorder& rec) {
  SweepConfig sc;
  sc.seed = config_seed(c, ctx, 42);
  const long long count = c.get_int("bounds", "count", 1000);
  if (count < 0) throw ConfigError(c.source() + ": [bounds] count must be nonnegative");
  sc.count = static_cast<std::size_t>(count);
  sc.max_vocab = static_cast<int>(c.get_int("bounds", "max_vocab", sc.max_vocab));
  sc.max_out_len = static_cast<int>(c.get_int("bounds", "max_out_len", sc.max_out_len));
  sc.max_outputs = static_cast<std::size_t>(c.get_int("bounds", "max_outputs", static_cast<long long>(sc.max_outputs)));
  sc.max_params = static_cast<std::size_t>(c.get_int("bounds", "max_params", static_cast<long long>(sc.max_params)));
  if (sc.max_vocab < 2 || sc.max_out_len < 1) throw ConfigError(c.source() + ": [bounds] invalid size ranges");
  sc.kinds.clear();
  for (const auto& k : c.get_strings("bounds", "kinds", {"tabular", "linear", "mlp"})) {
    try {
      sc.kinds.push_back(policy_kind_from_string(k));
    } catch (const Error& e) {
      throw ConfigError(c.source() + ": [bounds] " + e.what());
    }
  }
  if (sc.kinds.empty()) throw ConfigError(c.source() + ": [bounds] kinds must not be empty");
  sc.constant_rewards = c.get_bool("bounds", "constant_rewards", false);
  sc.exponent_probe = c.get_bool("bounds", "exponent_probe", false);
  sc.jobs = ctx.jobs;
  *ctx.log << "verify-bounds: " << sc.count << " instances, seed " << sc.seed << "\n";
  const SweepResult res = bound_sweep(sc);
  std::string jsonl;
  for (const auto& r : res.records) jsonl += json_line(to_json(r));
  rec.write("bounds.jsonl", jsonl);
  rec.write("bounds_summary.json", to_json(res.summary, res.records.size()).dump(1) + "\n");
  rec.write("grad_report.csv", grad_report_csv(res.records));
  for (const auto& s : res.summary)
    *ctx.log << "  " << s.bound << ": " << s.violations << " violations, max slack " << format_double(s.max_slack)
             << (s.asserted ? "" : " (probe)") << "\n";
  return res.violations() == 0 ? kExitOk : kExitViolation;
}

inline std::vector<double> mu0_grid_from(const Config& c) {
  if (c.has("gradflow", "mu0_grid")) return c.get_reals("gradflow", "mu0_grid", {});
  const double start = c.get_real("gradflow", "mu0_start", -0.5);
  const double stop = c.get_real("gradflow", "mu0_stop", -16.0);
  const double step = c.get_real("gradflow", "mu0_step", 0.5);
  if (!(step > 0.0) || start > 0.0 || stop > start) throw ConfigError(c.source() + ": [gradflow] invalid mu0 range");
  std::vector<double> g;
  for (long long i = 0;; ++i) {
    const double v = start - static_cast<double>(i) * step;
    if (v < stop - 1e-12) break;
    g.push_back(v);
  }
  return g;
}

inline int cmd_gradflow(const Config& c, const RunContext& ctx, RunRecorder& rec) {
  const int K = static_cast<int>(c.get_int("gradflow", "K", 2));
  const double N = c.get_real("gradflow", "N", 1.0);
  if (K < 2 || !(N >= 1.0)) throw ConfigError(c.source() + ": [gradflow] need K >= 2 and N >= 1");
  const double tail = c.get_real("gradflow", "tail_sigma", 0.05);
  const double slope_min = c.get_real("gradflow", "slope_min", 1.8), slope_max = c.get_real("gradflow", "slope_max", 2.2);
  const double r2_min = c.get_real("gradflow", "r2_min", 0.99);
  const double rel_tol = c.get_real("gradflow", "rel_tol", 1e-3);
  const double cons_tol = c.get_real("gradflow", "conservation_tol", 1e-6);
  SeparationResult sweep;
  try {
    sweep = separation_sweep(K, N, mu0_grid_from(c), tail);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(c.source() + ": [gradflow] " + e.what());
  }
  std::string csv = "mu0,sigma0,t_rft_closed,t_rft_numeric,t_sft_closed,t_sft_numeric\n";
  for (const auto& p : sweep.points)
    csv += format_double(p.mu0) + ',' + format_double(p.sigma0) + ',' + format_double(p.t_rft_closed) + ',' +
           format_double(p.t_rft_numeric) + ',' + format_double(p.t_sft_closed) + ',' + format_double(p.t_sft_numeric) +
           '\n';
  rec.write("gradflow_sweep.csv", csv);

  bool ok = true;
  nlohmann::ordered_json fit;
  fit["K"] = K;
  fit["N"] = N;
  fit["tail_sigma"] = tail;
  if (sweep.fit) {
    const auto& f = *sweep.fit;
    fit["tail_points"] = f.rft_loglog.n;
    fit["rft_loglog_slope"] = f.rft_loglog.slope;
    fit["rft_loglog_intercept"] = f.rft_loglog.intercept;
    fit["sft_linear_slope"] = f.sft_linear.slope;
    fit["sft_linear_intercept"] = f.sft_linear.intercept;
    fit["sft_linear_r2"] = f.sft_linear.r2;
    fit["ratio_increasing"] = f.ratio_increasing;
    const bool within = f.rft_loglog.slope >= slope_min && f.rft_loglog.slope <= slope_max &&
                        f.sft_linear.r2 >= r2_min && f.ratio_increasing;
    fit["within_windows"] = within;
    ok = ok && within;
  } else {
    fit["tail_points"] = 0;
    fit["within_windows"] = nullptr;
  }

  // Time-domain RK4 checks against the closed forms.
  const auto ks = c.get_ints("gradflow", "check_K", {2, 5, 10});
  const auto ns = c.get_reals("gradflow", "check_N", {1, 10});
  const auto mus = c.get_reals("gradflow", "check_mu0", {-0.1, -0.5, -1, -2, -4, -6});
  struct Row {
    int K;
    double N, mu0;
    Dynamics d;
    double closed, numeric, rel, cons, gap;
  };
  std::vector<std::tuple<int, double, double, Dynamics>> cases;
  for (long long k : ks)
    for (double n : ns)
      for (double m : mus)
        for (Dynamics d : {Dynamics::RFT, Dynamics::SFT}) cases.emplace_back(static_cast<int>(k), n, m, d);
  std::vector<Row> rows(cases.size());
  parallel_for(cases.size(), ctx.jobs, [&](std::size_t i) {
    auto [k, n, m, d] = cases[i];
    const LinearSetting s{k, n, m};
    s.validate(true);
    const double tc = t_closed(d, s);
    const double step = default_step(d, s);
    const MuTrajectory tr = integrate_mu(d, s, tc > 0.0 ? 2.0 * tc : 1.0, step);
    const double tn = tr.crossing_time.value_or(std::nan(""));
    const double rel = tc > 0.0 ? std::abs(tn - tc) / tc : std::abs(tn - tc);
    rows[i] = {k, n, m, d, tc, tn, rel, tr.conservation_residual, wv_reduction_gap(d, s, tr, step)};
  });
  std::string chk = "K,N,mu0,dynamics,t_closed,t_numeric,rel_error,conservation_residual,wv_gap\n";
  double worst_rel = 0.0, worst_cons = 0.0;
  for (const auto& r : rows) {
    chk += std::to_string(r.K) + ',' + format_double(r.N) + ',' + format_double(r.mu0) + ',' +
           (r.d == Dynamics::RFT ? "rft" : "sft") + ',' + format_double(r.closed) + ',' + format_double(r.numeric) + ',' +
           format_double(r.rel) + ',' + format_double(r.cons) + ',' + format_double(r.gap) + '\n';
    worst_rel = std::max(worst_rel, std::isfinite(r.rel) ? r.rel : 1e300);
    worst_cons = std::max(worst_cons, r.cons);
  }
  rec.write("gradflow_checks.csv", chk);
  fit["checks"] = rows.size();
  fit["max_crossing_rel_error"] = worst_rel;
  fit["max_conservation_residual"] = worst_cons;
  ok = ok && worst_rel <= rel_tol && worst_cons <= cons_tol;
  rec.write("gradflow_fit.json", fit.dump(1) + "\n");
  *ctx.log << "gradflow: " << sweep.points.size() << " grid points, " << rows.size() << " integrator checks, "
           << (ok ? "all within windows" : "outside windows") << "\n";
  return ok ? kExitOk : kExitViolation;
}

struct PreparedData {
  ControlledSpec spec;
  ControlledDataset data;
  RewardSpec reward = RewardSpec::table();
  PretrainResult pre;
};

inline PreparedData prepare_controlled(const Config& c, const RunContext& ctx, ControlledSpec defaults = {}) {
  const std::uint64_t seed = config_seed(c, ctx, defaults.seed);
  ControlledSpec spec = spec_from(c, seed, defaults);
  ControlledDataset ds;
  const std::string csv = c.get_string("data", "dataset_csv", "");
  if (!csv.empty()) {
    ds = load_dataset_csv(csv, spec.n_labels);
    spec.n_samples = ds.size();
    spec.input_dim = ds.input_dim();
  } else {
    ds = build_controlled_dataset(spec);
  }
  const OptimizerConfig popt = optimizer_from(c, "pretrain", default_pretrain_optimizer());
  *ctx.log << "pretraining " << (spec.linear_model ? "linear" : "mlp") << " model for " << popt.epochs << " epochs\n";
  PretrainResult pre = pretrain(spec, ds, popt);
  if (!pre.converged)
    *ctx.log << "warning: pretraining did not converge (loss " << format_double(pre.final_loss) << ", target entropy "
             << format_double(pre.target_entropy) << ")\n";
  RewardSpec reward = finetune_reward(ds, spec);
  return {spec, std::move(ds), std::move(reward), std::move(pre)};
}

inline std::vector<InputStats> exact_stats(const SampleStats& s) {
  std::vector<InputStats> out;
  for (Eigen::Index i = 0; i < s.reward_mean.size(); ++i)
    out.push_back({static_cast<std::size_t>(i), s.reward_mean[i], s.reward_std[i], 0});
  return out;
}

inline nlohmann::ordered_json group_summary(const SampleStats& s, const ControlledDataset& ds) {
  nlohmann::ordered_json j;
  for (Group g : {Group::SMALL_STD, Group::LARGE_STD}) {
    if (ds.members(g).empty()) continue;
    nlohmann::ordered_json e;
    e["count"] = ds.members(g).size();
    e["reward_mean"] = group_mean(s.reward_mean, ds, g);
    e["reward_std_median"] = group_median(s.reward_std, ds, g);
    e["grad_norm_median"] = group_median(s.grad_norm, ds, g);
    e["accuracy"] = group_mean(s.correct, ds, g);
    j[to_string(g)] = e;
  }
  return j;
}

struct FinetuneRun {
  std::string name;
  TrainMode mode;
  TrainingTrace trace;
  SoftmaxPolicy policy;
};

inline std::vector<FinetuneRun> run_finetunes(const Config& c, const RunContext& ctx, const PreparedData& pd) {
  const OptimizerConfig opt = optimizer_from(c, "controlled", default_finetune_optimizer());
  const long long log_every = c.get_int("controlled", "log_every", 100);
  if (log_every < 1) throw ConfigError(c.source() + ": [controlled] log_every must be >= 1");
  RftOptions rft;
  rft.temperature = c.get_real("controlled", "temperature", 1.0);
  rft.entropy_coef = c.get_real("controlled", "entropy_coef", 0.0);
  if (!(rft.temperature > 0.0)) throw ConfigError(c.source() + ": [controlled] temperature must be positive");
  std::vector<FinetuneRun> runs;
  for (const auto& r : c.get_strings("controlled", "runs", {"rft", "sft"})) {
    if (r != "rft" && r != "sft") throw ConfigError(c.source() + ": [controlled] runs entries must be 'rft' or 'sft'");
    runs.push_back({r, r == "rft" ? TrainMode::RFT : TrainMode::SFT, {}, pd.pre.policy});
  }
  parallel_for(runs.size(), ctx.jobs, [&](std::size_t i) {
    TrainOptions to;
    to.log_every = static_cast<std::size_t>(log_every);
    to.rft = rft;
    to.shuffle_seed = pd.spec.seed + 17 + i;
    runs[i].trace = train(runs[i].policy, pd.data, pd.reward, runs[i].mode, opt, to);
  });
  return runs;
}

inline nlohmann::ordered_json pretrain_json(const PreparedData& pd) {
  nlohmann::ordered_json j;
  j["epochs"] = pd.pre.epochs;
  j["final_loss"] = pd.pre.final_loss;
  j["target_entropy"] = pd.pre.target_entropy;
  j["converged"] = pd.pre.converged;
  return j;
}

inline int cmd_controlled(const Config& c, const RunContext& ctx, RunRecorder& rec) {
  PreparedData pd = prepare_controlled(c, ctx);
  std::vector<FinetuneRun> runs = run_finetunes(c, ctx, pd);
  nlohmann::ordered_json summary;
  summary["seed"] = pd.spec.seed;
  summary["pretrain"] = pretrain_json(pd);
  const SampleStats pre_stats = evaluate_samples(pd.pre.policy, pd.data, pd.reward, TrainMode::RFT);
  summary["pretrained"] = group_summary(pre_stats, pd.data);
  rec.write("scatter_pretrained.csv", scatter_csv(exact_stats(pre_stats)));
  const bool save = c.get_bool("controlled", "save_policies", false);
  if (save) {
    save_policy(pd.pre.policy, rec.path("policy_pretrained.json"));
    rec.note_output("policy_pretrained.json");
  }
  for (auto& r : runs) {
    rec.write("trace_" + r.name + ".csv", trace_csv(r.trace));
    rec.write("scatter_" + r.name + ".csv", scatter_csv(exact_stats(*r.trace.final)));
    nlohmann::ordered_json j;
    j["initial"] = group_summary(*r.trace.initial, pd.data);
    j["final"] = group_summary(*r.trace.final, pd.data);
    summary["runs"][r.name] = j;
    if (save) {
      save_policy(r.policy, rec.path("policy_" + r.name + ".json"));
      rec.note_output("policy_" + r.name + ".json");
    }
  }
  rec.write("controlled_summary.json", summary.dump(1) + "\n");
  *ctx.log << "controlled: " << runs.size() << " finetuning runs written\n";
  return kExitOk;
}

inline int cmd_mitigate(const Config& c, const RunContext& ctx, RunRecorder& rec) {
  ControlledSpec defaults;
  defaults.label_source = LabelSource::Class;
  defaults.class_separation = 1.0;
  PreparedData pd = prepare_controlled(c, ctx, defaults);
  OptimizerConfig sft_default = default_finetune_optimizer();
  sft_default.epochs = 1000;
  const OptimizerConfig opt_sft = optimizer_from(c, "mitigate.sft", sft_default);
  const OptimizerConfig opt_rft = optimizer_from(c, "mitigate.rft", default_finetune_optimizer());
  const auto steps = c.get_reals("mitigate", "steps_fractions", {0.1, 1.0});
  const auto samples = c.get_reals("mitigate", "samples_fractions", {0.1, 1.0});
  for (double f : steps)
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError(c.source() + ": [mitigate] steps_fractions must lie in (0, 1]");
  for (double f : samples)
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError(c.source() + ": [mitigate] samples_fractions must lie in (0, 1]");
  const double thr = c.get_real("mitigate", "std_threshold", 0.1);
  const long long log_every = c.get_int("mitigate", "log_every", 100);
  if (log_every < 1) throw ConfigError(c.source() + ": [mitigate] log_every must be >= 1");
  const bool traces = c.get_bool("mitigate", "write_traces", true);

  std::vector<std::pair<double, double>> cells;
  for (double s : steps)
    for (double n : samples) cells.emplace_back(s, n);
  bool has_full = false;
  for (auto& [s, n] : cells) has_full = has_full || (s == 1.0 && n == 1.0);
  if (!has_full) cells.emplace_back(1.0, 1.0);

  *ctx.log << "mitigate: RFT baseline and " << cells.size() << " partial-SFT cells\n";
  const double baseline =
      rft_baseline(pd.pre.policy, pd.data, pd.reward, opt_rft, static_cast<std::size_t>(log_every));
  std::vector<std::optional<MitigationResult>> results(cells.size());
  parallel_for(cells.size(), ctx.jobs, [&](std::size_t i) {
    results[i] = partial_sft_then_rft(pd.pre.policy, pd.data, pd.reward, cells[i].first, cells[i].second, opt_sft,
                                      opt_rft, pd.spec.seed + 101, baseline, static_cast<std::size_t>(log_every), thr);
  });
  double full = 0.0;
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (cells[i].first == 1.0 && cells[i].second == 1.0) full = results[i]->report.final_reward;

  std::string csv =
      "steps_fraction,samples_fraction,sft_epochs,sft_samples,count_before,count_after,reward_after_sft,final_reward,"
      "baseline_final_reward,ratio_to_full\n";
  nlohmann::ordered_json j;
  j["seed"] = pd.spec.seed;
  j["pretrain"] = pretrain_json(pd);
  j["std_threshold"] = thr;
  j["baseline_final_reward"] = baseline;
  j["full_sft_final_reward"] = full;
  j["cells"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& r = results[i]->report;
    const double ratio = full != 0.0 ? r.final_reward / full : std::nan("");
    const bool in_grid = has_full || i + 1 < cells.size();
    if (in_grid)
      csv += format_double(r.steps_fraction) + ',' + format_double(r.samples_fraction) + ',' +
             std::to_string(r.sft_epochs) + ',' + std::to_string(r.sft_samples) + ',' + std::to_string(r.count_before) +
             ',' + std::to_string(r.count_after) + ',' + format_double(r.reward_after_sft) + ',' +
             format_double(r.final_reward) + ',' + format_double(r.baseline_final_reward) + ',' + format_double(ratio) +
             '\n';
    nlohmann::ordered_json e;
    e["steps_fraction"] = r.steps_fraction;
    e["samples_fraction"] = r.samples_fraction;
    e["in_grid"] = in_grid;
    e["sft_epochs"] = r.sft_epochs;
    e["sft_samples"] = r.sft_samples;
    e["count_before"] = r.count_before;
    e["count_after"] = r.count_after;
    e["reward_before"] = r.reward_before;
    e["reward_after_sft"] = r.reward_after_sft;
    e["final_reward"] = r.final_reward;
    e["baseline_final_reward"] = r.baseline_final_reward;
    e["ratio_to_full"] = ratio;
    e["sft_subset_seed"] = r.seed;
    j["cells"].push_back(e);
    if (traces) {
      const std::string tag = "s" + format_double(r.steps_fraction) + "_n" + format_double(r.samples_fraction);
      rec.write("trace_mitigate_" + tag + "_sft.csv", trace_csv(results[i]->sft_trace));
      rec.write("trace_mitigate_" + tag + "_rft.csv", trace_csv(results[i]->rft_trace));
    }
  }
  rec.write("mitigation.csv", csv);
  rec.write("mitigation_report.json", j.dump(1) + "\n");
  return kExitOk;
}

inline std::vector<InputStats> sampled_stats_for(const SoftmaxPolicy& policy, const ControlledDataset& ds,
                                                 const RewardSpec& reward, std::size_t n, std::uint64_t seed) {
  std::vector<InputStats> out;
  for (std::size_t i = 0; i < ds.size(); ++i) out.push_back(estimate_stats(policy, ds.input(i), reward, StatsMode::sampled(n, seed)));
  return out;
}

/// RMS over replicates of |sampled - exact| for mean and std, per n.
struct ConvergencePoint {
  std::size_t n = 0;
  double mean_error = 0.0;
  double std_error = 0.0;
};

inline std::vector<ConvergencePoint> sampling_convergence(const SoftmaxPolicy& policy, const Input& x,
                                                          const RewardSpec& reward, const std::vector<std::size_t>& ns,
                                                          std::size_t reps, std::uint64_t seed) {
  const InputStats exact = estimate_stats(policy, x, reward);
  const PrefixTree tree = expand(policy, x);
  const Vector r = reward.rewards_for(x.id, policy.vocab());
  std::vector<ConvergencePoint> out;
  for (std::size_t k = 0; k < ns.size(); ++k) {
    ConvergencePoint p{ns[k]};
    for (std::size_t rep = 0; rep < reps; ++rep) {
      Rng rng = Rng::stream(seed + k, rep);
      const InputStats s = sampled_stats(policy.vocab(), tree, r, x.id, ns[k], rng);
      p.mean_error += (s.reward_mean - exact.reward_mean) * (s.reward_mean - exact.reward_mean);
      p.std_error += (s.reward_std - exact.reward_std) * (s.reward_std - exact.reward_std);
    }
    p.mean_error = std::sqrt(p.mean_error / static_cast<double>(reps));
    p.std_error = std::sqrt(p.std_error / static_cast<double>(reps));
    out.push_back(p);
  }
  return out;
}

inline int cmd_diagnose(const Config& c, const RunContext& ctx, RunRecorder& rec) {
  PreparedData pd = prepare_controlled(c, ctx);
  const long long n = c.get_int("diagnose", "sample_count", 10);
  if (n < 2) throw ConfigError(c.source() + ": [diagnose] sample_count must be >= 2");
  const double q = c.get_real("diagnose", "percentile", 10.0);
  const double cutoff = c.get_real("diagnose", "mean_cutoff", 0.9);
  std::vector<std::size_t> conv_ns;
  for (long long v : c.get_ints("diagnose", "convergence_n", {100, 1000, 10000, 100000})) {
    if (v < 2) throw ConfigError(c.source() + ": [diagnose] convergence_n entries must be >= 2");
    conv_ns.push_back(static_cast<std::size_t>(v));
  }
  const long long reps = c.get_int("diagnose", "convergence_reps", 50);
  if (reps < 1) throw ConfigError(c.source() + ": [diagnose] convergence_reps must be >= 1");

  Config run_cfg = c;
  if (!c.has("controlled", "runs")) run_cfg.set("controlled", "runs", "rft, sft");
  std::vector<FinetuneRun> runs = run_finetunes(run_cfg, ctx, pd);
  const std::uint64_t sseed = pd.spec.seed + 7;
  const SampleStats pre = evaluate_samples(pd.pre.policy, pd.data, pd.reward, TrainMode::RFT, {}, false);
  const auto pre_exact = exact_stats(pre);
  const auto pre_sampled = sampled_stats_for(pd.pre.policy, pd.data, pd.reward, static_cast<std::size_t>(n), sseed);

  nlohmann::ordered_json j;
  j["seed"] = pd.spec.seed;
  j["sample_count"] = n;
  j["percentile"] = q;
  j["mean_cutoff"] = cutoff;
  auto pct = [&](const std::vector<InputStats>& s) -> nlohmann::ordered_json {
    try {
      return std_percentile(s, q, cutoff);
    } catch (const Error&) {
      return nullptr;
    }
  };
  j["pretrained_std_percentile_exact"] = pct(pre_exact);
  j["pretrained_std_percentile_sampled"] = pct(pre_sampled);
  rec.write("scatter_pretrained_exact.csv", scatter_csv(pre_exact));
  rec.write("scatter_pretrained_sampled.csv", scatter_csv(pre_sampled));
  std::map<std::string, double> final_reward;
  for (const auto& r : runs) {
    const auto post_exact = exact_stats(*r.trace.final);
    const auto post_sampled = sampled_stats_for(r.policy, pd.data, pd.reward, static_cast<std::size_t>(n), sseed + 1);
    rec.write("scatter_" + r.name + "_exact.csv", scatter_csv(post_exact));
    rec.write("scatter_" + r.name + "_sampled.csv", scatter_csv(post_sampled));
    auto corr = [&](const std::vector<InputStats>& a, const std::vector<InputStats>& b) -> nlohmann::ordered_json {
      try {
        return correlation_report(a, b);
      } catch (const Error&) {
        return nullptr;
      }
    };
    j["correlation_exact"][r.name] = corr(pre_exact, post_exact);
    j["correlation_sampled"][r.name] = corr(pre_sampled, post_sampled);
    final_reward[r.name] = r.trace.final->reward_mean.mean();
    j["final_reward"][r.name] = final_reward[r.name];
  }
  if (final_reward.count("rft") && final_reward.count("sft"))
    j["rft_minus_sft_reward"] = final_reward["rft"] - final_reward["sft"];

  // Sampled-vs-exact convergence on the input with the largest pretrained std.
  std::size_t probe = 0;
  for (std::size_t i = 1; i < pre_exact.size(); ++i)
    if (pre_exact[i].reward_std > pre_exact[probe].reward_std) probe = i;
  const auto conv =
      sampling_convergence(pd.pre.policy, pd.data.input(probe), pd.reward, conv_ns, static_cast<std::size_t>(reps), sseed + 2);
  std::string ccsv = "n,mean_rms_error,std_rms_error\n";
  std::vector<double> ln, lm, ls;
  for (const auto& p : conv) {
    ccsv += std::to_string(p.n) + ',' + format_double(p.mean_error) + ',' + format_double(p.std_error) + '\n';
    ln.push_back(std::log(static_cast<double>(p.n)));
    lm.push_back(std::log(p.mean_error));
    ls.push_back(std::log(p.std_error));
  }
  rec.write("sampling_convergence.csv", ccsv);
  j["convergence_probe_input"] = probe;
  if (conv.size() >= 2) {
    j["convergence_mean_slope"] = least_squares(ln, lm).slope;
    j["convergence_std_slope"] = least_squares(ln, ls).slope;
  }
  rec.write("diagnose_summary.json", j.dump(1) + "\n");
  return kExitOk;
}

inline int cmd_plot_data(const Config& c, const RunContext& ctx, RunRecorder& rec) {
  std::vector<std::string> files = c.get_strings("plot", "traces", {});
  files.insert(files.end(), ctx.inputs.begin(), ctx.inputs.end());
  if (files.empty()) throw ConfigError(c.source() + ": plot-data needs trace files ([plot] traces or arguments)");
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw ConfigError("cannot open trace file '" + f + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    const auto rows = parse_trace_csv(ss.str());
    const std::string stem = std::filesystem::path(f).stem().string();
    struct Panel {
      const char* name;
      double TraceRow::*field;
    };
    for (const Panel& p : {Panel{"reward", &TraceRow::reward_mean}, Panel{"reward_std", &TraceRow::reward_std_mean},
                           Panel{"grad_norm", &TraceRow::grad_norm_mean}, Panel{"accuracy", &TraceRow::accuracy}}) {
      std::map<std::size_t, std::map<std::string, double>> by_step;
      for (const auto& r : rows) by_step[r.step][r.group] = r.*(p.field);
      std::string out = "step,small_std,large_std,all\n";
      for (const auto& [step, g] : by_step) {
        out += std::to_string(step);
        for (const char* name : {"small_std", "large_std", "all"}) {
          auto it = g.find(name);
          out += ',' + (it == g.end() ? std::string() : format_double(it->second));
        }
        out += '\n';
      }
      rec.write(stem + "_" + p.name + ".csv", out);
    }
  }
  return kExitOk;
}

/// Validates the config, runs the command and writes the manifest.
inline int run_command(const std::string& command, const Config& cfg, const RunContext& ctx) {
  std::unique_ptr<RunRecorder> rec;
  try {
    cfg.validate(schema_for(command));
    const std::uint64_t seed = config_seed(cfg, ctx, command == "verify-bounds" ? 42 : 3);
    rec = std::make_unique<RunRecorder>(command, cfg, ctx, seed);
    int code;
    if (command == "verify-bounds") code = cmd_verify_bounds(cfg, ctx, *rec);
    else if (command == "gradflow") code = cmd_gradflow(cfg, ctx, *rec);
    else if (command == "controlled") code = cmd_controlled(cfg, ctx, *rec);
    else if (command == "mitigate") code = cmd_mitigate(cfg, ctx, *rec);
    else if (command == "diagnose") code = cmd_diagnose(cfg, ctx, *rec);
    else code = cmd_plot_data(cfg, ctx, *rec);
    rec->finish(code, code == kExitOk ? "ok" : "violation");
    return code;
  } catch (const ConfigError& e) {
    *ctx.log << "error: " << e.what() << "\n";
    if (rec) rec->finish(kExitConfig, "failed", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    *ctx.log << "error: " << e.what() << "\n";
    if (rec) rec->finish(kExitRuntime, "failed", e.what());
    return kExitRuntime;
  }
}

}  // namespace rftlab
