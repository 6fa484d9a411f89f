#include "rftlab/commands.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <iostream>

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> jobs;
  std::vector<std::string> inputs;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "INI config file")->envname("RFTLAB_CONFIG");
  sub->add_option("--out", f.out, "output directory (default: config 'out' or ./out)")->envname("RFTLAB_OUT");
  sub->add_option("--seed", f.seed, "seed, overrides the config")->envname("RFTLAB_SEED");
  sub->add_option("--jobs", f.jobs, "worker threads")->envname("RFTLAB_JOBS")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  rftlab::keep_heap_resident();
  CLI::App app{"rftlab: reward-std experiments for reinforcement and supervised finetuning"};
  app.set_version_flag("--version", rftlab::kArtifactVersion);
  app.require_subcommand(1);
  Flags flags;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"verify-bounds", "randomized sweep of the gradient upper bounds"},
      {"gradflow", "closed-form vs RK4 crossing times and the separation sweep"},
      {"controlled", "pretrain, then RFT and SFT on the controlled dataset"},
      {"mitigate", "partial SFT followed by RFT over a steps x samples grid"},
      {"diagnose", "reward-std percentiles and correlations on controlled runs"},
      {"plot-data", "per-panel CSVs from training trace files"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub, flags);
    if (name == "plot-data") sub->add_option("traces", flags.inputs, "trace CSV files");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : rftlab::kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  rftlab::Config cfg;
  try {
    if (!flags.config.empty()) cfg = rftlab::Config::load(flags.config);
  } catch (const rftlab::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return rftlab::kExitConfig;
  }
  rftlab::RunContext ctx;
  ctx.out_dir = !flags.out.empty() ? flags.out : cfg.get_string("", "out", "out");
  ctx.seed = flags.seed;
  ctx.inputs = flags.inputs;
  try {
    const long long jobs = flags.jobs ? *flags.jobs : cfg.get_int("", "jobs", 1);
    if (jobs < 1) throw rftlab::ConfigError(cfg.source() + ": jobs must be >= 1");
    ctx.jobs = static_cast<unsigned>(jobs);
  } catch (const rftlab::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return rftlab::kExitConfig;
  }
  return rftlab::run_command(command, cfg, ctx);
}
