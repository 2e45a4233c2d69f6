// Command-line front end: simulate / sweep / access-study / validate-config
// over scenario config files.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mergelane/experiment.hpp"
#include "mergelane/scenario.hpp"

namespace {

using namespace mergelane;

struct CommonArgs {
  std::string config_path;
  std::optional<std::string> policy;
  std::optional<double> proportion;
  std::optional<std::uint64_t> seed;
  std::optional<int> replications;
  std::optional<double> dt;
  std::optional<std::string> out_dir;
  int jobs = static_cast<int>(std::thread::hardware_concurrency());
  bool trajectory_log = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_config = true) {
  auto* opt = cmd->add_option("--config", args.config_path, "Scenario config file (JSON)");
  if (needs_config) opt->required();
  cmd->add_option("--policy", [&args](const std::vector<std::string>& v) {
        args.policy = v.back();
        return true;
      },
      "Policy override: DBL, Plus_i, CAVStaticPlus_i, CAVDynamic_v, Access_f");
  cmd->add_option("--proportion", [&args](const std::vector<std::string>& v) {
        args.proportion = std::stod(v.back());
        return true;
      },
      "CAV proportion override in [0,1]");
  cmd->add_option("--seed", [&args](const std::vector<std::string>& v) {
        args.seed = std::stoull(v.back());
        return true;
      },
      "Master seed override");
  cmd->add_option("--replications", [&args](const std::vector<std::string>& v) {
        args.replications = std::stoi(v.back());
        return true;
      },
      "Replication count override");
  cmd->add_option("--dt", [&args](const std::vector<std::string>& v) {
        args.dt = std::stod(v.back());
        return true;
      },
      "Time step override (seconds)");
  cmd->add_option("--out-dir", [&args](const std::vector<std::string>& v) {
        args.out_dir = v.back();
        return true;
      },
      "Output directory (falls back to $MERGELANE_OUT, then the config)");
  cmd->add_option("--jobs", args.jobs, "Parallel worker threads");
  cmd->add_flag("--trajectory-log", args.trajectory_log,
                "Record per-tick trajectories (tick,vehicle_id,lane,position,speed)");
}

ScenarioConfig load_with_overrides(const CommonArgs& args) {
  ScenarioConfig config = load_scenario(args.config_path);
  if (args.policy.has_value()) config.policy = PolicySpec::parse(*args.policy);
  if (args.proportion.has_value()) config.cav_proportion = *args.proportion;
  if (args.seed.has_value()) config.master_seed = *args.seed;
  if (args.replications.has_value()) config.replications = *args.replications;
  if (args.dt.has_value()) config.dt_s = *args.dt;
  if (args.out_dir.has_value()) {
    config.out_dir = *args.out_dir;
  } else if (const char* env = std::getenv("MERGELANE_OUT"); env != nullptr && *env != '\0') {
    config.out_dir = env;
  }
  config.validate();
  return config;
}

std::vector<double> parse_value_list(const std::string& text, const char* what) {
  std::vector<double> values;
  const auto colon = text.find(':');
  if (colon != std::string::npos) {
    double from = 0, to = 0, by = 0;
    if (std::sscanf(text.c_str(), "%lf:%lf:%lf", &from, &to, &by) != 3 || by <= 0) {
      throw ValidationError(std::string(what) + " range must be from:to:step");
    }
    const int n = static_cast<int>(std::floor((to - from) / by + 1e-9));
    for (int i = 0; i <= n; ++i) values.push_back(from + i * by);
    return values;
  }
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string tok = text.substr(start, comma == std::string::npos ? std::string::npos
                                                                          : comma - start);
    if (!tok.empty()) values.push_back(std::stod(tok));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (values.empty()) throw ValidationError(std::string(what) + " list is empty");
  return values;
}

std::vector<PolicySpec> parse_policy_list(const std::string& text) {
  std::vector<PolicySpec> policies;
  auto add = [&policies](const std::string& name) {
    policies.push_back(PolicySpec::parse(name));
  };
  if (text == "all") {
    for (int i = 1; i <= 5; ++i) add("CAVStaticPlus_" + std::to_string(i));
    for (int v = 22; v <= 25; ++v) add("CAVDynamic_" + std::to_string(v));
    return policies;
  }
  if (text == "baselines") {
    add("DBL");
    for (int i = 1; i <= 5; ++i) add("Plus_" + std::to_string(i));
    return policies;
  }
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string tok = text.substr(start, comma == std::string::npos ? std::string::npos
                                                                          : comma - start);
    if (!tok.empty()) add(tok);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (policies.empty()) throw ValidationError("policy list is empty");
  return policies;
}

int cmd_simulate(const CommonArgs& args) {
  ScenarioConfig config = load_with_overrides(args);
  const std::filesystem::path out_dir = config.out_dir;
  write_manifest(out_dir, make_manifest(config, "simulate", {config.effective_policy().name()},
                                        config.cav_proportion.has_value()
                                            ? std::vector<double>{*config.cav_proportion}
                                            : std::vector<double>{},
                                        {}));
  const double proportion =
      config.cav_proportion.value_or(config.demand.cav_share_of_cars());
  std::vector<double> apds(static_cast<std::size_t>(config.replications), 0.0);
  parallel_for(apds.size(), args.jobs, [&](std::size_t rep) {
    RunOptions options;
    options.trajectory = args.trajectory_log;
    RunResult run = run_scenario(config, static_cast<int>(rep), options);
    write_run_files(out_dir, config.effective_policy().name(), proportion, run);
    apds[rep] = run.apd_s.value_or(0.0);
  });
  const MeanStd stats = mean_std(apds);
  std::printf("%s proportion=%s APD %.2f +- %.2f s over %d replications\n",
              config.effective_policy().name().c_str(), proportion_label(proportion).c_str(),
              stats.mean, stats.std, config.replications);
  return 0;
}

int cmd_sweep(const CommonArgs& args, const std::string& policies_text,
              const std::string& proportions_text) {
  SweepSpec sweep;
  sweep.base = load_with_overrides(args);
  sweep.policies = parse_policy_list(policies_text);
  sweep.proportions = parse_value_list(proportions_text, "proportions");
  const std::filesystem::path out_dir = sweep.base.out_dir;

  std::vector<std::string> policy_names;
  for (const PolicySpec& p : sweep.policies) policy_names.push_back(p.name());
  write_manifest(out_dir,
                 make_manifest(sweep.base, "sweep", policy_names, sweep.proportions, {}));

  const SweepResult result = run_sweep(sweep, args.jobs, out_dir);
  csv::write_file(out_dir / "sweep_table.csv", sweep_table_csv(result));
  csv::write_file(out_dir / "plots" / "apd_vs_proportion.csv", sweep_table_csv(result));
  for (const SweepCell& c : result.cells) {
    std::printf("%s proportion=%s APD %.2f +- %.2f s over %zu replications\n",
                c.policy.c_str(), proportion_label(c.proportion).c_str(), c.apd.mean,
                c.apd.std, c.rep_apds.size());
  }
  return 0;
}

int cmd_access_study(const CommonArgs& args, const std::string& fractions_text) {
  ScenarioConfig config = load_with_overrides(args);
  const std::vector<double> fractions = parse_value_list(fractions_text, "fractions");
  const std::filesystem::path out_dir = config.out_dir;
  write_manifest(out_dir, make_manifest(config, "access-study", {}, {}, fractions));

  const AccessStudyResult study =
      run_access_fraction_study(config, fractions, args.jobs, out_dir);
  csv::write_file(out_dir / "plots" / "vd_vs_fraction.csv", vd_vs_fraction_csv(study));
  csv::write_file(out_dir / "plots" / "speed_vs_position.csv", speed_vs_position_csv(study));
  for (const AccessFractionCell& c : study.cells) {
    std::printf("fraction=%.2f mean VD %.2f +- %.2f s over %zu replications\n", c.fraction,
                c.vd.mean, c.vd.std, c.rep_mean_vd.size());
  }
  return 0;
}

int cmd_validate(const CommonArgs& args) {
  ScenarioConfig config = load_scenario(args.config_path);
  config.validate();
  std::printf("OK: %s (policy %s, %d replications)\n", args.config_path.c_str(),
              config.effective_policy().name().c_str(), config.replications);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "mergelane - microscopic lane-drop traffic simulator for restricted-lane access "
      "policies.\nPolicies: DBL (buses only), Plus_i (any vehicle with >= i passengers),\n"
      "CAVStaticPlus_i (buses and CAVs with >= i passengers), CAVDynamic_v (speed-feedback\n"
      "threshold, speed parameter v m/s), Access_f (random fraction f of vehicles)."};
  app.require_subcommand(1);

  CommonArgs args;
  std::string policies_text = "all";
  std::string proportions_text = "0.1:1.0:0.1";
  std::string fractions_text = "0.1:1.0:0.1";

  CLI::App* simulate = app.add_subcommand("simulate", "Run one policy over N replications");
  add_common(simulate, args);

  CLI::App* sweep = app.add_subcommand("sweep", "Run a policy x CAV-proportion APD sweep");
  add_common(sweep, args);
  sweep->add_option("--policies", policies_text,
                    "'all' (CAVStaticPlus_1..5 + CAVDynamic_22..25), 'baselines' "
                    "(DBL + Plus_1..5), or comma-separated names");
  sweep->add_option("--proportions", proportions_text, "from:to:step or comma-separated");

  CLI::App* study = app.add_subcommand("access-study",
                                       "Vary the admitted vehicle fraction (class-agnostic)");
  add_common(study, args);
  study->add_option("--fractions", fractions_text, "from:to:step or comma-separated");

  CLI::App* validate = app.add_subcommand("validate-config", "Check a scenario config file");
  add_common(validate, args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (simulate->parsed()) return cmd_simulate(args);
    if (sweep->parsed()) return cmd_sweep(args, policies_text, proportions_text);
    if (study->parsed()) return cmd_access_study(args, fractions_text);
    if (validate->parsed()) return cmd_validate(args);
  } catch (const mergelane::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
