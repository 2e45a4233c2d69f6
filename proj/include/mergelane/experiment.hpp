#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mergelane/csv.hpp"
#include "mergelane/demand.hpp"
#include "mergelane/metrics.hpp"
#include "mergelane/scenario.hpp"
#include "mergelane/traffic.hpp"

namespace mergelane {

struct RunOptions {
  bool checks = false;
  bool trajectory = false;
  bool keep_records = true;
};

struct RunResult {
  int replicate = 0;
  std::uint64_t replicate_seed = 0;
  std::vector<VehicleRecord> records;
  std::optional<double> apd_s;
  double mean_vd_s = 0.0;
  std::uint64_t generated = 0;
  std::uint64_t exited = 0;
  std::uint64_t queued_at_end = 0;
  std::vector<ControllerLogRow> controller_log;
  SpeedBins bins;
  InvariantStats checks;
  std::vector<TrajectoryRow> trajectory;
};

inline std::uint64_t replicate_seed(std::uint64_t master_seed, int replicate) {
  return rng::combine(rng::mix64(master_seed + rng::kGolden),
                      static_cast<std::uint64_t>(replicate));
}

// One deterministic replication. The seed depends on (master_seed,
// replicate) only, never on the policy, so compared policies see the same
// arrival stream.
inline RunResult run_scenario(const ScenarioConfig& config, int replicate,
                              const RunOptions& options = {}) {
  config.validate();
  const RoadNetwork net = config.network.build();
  const DemandProfile profile = config.effective_demand();
  const rng::Streams streams =
      rng::Streams::derive(config.master_seed, static_cast<std::uint64_t>(replicate));

  SimContext ctx;
  ctx.network = &net;
  ctx.policy = config.effective_policy();
  if (ctx.policy.kind == PolicyKind::kCavDynamic) {
    // Speeds never exceed the limit, so a target at the limit could only
    // ratchet the threshold upward: an idle lane would read exactly the
    // target and hold. Capping the working target keeps "free lane =>
    // loosen" true for the boundary setting v = speed limit.
    ctx.policy.speed_target_mps =
        std::min(ctx.policy.speed_target_mps, net.speed_limit_mps - 0.5);
  }

  std::vector<ArrivalEvent> arrivals = sample_arrivals(profile, streams, config.coupling);
  const double coin_fraction =
      ctx.policy.kind == PolicyKind::kAccessFraction ? ctx.policy.access_fraction : 1.0;
  assign_vehicle_flags(arrivals, streams, coin_fraction, config.hdv_violation_rate);
  ctx.params = config.params;
  ctx.dt_s = config.dt_s;

  WorldState world = init_world(net, std::move(arrivals), streams,
                                ctx.policy.initial_threshold,
                                std::floor(profile.start_s()));
  world.run_checks = options.checks;
  std::vector<TrajectoryRow> trajectory;
  if (options.trajectory) world.trajectory = &trajectory;

  const double horizon = profile.horizon_end_s();
  StepScratch scratch;
  while (world.next_arrival < world.arrivals.size() || !world.entry_queue.empty() ||
         world.on_road > 0) {
    if (world.clock_s > horizon + config.drain_cap_s) {
      throw SimulationStalled("run did not drain within " +
                              std::to_string(config.drain_cap_s) + " s past the horizon");
    }
    step(world, ctx, scratch);
  }

  RunResult result;
  result.replicate = replicate;
  result.replicate_seed = replicate_seed(config.master_seed, replicate);
  result.generated = world.generated;
  result.exited = world.exited;
  result.queued_at_end = world.entry_queue.size();
  result.controller_log = std::move(world.controller_log);
  result.bins = std::move(world.bins);
  result.checks = world.checks;
  result.trajectory = std::move(trajectory);
  if (!world.records.empty()) {
    result.apd_s = apd(world.records);
    double sum = 0.0;
    for (const VehicleRecord& r : world.records) sum += vehicle_delay(r);
    result.mean_vd_s = sum / static_cast<double>(world.records.size());
  }
  if (options.keep_records) result.records = std::move(world.records);
  return result;
}

// Runs f(0..n-1) on up to `jobs` threads; rethrows the first failure.
template <typename F>
void parallel_for(std::size_t n, int jobs, F&& f) {
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          f(i);
        } catch (...) {
          std::scoped_lock lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---- persistence -----------------------------------------------------------

inline std::string vehicle_records_csv(std::span<const VehicleRecord> records) {
  std::string out =
      "id,class,passengers,depart_wanted_s,depart_actual_s,exit_s,d_t_s,time_loss_s,"
      "depart_delay_s,vd_s\n";
  for (const VehicleRecord& r : records) {
    out += std::to_string(r.id);
    out += ',';
    out += to_string(r.klass);
    out += ',';
    out += std::to_string(r.passengers);
    out += ',';
    out += csv::num(r.depart_wanted_s, 3);
    out += ',';
    out += csv::num(r.depart_actual_s, 3);
    out += ',';
    out += csv::num(r.exit_s, 3);
    out += ',';
    out += csv::num(r.free_flow_s, 3);
    out += ',';
    out += csv::num(time_loss(r), 3);
    out += ',';
    out += csv::num(depart_delay(r), 3);
    out += ',';
    out += csv::num(vehicle_delay(r), 3);
    out += '\n';
  }
  return out;
}

inline std::string controller_log_csv(std::span<const ControllerLogRow> rows) {
  std::string out = "interval_end_s,interval_mean_speed,threshold_before,threshold_after\n";
  for (const ControllerLogRow& r : rows) {
    out += csv::num(r.interval_end_s, 3);
    out += ',';
    out += csv::num(r.interval_mean_speed, 6);
    out += ',';
    out += std::to_string(r.threshold_before);
    out += ',';
    out += std::to_string(r.threshold_after);
    out += '\n';
  }
  return out;
}

inline std::string trajectory_csv(std::span<const TrajectoryRow> rows) {
  std::string out = "tick,vehicle_id,lane,position,speed\n";
  for (const TrajectoryRow& r : rows) {
    out += std::to_string(r.tick);
    out += ',';
    out += std::to_string(r.vehicle_id);
    out += ',';
    out += std::to_string(r.lane);
    out += ',';
    out += csv::num(r.position_m, 3);
    out += ',';
    out += csv::num(r.speed_mps, 3);
    out += '\n';
  }
  return out;
}

inline std::string proportion_label(double proportion) {
  return csv::num(proportion, 2);
}

inline std::filesystem::path run_csv_path(const std::filesystem::path& out_dir,
                                          const std::string& policy_name, double proportion,
                                          int replicate) {
  return out_dir / "runs" / policy_name / proportion_label(proportion) /
         ("rep" + std::to_string(replicate) + ".csv");
}

inline std::filesystem::path controller_csv_path(const std::filesystem::path& out_dir,
                                                 const std::string& policy_name,
                                                 double proportion, int replicate) {
  return out_dir / "controller" /
         (policy_name + "_" + proportion_label(proportion) + "_rep" +
          std::to_string(replicate) + ".csv");
}

inline void write_run_files(const std::filesystem::path& out_dir,
                            const std::string& policy_name, double proportion,
                            const RunResult& result) {
  csv::write_file(run_csv_path(out_dir, policy_name, proportion, result.replicate),
                  vehicle_records_csv(result.records));
  if (!result.controller_log.empty()) {
    csv::write_file(controller_csv_path(out_dir, policy_name, proportion, result.replicate),
                    controller_log_csv(result.controller_log));
  }
  if (!result.trajectory.empty()) {
    csv::write_file(out_dir / "trajectories" /
                        (policy_name + "_" + proportion_label(proportion) + "_rep" +
                         std::to_string(result.replicate) + ".csv"),
                    trajectory_csv(result.trajectory));
  }
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---- sweeps ----------------------------------------------------------------

struct SweepSpec {
  ScenarioConfig base;
  std::vector<PolicySpec> policies;
  std::vector<double> proportions;

  void validate() const {
    base.validate();
    if (policies.empty()) throw ValidationError("sweep needs at least one policy");
    if (proportions.empty()) throw ValidationError("sweep needs at least one proportion");
    for (double p : proportions) {
      if (p < 0.0 || p > 1.0) throw ValidationError("proportions must lie in [0,1]");
    }
  }
};

struct SweepCell {
  std::string policy;
  double proportion = 0.0;
  std::vector<double> rep_apds;
  MeanStd apd;
};

struct SweepResult {
  std::vector<SweepCell> cells;  // policy-major, proportion-minor

  const SweepCell& cell(const std::string& policy, double proportion) const {
    for (const SweepCell& c : cells) {
      if (c.policy == policy && std::abs(c.proportion - proportion) < 1e-12) return c;
    }
    throw OutOfRange("no sweep cell for " + policy + " at " + std::to_string(proportion));
  }
};

inline std::string sweep_table_csv(const SweepResult& result) {
  std::string out = "policy,proportion,apd_mean_s,apd_std_s,replications\n";
  for (const SweepCell& c : result.cells) {
    out += c.policy;
    out += ',';
    out += proportion_label(c.proportion);
    out += ',';
    out += csv::num(c.apd.mean, 6);
    out += ',';
    out += csv::num(c.apd.std, 6);
    out += ',';
    out += std::to_string(c.rep_apds.size());
    out += '\n';
  }
  return out;
}

// Every (policy, proportion, replicate) task is independent; per-run record
// CSVs stream to disk inside the task when persist_dir is set, so sweeps
// hold only summary numbers in memory.
inline SweepResult run_sweep(const SweepSpec& sweep, int jobs = 1,
                             const std::optional<std::filesystem::path>& persist_dir = {}) {
  sweep.validate();
  const std::size_t reps = static_cast<std::size_t>(sweep.base.replications);
  const std::size_t cells = sweep.policies.size() * sweep.proportions.size();

  SweepResult result;
  result.cells.resize(cells);
  for (std::size_t pi = 0; pi < sweep.policies.size(); ++pi) {
    for (std::size_t qi = 0; qi < sweep.proportions.size(); ++qi) {
      SweepCell& c = result.cells[pi * sweep.proportions.size() + qi];
      c.policy = sweep.policies[pi].name();
      c.proportion = sweep.proportions[qi];
      c.rep_apds.assign(reps, 0.0);
    }
  }

  parallel_for(cells * reps, jobs, [&](std::size_t task) {
    const std::size_t cell_index = task / reps;
    const int rep = static_cast<int>(task % reps);
    const std::size_t pi = cell_index / sweep.proportions.size();
    const std::size_t qi = cell_index % sweep.proportions.size();

    ScenarioConfig config = sweep.base;
    config.policy = sweep.policies[pi];
    config.cav_proportion = sweep.proportions[qi];

    RunOptions options;
    options.keep_records = true;
    RunResult run = run_scenario(config, rep, options);
    if (!run.apd_s.has_value()) {
      throw SimulationStalled("sweep cell produced no completed vehicles");
    }
    if (persist_dir.has_value()) {
      write_run_files(*persist_dir, config.policy.name(), sweep.proportions[qi], run);
    }
    result.cells[cell_index].rep_apds[static_cast<std::size_t>(rep)] = *run.apd_s;
  });

  for (SweepCell& c : result.cells) {
    c.apd = mean_std(c.rep_apds);
  }
  return result;
}

// ---- access-fraction study ---------------------------------------------------

struct AccessFractionCell {
  double fraction = 0.0;
  std::vector<double> rep_mean_vd;
  MeanStd vd;
  SpeedBins bins;  // pooled over replications
};

struct AccessStudyResult {
  std::vector<AccessFractionCell> cells;

  const AccessFractionCell& cell(double fraction) const {
    for (const AccessFractionCell& c : cells) {
      if (std::abs(c.fraction - fraction) < 1e-12) return c;
    }
    throw OutOfRange("no access cell for fraction " + std::to_string(fraction));
  }
};

inline AccessStudyResult run_access_fraction_study(
    const ScenarioConfig& base, const std::vector<double>& fractions, int jobs = 1,
    const std::optional<std::filesystem::path>& persist_dir = {}) {
  base.validate();
  for (double f : fractions) {
    if (f < 0.0 || f > 1.0) throw ValidationError("fractions must lie in [0,1]");
  }
  const std::size_t reps = static_cast<std::size_t>(base.replications);

  AccessStudyResult result;
  result.cells.resize(fractions.size());
  std::vector<std::vector<SpeedBins>> bins(fractions.size(),
                                           std::vector<SpeedBins>(reps));
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    result.cells[i].fraction = fractions[i];
    result.cells[i].rep_mean_vd.assign(reps, 0.0);
  }

  parallel_for(fractions.size() * reps, jobs, [&](std::size_t task) {
    const std::size_t fi = task / reps;
    const int rep = static_cast<int>(task % reps);
    ScenarioConfig config = base;
    config.access_fraction = fractions[fi];

    RunResult run = run_scenario(config, rep);
    if (persist_dir.has_value()) {
      write_run_files(*persist_dir, config.effective_policy().name(),
                      config.cav_proportion.value_or(config.demand.cav_share_of_cars()), run);
    }
    result.cells[fi].rep_mean_vd[static_cast<std::size_t>(rep)] = run.mean_vd_s;
    bins[fi][static_cast<std::size_t>(rep)] = std::move(run.bins);
  });

  for (std::size_t i = 0; i < fractions.size(); ++i) {
    AccessFractionCell& c = result.cells[i];
    c.vd = mean_std(c.rep_mean_vd);
    c.bins = bins[i].front();
    for (std::size_t r = 1; r < reps; ++r) {
      for (std::size_t b = 0; b < c.bins.speed_sum.size(); ++b) {
        c.bins.speed_sum[b] += bins[i][r].speed_sum[b];
        c.bins.samples[b] += bins[i][r].samples[b];
      }
    }
  }
  return result;
}

inline std::string vd_vs_fraction_csv(const AccessStudyResult& study) {
  std::string out = "fraction,vd_mean_s,vd_std_s,replications\n";
  for (const AccessFractionCell& c : study.cells) {
    out += csv::num(c.fraction, 2);
    out += ',';
    out += csv::num(c.vd.mean, 6);
    out += ',';
    out += csv::num(c.vd.std, 6);
    out += ',';
    out += std::to_string(c.rep_mean_vd.size());
    out += '\n';
  }
  return out;
}

inline std::string speed_vs_position_csv(const AccessStudyResult& study) {
  std::string out = "fraction,bin_start_m,mean_speed_mps\n";
  for (const AccessFractionCell& c : study.cells) {
    for (std::size_t b = 0; b < c.bins.speed_sum.size(); ++b) {
      out += csv::num(c.fraction, 2);
      out += ',';
      out += csv::num(static_cast<double>(b) * c.bins.bin_m, 1);
      out += ',';
      out += csv::num(c.bins.mean(b), 6);
      out += '\n';
    }
  }
  return out;
}

// ---- manifests ---------------------------------------------------------------

inline ordered_json make_manifest(const ScenarioConfig& config, const std::string& mode,
                                  const std::vector<std::string>& policies,
                                  const std::vector<double>& proportions,
                                  const std::vector<double>& fractions) {
  ordered_json m;
  m["tool"] = "mergelane";
  m["version"] = "0.1.0";
  m["mode"] = mode;
  m["config"] = scenario_to_json(config);
  if (!policies.empty()) m["policies"] = policies;
  if (!proportions.empty()) m["proportions"] = proportions;
  if (!fractions.empty()) m["fractions"] = fractions;
  ordered_json seeds = ordered_json::array();
  for (int r = 0; r < config.replications; ++r) {
    seeds.push_back(hex64(replicate_seed(config.master_seed, r)));
  }
  m["replicate_seeds"] = seeds;
  m["config_hash"] = hex64(fnv1a(m["config"].dump()));
  return m;
}

inline void write_manifest(const std::filesystem::path& out_dir, const ordered_json& manifest) {
  csv::write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

// Rebuilds the scenario a manifest was produced from; the demand profile is
// inlined, so no other file is needed.
inline ScenarioConfig scenario_from_manifest(const std::filesystem::path& manifest_path) {
  json j;
  try {
    j = json::parse(csv::read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw ParseError("cannot parse " + manifest_path.string() + ": " + e.what());
  }
  if (!j.contains("config")) throw ParseError("manifest has no 'config' object");
  return scenario_from_json(j.at("config"), manifest_path.parent_path());
}

}  // namespace mergelane
