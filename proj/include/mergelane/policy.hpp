#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "mergelane/errors.hpp"
#include "mergelane/vehicle.hpp"

namespace mergelane {

// Restricted-lane access families. Names follow the usual notation:
// DBL, Plus_i, CAVStaticPlus_i, CAVDynamic_v. Access_f marks a uniformly
// random fraction f of all vehicles as permitted (lane-utilization study).
enum class PolicyKind : std::uint8_t {
  kDbl,
  kPlus,
  kCavStaticPlus,
  kCavDynamic,
  kAccessFraction,
};

struct PolicySpec {
  PolicyKind kind = PolicyKind::kDbl;
  int occupancy_threshold = 1;      // i for Plus / CAVStaticPlus
  double speed_target_mps = 24.0;   // v for CAVDynamic
  double access_fraction = 1.0;     // f for Access
  double control_interval_s = 60.0;
  int initial_threshold = 1;

  bool is_dynamic() const { return kind == PolicyKind::kCavDynamic; }

  void validate(double speed_limit_mps) const {
    if ((kind == PolicyKind::kPlus || kind == PolicyKind::kCavStaticPlus) &&
        (occupancy_threshold < 1 || occupancy_threshold > 5)) {
      throw ValidationError("occupancy threshold must lie in {1..5}");
    }
    if (kind == PolicyKind::kCavDynamic &&
        (speed_target_mps <= 0.0 || speed_target_mps > speed_limit_mps)) {
      throw ValidationError("dynamic speed parameter must lie in (0, speed limit]");
    }
    if (kind == PolicyKind::kAccessFraction &&
        (access_fraction < 0.0 || access_fraction > 1.0)) {
      throw ValidationError("access fraction must lie in [0,1]");
    }
    if (control_interval_s <= 0.0) {
      throw ValidationError("control interval must be positive");
    }
    if (initial_threshold < 1 || initial_threshold > 5) {
      throw ValidationError("initial threshold must lie in {1..5}");
    }
  }

  std::string name() const {
    char buf[48];
    switch (kind) {
      case PolicyKind::kDbl:
        return "DBL";
      case PolicyKind::kPlus:
        std::snprintf(buf, sizeof buf, "Plus_%d", occupancy_threshold);
        return buf;
      case PolicyKind::kCavStaticPlus:
        std::snprintf(buf, sizeof buf, "CAVStaticPlus_%d", occupancy_threshold);
        return buf;
      case PolicyKind::kCavDynamic:
        std::snprintf(buf, sizeof buf, "CAVDynamic_%g", speed_target_mps);
        return buf;
      case PolicyKind::kAccessFraction:
        std::snprintf(buf, sizeof buf, "Access_%g", access_fraction);
        return buf;
    }
    return "?";
  }

  static PolicySpec parse(const std::string& name) {
    PolicySpec p;
    auto suffix_value = [&](const std::string& prefix) {
      const std::string tail = name.substr(prefix.size());
      if (tail.empty()) throw ParseError("policy '" + name + "' is missing its parameter");
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(tail, &used);
      } catch (const std::exception&) {
        throw ParseError("policy '" + name + "' has a malformed parameter");
      }
      if (used != tail.size()) {
        throw ParseError("policy '" + name + "' has a malformed parameter");
      }
      return v;
    };
    if (name == "DBL") {
      p.kind = PolicyKind::kDbl;
    } else if (name.rfind("Plus_", 0) == 0) {
      p.kind = PolicyKind::kPlus;
      p.occupancy_threshold = static_cast<int>(suffix_value("Plus_"));
    } else if (name.rfind("CAVStaticPlus_", 0) == 0) {
      p.kind = PolicyKind::kCavStaticPlus;
      p.occupancy_threshold = static_cast<int>(suffix_value("CAVStaticPlus_"));
    } else if (name.rfind("CAVDynamic_", 0) == 0) {
      p.kind = PolicyKind::kCavDynamic;
      p.speed_target_mps = suffix_value("CAVDynamic_");
    } else if (name.rfind("Access_", 0) == 0) {
      p.kind = PolicyKind::kAccessFraction;
      p.access_fraction = suffix_value("Access_");
    } else {
      throw ParseError("unknown policy '" + name +
                       "' (expected DBL, Plus_i, CAVStaticPlus_i, CAVDynamic_v or Access_f)");
    }
    return p;
  }
};

// Feedback controller state for CAVDynamic. Speeds are sampled once per
// tick and averaged over the control interval.
struct ControllerState {
  int threshold = 1;
  double last_update_s = 0.0;
  double speed_sum = 0.0;
  std::uint64_t speed_samples = 0;
};

struct ControllerLogRow {
  double interval_end_s = 0.0;
  double interval_mean_speed = 0.0;
  int threshold_before = 1;
  int threshold_after = 1;
};

inline void record_speed_sample(ControllerState& state, double mean_speed_mps) {
  state.speed_sum += mean_speed_mps;
  state.speed_samples += 1;
}

// Applies the every-interval +/-1 threshold rule. Returns the log row when
// an interval boundary fired.
inline bool update_threshold(ControllerState& state, const PolicySpec& policy, double now_s,
                             ControllerLogRow* row = nullptr) {
  if (now_s - state.last_update_s < policy.control_interval_s) return false;
  const int before = state.threshold;
  double mean = 0.0;
  if (state.speed_samples > 0) {
    mean = state.speed_sum / static_cast<double>(state.speed_samples);
    if (mean < policy.speed_target_mps) {
      state.threshold = std::min(state.threshold + 1, 5);
    } else if (mean > policy.speed_target_mps) {
      state.threshold = std::max(state.threshold - 1, 1);
    }
  }
  state.speed_sum = 0.0;
  state.speed_samples = 0;
  state.last_update_s = now_s;
  if (row != nullptr) {
    row->interval_end_s = now_s;
    row->interval_mean_speed = mean;
    row->threshold_before = before;
    row->threshold_after = state.threshold;
  }
  return true;
}

// Buses are admitted under every policy; HDVs never qualify under the CAV
// policies. Plus_i additionally admits HDVs flagged as occupancy violators
// (a sensitivity knob, zero-rate by default).
inline bool permits(const PolicySpec& policy, const ControllerState& state,
                    const VehicleState& vehicle) {
  if (vehicle.klass == VehicleClass::kBus) return true;
  switch (policy.kind) {
    case PolicyKind::kDbl:
      return false;
    case PolicyKind::kPlus:
      if (vehicle.klass == VehicleClass::kHdv && vehicle.occupancy_violator) return true;
      return vehicle.passengers >= policy.occupancy_threshold;
    case PolicyKind::kCavStaticPlus:
      return vehicle.klass == VehicleClass::kCav &&
             vehicle.passengers >= policy.occupancy_threshold;
    case PolicyKind::kCavDynamic:
      return vehicle.klass == VehicleClass::kCav && vehicle.passengers >= state.threshold;
    case PolicyKind::kAccessFraction:
      return vehicle.access_granted;
  }
  return false;
}

}  // namespace mergelane
