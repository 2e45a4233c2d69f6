#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergelane/csv.hpp"
#include "mergelane/demand.hpp"
#include "mergelane/errors.hpp"
#include "mergelane/network.hpp"
#include "mergelane/policy.hpp"
#include "mergelane/traffic.hpp"

namespace mergelane {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace detail {

// Config parsing is strict: unknown fields are rejected so typos fail loudly.
inline void require_keys(const json& obj, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  if (!obj.is_object()) throw ParseError(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (const char* k : allowed) {
      if (key == k) {
        known = true;
        break;
      }
    }
    if (!known) throw ParseError("unknown field '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParseError(std::string("field '") + key + "' has the wrong type");
  }
}

template <typename T>
T get_required(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw ParseError("missing field '" + std::string(key) + "' in " + where);
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParseError(std::string("field '") + key + "' in " + where + " has the wrong type");
  }
}

}  // namespace detail

inline DemandProfile demand_from_json(const json& j) {
  detail::require_keys(j,
                       {"intervals", "p_hdv", "p_cav", "p_bus", "car_passenger_pmf",
                        "bus_passengers_mean"},
                       "demand profile");
  DemandProfile p;
  const json& ivs = j.contains("intervals") ? j.at("intervals") : json::array();
  if (!ivs.is_array() || ivs.empty()) {
    throw ParseError("demand profile needs a non-empty 'intervals' array");
  }
  for (std::size_t i = 0; i < ivs.size(); ++i) {
    detail::require_keys(ivs[i], {"start_s", "end_s", "veh_per_hour"},
                         "intervals[" + std::to_string(i) + "]");
    DemandInterval iv;
    iv.start_s = detail::get_required<double>(ivs[i], "start_s", "interval");
    iv.end_s = detail::get_required<double>(ivs[i], "end_s", "interval");
    iv.veh_per_hour = detail::get_required<double>(ivs[i], "veh_per_hour", "interval");
    p.intervals.push_back(iv);
  }
  p.p_hdv = detail::get_required<double>(j, "p_hdv", "demand profile");
  p.p_cav = detail::get_required<double>(j, "p_cav", "demand profile");
  p.p_bus = detail::get_required<double>(j, "p_bus", "demand profile");
  const auto pmf = detail::get_required<std::vector<double>>(j, "car_passenger_pmf",
                                                             "demand profile");
  if (pmf.size() != p.car_passenger_pmf.size()) {
    throw ParseError("car_passenger_pmf must list probabilities for 1..5 passengers");
  }
  std::copy(pmf.begin(), pmf.end(), p.car_passenger_pmf.begin());
  p.bus_passengers_mean = detail::get_required<double>(j, "bus_passengers_mean",
                                                       "demand profile");
  p.validate();
  return p;
}

inline ordered_json demand_to_json(const DemandProfile& p) {
  ordered_json j;
  j["intervals"] = ordered_json::array();
  for (const DemandInterval& iv : p.intervals) {
    ordered_json o;
    o["start_s"] = iv.start_s;
    o["end_s"] = iv.end_s;
    o["veh_per_hour"] = iv.veh_per_hour;
    j["intervals"].push_back(o);
  }
  j["p_hdv"] = p.p_hdv;
  j["p_cav"] = p.p_cav;
  j["p_bus"] = p.p_bus;
  j["car_passenger_pmf"] = p.car_passenger_pmf;
  j["bus_passengers_mean"] = p.bus_passengers_mean;
  return j;
}

inline DemandProfile load_profile(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(csv::read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError("cannot parse " + path.string() + ": " + e.what());
  }
  try {
    return demand_from_json(j);
  } catch (const ValidationError&) {
    throw;
  }
}

struct NetworkSpec {
  std::vector<LaneDropSpec> segments;
  double speed_limit_mps = 25.0;

  RoadNetwork build() const { return build_lane_drop_network(segments, speed_limit_mps); }
};

inline NetworkSpec network_from_json(const json& j) {
  detail::require_keys(j, {"speed_limit_mps", "segments"}, "network");
  NetworkSpec spec;
  spec.speed_limit_mps = detail::get_required<double>(j, "speed_limit_mps", "network");
  const json& segs = j.contains("segments") ? j.at("segments") : json::array();
  if (!segs.is_array() || segs.empty()) {
    throw ParseError("network needs a non-empty 'segments' array");
  }
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const std::string where = "segments[" + std::to_string(i) + "]";
    detail::require_keys(segs[i], {"length_m", "lane_count", "restricted_lane", "drop_side"},
                         where);
    LaneDropSpec s;
    s.length_m = detail::get_required<double>(segs[i], "length_m", where);
    s.lane_count = detail::get_required<int>(segs[i], "lane_count", where);
    if (segs[i].contains("restricted_lane")) {
      const json& r = segs[i].at("restricted_lane");
      if (r.is_string()) {
        const std::string side = r.get<std::string>();
        if (side == "left") {
          s.restricted_lane = 0;
        } else if (side == "right") {
          s.restricted_lane = s.lane_count - 1;
        } else {
          throw ParseError("restricted_lane must be an index, \"left\" or \"right\"");
        }
      } else {
        s.restricted_lane = detail::get_required<int>(segs[i], "restricted_lane", where);
      }
    }
    if (segs[i].contains("drop_side")) {
      const std::string side = detail::get_required<std::string>(segs[i], "drop_side", where);
      if (side == "left") {
        s.drop_side = DropSide::kLeft;
      } else if (side == "right") {
        s.drop_side = DropSide::kRight;
      } else {
        throw ParseError("drop_side must be \"left\" or \"right\"");
      }
    }
    spec.segments.push_back(s);
  }
  return spec;
}

inline ordered_json network_to_json(const NetworkSpec& spec) {
  ordered_json j;
  j["speed_limit_mps"] = spec.speed_limit_mps;
  j["segments"] = ordered_json::array();
  for (const LaneDropSpec& s : spec.segments) {
    ordered_json o;
    o["length_m"] = s.length_m;
    o["lane_count"] = s.lane_count;
    if (s.restricted_lane.has_value()) o["restricted_lane"] = *s.restricted_lane;
    if (s.drop_side.has_value()) o["drop_side"] = to_string(*s.drop_side);
    j["segments"].push_back(o);
  }
  return j;
}

// Everything one run needs; the demand profile is held by value so a config
// echo (manifest) is self-contained.
struct ScenarioConfig {
  NetworkSpec network;
  DemandProfile demand;
  std::string demand_profile_path;  // as referenced by the config file, if any
  double demand_scale = 1.0;
  PolicySpec policy;
  std::optional<double> cav_proportion;
  std::optional<double> access_fraction;
  std::uint64_t master_seed = 1;
  int replications = 10;
  double dt_s = 1.0;
  std::string out_dir = "out";
  ModelParams params;
  double hdv_violation_rate = 0.0;
  ClassCoupling coupling = ClassCoupling::kThreshold;
  double drain_cap_s = 48.0 * 3600.0;

  // The policy actually simulated: an access_fraction override replaces the
  // configured policy with Access_f.
  PolicySpec effective_policy() const {
    if (access_fraction.has_value()) {
      PolicySpec p = policy;
      p.kind = PolicyKind::kAccessFraction;
      p.access_fraction = *access_fraction;
      return p;
    }
    return policy;
  }

  DemandProfile effective_demand() const {
    DemandProfile p = scale_profile(demand, demand_scale);
    if (cav_proportion.has_value()) p = with_cav_proportion(p, *cav_proportion);
    return p;
  }

  void validate() const {
    NetworkSpec n = network;
    const RoadNetwork net = n.build();
    demand.validate();
    effective_demand().validate();
    effective_policy().validate(net.speed_limit_mps);
    params.validate();
    if (replications < 1) throw ValidationError("replications must be >= 1");
    if (dt_s <= 0.0) throw ValidationError("dt must be positive");
    if (cav_proportion.has_value() && (*cav_proportion < 0.0 || *cav_proportion > 1.0)) {
      throw ValidationError("cav_proportion must lie in [0,1]");
    }
    if (access_fraction.has_value() && (*access_fraction < 0.0 || *access_fraction > 1.0)) {
      throw ValidationError("access_fraction must lie in [0,1]");
    }
    if (hdv_violation_rate < 0.0 || hdv_violation_rate > 1.0) {
      throw ValidationError("hdv_violation_rate must lie in [0,1]");
    }
    if (drain_cap_s <= 0.0) throw ValidationError("drain_cap_s must be positive");
  }
};

inline ScenarioConfig scenario_from_json(const json& j, const std::filesystem::path& base_dir) {
  detail::require_keys(j,
                       {"network", "demand_profile", "demand", "demand_scale", "policy",
                        "cav_proportion", "access_fraction", "master_seed", "replications",
                        "dt_s", "out_dir", "model", "controller", "hdv_violation_rate",
                        "class_coupling", "drain_cap_s"},
                       "scenario config");
  ScenarioConfig c;
  if (!j.contains("network")) throw ParseError("scenario config needs a 'network'");
  c.network = network_from_json(j.at("network"));
  if (j.contains("demand") == j.contains("demand_profile")) {
    throw ParseError("scenario config needs exactly one of 'demand_profile' (path) or "
                     "'demand' (inline)");
  }
  if (j.contains("demand_profile")) {
    c.demand_profile_path = detail::get_required<std::string>(j, "demand_profile", "scenario");
    c.demand = load_profile(base_dir / c.demand_profile_path);
  } else {
    c.demand = demand_from_json(j.at("demand"));
  }
  c.demand_scale = detail::get_or<double>(j, "demand_scale", 1.0);
  if (c.demand_scale <= 0.0) throw ValidationError("demand_scale must be positive");
  c.policy = PolicySpec::parse(detail::get_required<std::string>(j, "policy", "scenario"));
  if (j.contains("cav_proportion") && !j.at("cav_proportion").is_null()) {
    c.cav_proportion = detail::get_required<double>(j, "cav_proportion", "scenario");
  }
  if (j.contains("access_fraction") && !j.at("access_fraction").is_null()) {
    c.access_fraction = detail::get_required<double>(j, "access_fraction", "scenario");
  }
  c.master_seed = detail::get_or<std::uint64_t>(j, "master_seed", 1);
  c.replications = detail::get_or<int>(j, "replications", 10);
  c.dt_s = detail::get_or<double>(j, "dt_s", 1.0);
  c.out_dir = detail::get_or<std::string>(j, "out_dir", "out");
  c.hdv_violation_rate = detail::get_or<double>(j, "hdv_violation_rate", 0.0);
  const std::string coupling = detail::get_or<std::string>(j, "class_coupling", "threshold");
  if (coupling == "threshold") {
    c.coupling = ClassCoupling::kThreshold;
  } else if (coupling == "resample") {
    c.coupling = ClassCoupling::kResample;
  } else {
    throw ParseError("class_coupling must be \"threshold\" or \"resample\"");
  }
  c.drain_cap_s = detail::get_or<double>(j, "drain_cap_s", 48.0 * 3600.0);

  if (j.contains("model")) {
    const json& m = j.at("model");
    detail::require_keys(m,
                         {"max_accel_mps2", "max_decel_mps2", "reaction_time_s", "min_gap_m",
                          "imperfection", "car_length_m", "bus_length_m", "lookahead_m",
                          "hysteresis_mps", "merge_zone_m", "speed_window_m"},
                         "model");
    ModelParams& p = c.params;
    auto both = [&](auto setter) {
      setter(p.car);
      setter(p.bus);
    };
    if (m.contains("max_accel_mps2")) {
      const double v = m.at("max_accel_mps2").get<double>();
      both([v](DriverParams& d) { d.max_accel_mps2 = v; });
    }
    if (m.contains("max_decel_mps2")) {
      const double v = m.at("max_decel_mps2").get<double>();
      both([v](DriverParams& d) { d.max_decel_mps2 = v; });
    }
    if (m.contains("reaction_time_s")) {
      const double v = m.at("reaction_time_s").get<double>();
      both([v](DriverParams& d) { d.reaction_time_s = v; });
    }
    if (m.contains("min_gap_m")) {
      const double v = m.at("min_gap_m").get<double>();
      both([v](DriverParams& d) { d.min_gap_m = v; });
    }
    if (m.contains("imperfection")) {
      const double v = m.at("imperfection").get<double>();
      both([v](DriverParams& d) { d.imperfection = v; });
    }
    p.car.vehicle_length_m = detail::get_or<double>(m, "car_length_m", p.car.vehicle_length_m);
    p.bus.vehicle_length_m = detail::get_or<double>(m, "bus_length_m", p.bus.vehicle_length_m);
    p.lookahead_m = detail::get_or<double>(m, "lookahead_m", p.lookahead_m);
    p.hysteresis_mps = detail::get_or<double>(m, "hysteresis_mps", p.hysteresis_mps);
    p.merge_zone_m = detail::get_or<double>(m, "merge_zone_m", p.merge_zone_m);
    p.speed_window_m = detail::get_or<double>(m, "speed_window_m", p.speed_window_m);
  }
  if (j.contains("controller")) {
    const json& ctl = j.at("controller");
    detail::require_keys(ctl, {"control_interval_s", "initial_threshold"}, "controller");
    c.policy.control_interval_s =
        detail::get_or<double>(ctl, "control_interval_s", c.policy.control_interval_s);
    c.policy.initial_threshold =
        detail::get_or<int>(ctl, "initial_threshold", c.policy.initial_threshold);
  }
  c.validate();
  return c;
}

inline ordered_json scenario_to_json(const ScenarioConfig& c) {
  ordered_json j;
  j["network"] = network_to_json(c.network);
  j["demand"] = demand_to_json(c.demand);
  j["demand_scale"] = c.demand_scale;
  j["policy"] = c.policy.name();
  if (c.cav_proportion.has_value()) j["cav_proportion"] = *c.cav_proportion;
  if (c.access_fraction.has_value()) j["access_fraction"] = *c.access_fraction;
  j["master_seed"] = c.master_seed;
  j["replications"] = c.replications;
  j["dt_s"] = c.dt_s;
  j["out_dir"] = c.out_dir;
  ordered_json m;
  m["max_accel_mps2"] = c.params.car.max_accel_mps2;
  m["max_decel_mps2"] = c.params.car.max_decel_mps2;
  m["reaction_time_s"] = c.params.car.reaction_time_s;
  m["min_gap_m"] = c.params.car.min_gap_m;
  m["imperfection"] = c.params.car.imperfection;
  m["car_length_m"] = c.params.car.vehicle_length_m;
  m["bus_length_m"] = c.params.bus.vehicle_length_m;
  m["lookahead_m"] = c.params.lookahead_m;
  m["hysteresis_mps"] = c.params.hysteresis_mps;
  m["merge_zone_m"] = c.params.merge_zone_m;
  m["speed_window_m"] = c.params.speed_window_m;
  j["model"] = m;
  ordered_json ctl;
  ctl["control_interval_s"] = c.policy.control_interval_s;
  ctl["initial_threshold"] = c.policy.initial_threshold;
  j["controller"] = ctl;
  j["hdv_violation_rate"] = c.hdv_violation_rate;
  j["class_coupling"] = to_string(c.coupling);
  j["drain_cap_s"] = c.drain_cap_s;
  return j;
}

inline ScenarioConfig load_scenario(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(csv::read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError("cannot parse " + path.string() + ": " + e.what());
  }
  return scenario_from_json(j, path.has_parent_path() ? path.parent_path()
                                                      : std::filesystem::path("."));
}

}  // namespace mergelane
