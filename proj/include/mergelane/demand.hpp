#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mergelane/errors.hpp"
#include "mergelane/rng.hpp"
#include "mergelane/vehicle.hpp"

namespace mergelane {

struct DemandInterval {
  double start_s = 0.0;
  double end_s = 0.0;
  double veh_per_hour = 0.0;
};

struct DemandProfile {
  std::vector<DemandInterval> intervals;  // contiguous, non-overlapping
  double p_hdv = 0.99;
  double p_cav = 0.0;
  double p_bus = 0.01;
  std::array<double, 5> car_passenger_pmf{0.63, 0.22, 0.09, 0.04, 0.02};  // 1..5
  double bus_passengers_mean = 7.05;

  double start_s() const { return intervals.empty() ? 0.0 : intervals.front().start_s; }
  double horizon_end_s() const { return intervals.empty() ? 0.0 : intervals.back().end_s; }

  // Share of cars (non-bus arrivals) that are CAVs.
  double cav_share_of_cars() const {
    return p_bus >= 1.0 ? 0.0 : p_cav / (1.0 - p_bus);
  }

  void validate() const {
    if (intervals.empty()) throw ValidationError("demand profile has no intervals");
    for (std::size_t i = 0; i < intervals.size(); ++i) {
      const DemandInterval& iv = intervals[i];
      if (iv.end_s <= iv.start_s) {
        throw ValidationError("interval " + std::to_string(i) + " has non-positive length");
      }
      if (iv.veh_per_hour < 0.0) {
        throw ValidationError("interval " + std::to_string(i) + " has negative arrival rate");
      }
      if (i > 0 && iv.start_s != intervals[i - 1].end_s) {
        throw ValidationError("intervals must be contiguous; gap before interval " +
                              std::to_string(i));
      }
    }
    const double class_sum = p_hdv + p_cav + p_bus;
    if (p_hdv < 0 || p_cav < 0 || p_bus < 0 || std::abs(class_sum - 1.0) > 1e-9) {
      throw ValidationError("class probabilities must be in [0,1] and sum to 1 (got " +
                            std::to_string(class_sum) + ")");
    }
    double pmf_sum = 0.0;
    for (double p : car_passenger_pmf) {
      if (p < 0.0) throw ValidationError("car passenger pmf has a negative entry");
      pmf_sum += p;
    }
    if (std::abs(pmf_sum - 1.0) > 1e-9) {
      throw ValidationError("car passenger pmf must sum to 1 (got " + std::to_string(pmf_sum) +
                            ")");
    }
    if (bus_passengers_mean <= 0.0) {
      throw ValidationError("bus passengers mean must be positive");
    }
  }
};

inline DemandProfile scale_profile(DemandProfile profile, double k) {
  if (k <= 0.0) throw InvalidScale("scale factor must be positive, got " + std::to_string(k));
  for (DemandInterval& iv : profile.intervals) iv.veh_per_hour /= k;
  return profile;
}

// Overrides the CAV share of cars, keeping the bus share fixed.
inline DemandProfile with_cav_proportion(DemandProfile profile, double proportion) {
  if (proportion < 0.0 || proportion > 1.0) {
    throw ValidationError("CAV proportion must lie in [0,1]");
  }
  const double cars = 1.0 - profile.p_bus;
  profile.p_cav = proportion * cars;
  profile.p_hdv = cars - profile.p_cav;
  return profile;
}

// How vehicle classes are drawn when the CAV proportion is swept.
//  kThreshold: one uniform per arrival, thresholded by the proportion, so a
//              vehicle that is a CAV at 20% is still a CAV at 30%.
//  kResample:  independent classes per proportion value.
enum class ClassCoupling : std::uint8_t { kThreshold, kResample };

inline const char* to_string(ClassCoupling c) {
  return c == ClassCoupling::kThreshold ? "threshold" : "resample";
}

// Poisson arrivals with piecewise-constant rate. Inter-arrival gaps are
// exponential within an interval; a gap begun at one rate carries its
// residual exponential mass across the boundary, rescaled by the rate
// ratio. Classes and passenger counts come from keyed per-index draws.
inline std::vector<ArrivalEvent> sample_arrivals(const DemandProfile& profile,
                                                 const rng::Streams& streams,
                                                 ClassCoupling coupling = ClassCoupling::kThreshold) {
  profile.validate();
  std::vector<ArrivalEvent> events;
  rng::SplitMix64 gaps(streams.arrivals);

  const double horizon = profile.horizon_end_s();
  double t = profile.start_s();
  std::size_t iv = 0;
  double pending_mass = rng::exponential(gaps.u01(), 1.0);  // unit-rate exponential mass
  while (t < horizon) {
    const DemandInterval& cur = profile.intervals[iv];
    const double rate = cur.veh_per_hour / 3600.0;
    if (rate <= 0.0) {
      t = cur.end_s;
      if (++iv >= profile.intervals.size()) break;
      continue;
    }
    const double next = t + pending_mass / rate;
    if (next >= cur.end_s) {
      pending_mass -= (cur.end_s - t) * rate;
      t = cur.end_s;
      if (++iv >= profile.intervals.size()) break;
      continue;
    }
    t = next;
    ArrivalEvent ev;
    ev.depart_wanted_s = t;
    events.push_back(ev);
    pending_mass = rng::exponential(gaps.u01(), 1.0);
  }

  const double cav_share = profile.cav_share_of_cars();
  const std::uint64_t class_stream =
      coupling == ClassCoupling::kThreshold
          ? streams.vehicle_class
          : rng::combine(streams.vehicle_class,
                         static_cast<std::uint64_t>(std::llround(cav_share * 1e9)));
  const std::uint16_t bus_passengers =
      static_cast<std::uint16_t>(std::llround(profile.bus_passengers_mean));
  for (std::size_t i = 0; i < events.size(); ++i) {
    ArrivalEvent& ev = events[i];
    const double u = rng::u01_at(class_stream, i);
    if (u < profile.p_bus) {
      ev.klass = VehicleClass::kBus;
      ev.passengers = bus_passengers;
    } else {
      const double car_u = (u - profile.p_bus) / (1.0 - profile.p_bus);
      ev.klass = car_u < cav_share ? VehicleClass::kCav : VehicleClass::kHdv;
      const double up = rng::u01_at(streams.passengers, i);
      ev.passengers = static_cast<std::uint16_t>(
          1 + rng::pick_discrete(up, std::span<const double>(profile.car_passenger_pmf)));
    }
  }
  return events;
}

// Per-vehicle flags owned by the experiment layer: the access-fraction coin
// and the occupancy-violation coin. Keyed by arrival index so they are
// independent of everything else.
inline void assign_vehicle_flags(std::vector<ArrivalEvent>& events, const rng::Streams& streams,
                                 double access_fraction, double hdv_violation_rate) {
  for (std::size_t i = 0; i < events.size(); ++i) {
    ArrivalEvent& ev = events[i];
    ev.access_granted = rng::u01_at(streams.access, i) < access_fraction;
    ev.occupancy_violator = ev.klass == VehicleClass::kHdv &&
                            rng::u01_at(streams.violation, i) < hdv_violation_rate;
  }
}

}  // namespace mergelane
