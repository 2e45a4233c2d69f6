#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mergelane/errors.hpp"
#include "mergelane/vehicle.hpp"

namespace mergelane {

// Delay ledger for one completed vehicle. Absent timestamps are NaN.
struct VehicleRecord {
  std::uint32_t id = 0;
  VehicleClass klass = VehicleClass::kHdv;
  std::uint16_t passengers = 1;
  double depart_wanted_s = 0.0;
  double depart_actual_s = std::numeric_limits<double>::quiet_NaN();
  double exit_s = std::numeric_limits<double>::quiet_NaN();
  double free_flow_s = 0.0;  // D_t

  bool inserted() const { return !std::isnan(depart_actual_s); }
  bool complete() const { return inserted() && !std::isnan(exit_s); }
};

inline double time_loss(const VehicleRecord& r) {
  if (!r.complete()) {
    throw IncompleteRecord("vehicle " + std::to_string(r.id) + " has not exited");
  }
  return (r.exit_s - r.depart_actual_s) - r.free_flow_s;
}

inline double depart_delay(const VehicleRecord& r) {
  if (!r.inserted()) {
    throw IncompleteRecord("vehicle " + std::to_string(r.id) + " never entered the road");
  }
  return r.depart_actual_s - r.depart_wanted_s;
}

inline double vehicle_delay(const VehicleRecord& r) {
  return time_loss(r) + depart_delay(r);
}

// Passenger-weighted mean vehicle delay.
inline double apd(std::span<const VehicleRecord> records) {
  if (records.empty()) throw EmptyInput("apd over zero records");
  double weighted = 0.0;
  double passengers = 0.0;
  for (const VehicleRecord& r : records) {
    weighted += vehicle_delay(r) * static_cast<double>(r.passengers);
    passengers += static_cast<double>(r.passengers);
  }
  return weighted / passengers;
}

// Group key for the incentive table: HDVs pool over passenger counts,
// CAVs and buses report one row per passenger count.
struct TimeLossGroup {
  VehicleClass klass = VehicleClass::kHdv;
  std::uint16_t passengers = 0;  // 0 = pooled

  bool operator<(const TimeLossGroup& o) const {
    if (klass != o.klass) return klass < o.klass;
    return passengers < o.passengers;
  }
};

struct GroupStats {
  std::uint64_t count = 0;
  double mean_time_loss_s = 0.0;
  double median_time_loss_s = 0.0;
};

inline std::map<TimeLossGroup, GroupStats> group_time_loss(
    std::span<const VehicleRecord> records) {
  if (records.empty()) throw EmptyInput("group_time_loss over zero records");
  std::map<TimeLossGroup, std::vector<double>> samples;
  for (const VehicleRecord& r : records) {
    TimeLossGroup key{r.klass,
                      r.klass == VehicleClass::kHdv ? std::uint16_t{0} : r.passengers};
    samples[key].push_back(time_loss(r));
  }
  std::map<TimeLossGroup, GroupStats> out;
  for (auto& [key, values] : samples) {
    GroupStats st;
    st.count = values.size();
    double sum = 0.0;
    for (double v : values) sum += v;
    st.mean_time_loss_s = sum / static_cast<double>(values.size());
    std::nth_element(values.begin(), values.begin() + values.size() / 2, values.end());
    st.median_time_loss_s = values[values.size() / 2];
    out[key] = st;
  }
  return out;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // empirical (n-1) standard deviation
  std::size_t n = 0;
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd ms;
  ms.n = xs.size();
  if (xs.empty()) return ms;
  double sum = 0.0;
  for (double x : xs) sum += x;
  ms.mean = sum / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double sq = 0.0;
    for (double x : xs) sq += (x - ms.mean) * (x - ms.mean);
    ms.std = std::sqrt(sq / static_cast<double>(xs.size() - 1));
  }
  return ms;
}

}  // namespace mergelane
