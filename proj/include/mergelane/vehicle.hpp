#pragma once

#include <cstdint>

#include "mergelane/errors.hpp"

namespace mergelane {

enum class VehicleClass : std::uint8_t { kHdv = 0, kCav = 1, kBus = 2 };

inline const char* to_string(VehicleClass c) {
  switch (c) {
    case VehicleClass::kHdv: return "HDV";
    case VehicleClass::kCav: return "CAV";
    case VehicleClass::kBus: return "Bus";
  }
  return "?";
}

struct DriverParams {
  double max_accel_mps2 = 2.6;
  double max_decel_mps2 = 4.5;   // positive magnitude
  double reaction_time_s = 1.0;  // tau
  double min_gap_m = 2.5;
  double imperfection = 0.5;     // sigma in [0,1]
  double vehicle_length_m = 5.0;

  void validate() const {
    if (max_accel_mps2 <= 0 || max_decel_mps2 <= 0 || reaction_time_s <= 0 ||
        min_gap_m <= 0 || vehicle_length_m <= 0) {
      throw ValidationError("driver parameters must be positive");
    }
    if (imperfection < 0.0 || imperfection > 1.0) {
      throw ValidationError("imperfection sigma must lie in [0,1]");
    }
  }
};

struct VehicleState {
  std::uint32_t id = 0;
  VehicleClass klass = VehicleClass::kHdv;
  std::uint16_t passengers = 1;
  std::int32_t segment = 0;  // current segment index
  std::int32_t lane = 0;     // local lane index, leftmost = 0
  double position_m = 0.0;   // front bumper, distance from road start
  double speed_mps = 0.0;
  double depart_wanted_s = 0.0;
  double depart_actual_s = 0.0;
  bool on_road = false;
  bool access_granted = false;     // per-vehicle coin for fraction policies
  bool occupancy_violator = false; // HDV ignoring an occupancy rule (sensitivity knob)
};

// One scheduled arrival; times, classes and passenger counts are drawn
// before the simulation starts so they are shared across policies.
struct ArrivalEvent {
  double depart_wanted_s = 0.0;
  VehicleClass klass = VehicleClass::kHdv;
  std::uint16_t passengers = 1;
  bool access_granted = false;
  bool occupancy_violator = false;
};

}  // namespace mergelane
