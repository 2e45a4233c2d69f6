#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mergelane/errors.hpp"

namespace mergelane {

// Which outer lanes end at a lane-drop boundary.
enum class DropSide : std::uint8_t { kLeft, kRight };

inline const char* to_string(DropSide s) {
  return s == DropSide::kLeft ? "left" : "right";
}

// Lane indices are per segment, leftmost = 0.
struct SegmentDef {
  double start_m = 0.0;
  double end_m = 0.0;
  int lane_count = 1;
  std::optional<int> restricted_lane;

  double length_m() const { return end_m - start_m; }
  bool is_restricted(int lane) const {
    return restricted_lane.has_value() && *restricted_lane == lane;
  }
};

// A position where one or more lanes end, including the network exit when
// the last segment still has to shed a lane. Vehicles in [dropped_first,
// dropped_first + dropped_count) of the upstream segment must be in a
// surviving lane before position_m.
struct LaneDrop {
  double position_m = 0.0;
  int upstream_segment = 0;
  DropSide side = DropSide::kRight;
  int dropped_first = 0;   // first dropped lane index in the upstream segment
  int dropped_count = 0;
  int merge_target = 0;    // surviving upstream lane adjacent to the dropped block
  bool at_exit = false;
};

struct LaneDropSpec {
  double length_m = 0.0;
  int lane_count = 1;
  std::optional<int> restricted_lane;
  std::optional<DropSide> drop_side;  // side shed at this segment's end, if lanes drop there
};

struct RoadNetwork {
  double total_length_m = 0.0;
  double speed_limit_mps = 0.0;
  std::vector<SegmentDef> segments;
  std::vector<LaneDrop> drops;  // ascending by position
  double merge_position_m = 0.0;

  // Local lane index in segment_index+1 continuing (segment_index, lane),
  // or nullopt when the lane is dropped at that boundary.
  std::optional<int> continuation(int segment_index, int lane) const {
    const LaneDrop* drop = drop_after(segment_index);
    if (drop == nullptr) return lane;  // equal lane counts, identity
    if (drop->at_exit) return lane;    // handled by exit_survives
    if (lane >= drop->dropped_first && lane < drop->dropped_first + drop->dropped_count) {
      return std::nullopt;
    }
    return drop->side == DropSide::kLeft ? lane - drop->dropped_count : lane;
  }

  // Lane in segment_index-1 feeding (segment_index, lane). Always exists
  // because lane counts never increase downstream.
  int upstream_lane(int segment_index, int lane) const {
    const LaneDrop* drop = drop_after(segment_index - 1);
    if (drop == nullptr || drop->at_exit) return lane;
    return drop->side == DropSide::kLeft ? lane + drop->dropped_count : lane;
  }

  bool exit_survives(int lane) const {
    const LaneDrop* drop = drop_after(static_cast<int>(segments.size()) - 1);
    if (drop == nullptr) return true;
    return lane < drop->dropped_first || lane >= drop->dropped_first + drop->dropped_count;
  }

  const LaneDrop* drop_after(int segment_index) const {
    for (const LaneDrop& d : drops) {
      if (d.upstream_segment == segment_index) return &d;
    }
    return nullptr;
  }

  bool has_restricted_segment() const {
    return std::any_of(segments.begin(), segments.end(),
                       [](const SegmentDef& s) { return s.restricted_lane.has_value(); });
  }

  const SegmentDef* restricted_segment() const {
    for (const SegmentDef& s : segments) {
      if (s.restricted_lane.has_value()) return &s;
    }
    return nullptr;
  }
};

inline int segment_index_at(const RoadNetwork& net, double position_m) {
  if (position_m < 0.0 || position_m >= net.total_length_m) {
    throw OutOfRange("position " + std::to_string(position_m) +
                     " outside [0, " + std::to_string(net.total_length_m) + ")");
  }
  // Boundary positions belong to the downstream segment starting there.
  auto it = std::upper_bound(net.segments.begin(), net.segments.end(), position_m,
                             [](double p, const SegmentDef& s) { return p < s.end_m; });
  return static_cast<int>(it - net.segments.begin());
}

inline const SegmentDef& segment_at(const RoadNetwork& net, double position_m) {
  return net.segments[static_cast<std::size_t>(segment_index_at(net, position_m))];
}

inline RoadNetwork build_lane_drop_network(std::span<const LaneDropSpec> spec,
                                           double speed_limit_mps) {
  if (spec.empty()) throw InvalidGeometry("segment list is empty");
  if (speed_limit_mps <= 0.0) throw InvalidGeometry("speed limit must be positive");

  RoadNetwork net;
  net.speed_limit_mps = speed_limit_mps;

  double pos = 0.0;
  int restricted_segments = 0;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const LaneDropSpec& s = spec[i];
    if (s.length_m <= 0.0) {
      throw InvalidGeometry("segment " + std::to_string(i) + " has non-positive length");
    }
    if (s.lane_count < 1) {
      throw InvalidGeometry("segment " + std::to_string(i) + " has no lanes");
    }
    if (i > 0 && s.lane_count > spec[i - 1].lane_count) {
      throw InvalidGeometry("lane count increases downstream at segment " + std::to_string(i));
    }
    if (s.restricted_lane.has_value()) {
      ++restricted_segments;
      if (*s.restricted_lane < 0 || *s.restricted_lane >= s.lane_count) {
        throw InvalidGeometry("restricted lane index out of range in segment " +
                              std::to_string(i));
      }
    }
    SegmentDef seg;
    seg.start_m = pos;
    seg.end_m = pos + s.length_m;
    seg.lane_count = s.lane_count;
    seg.restricted_lane = s.restricted_lane;
    net.segments.push_back(seg);
    pos = seg.end_m;
  }
  net.total_length_m = pos;
  if (restricted_segments > 1) {
    throw InvalidGeometry("at most one segment may be restricted");
  }

  auto resolve_side = [](const LaneDropSpec& upstream, const std::string& where) {
    if (upstream.drop_side.has_value()) return *upstream.drop_side;
    if (upstream.restricted_lane.has_value()) {
      if (*upstream.restricted_lane == 0) return DropSide::kLeft;
      if (*upstream.restricted_lane == upstream.lane_count - 1) return DropSide::kRight;
      throw InvalidGeometry("restricted lane must be outermost to end at " + where);
    }
    return DropSide::kRight;
  };

  // Internal boundaries where the lane count shrinks.
  for (std::size_t i = 0; i + 1 < spec.size(); ++i) {
    const int dropped = spec[i].lane_count - spec[i + 1].lane_count;
    if (dropped == 0) continue;
    LaneDrop d;
    d.position_m = net.segments[i].end_m;
    d.upstream_segment = static_cast<int>(i);
    d.side = resolve_side(spec[i], "an internal boundary");
    d.dropped_count = dropped;
    d.dropped_first = d.side == DropSide::kLeft ? 0 : spec[i].lane_count - dropped;
    d.merge_target = d.side == DropSide::kLeft ? dropped : spec[i].lane_count - dropped - 1;
    net.drops.push_back(d);
  }

  // A restricted segment must end where a lane is dropped; when it runs to
  // the end of the network, the restricted lane merges away at the exit.
  const LaneDropSpec& last = spec.back();
  if (last.restricted_lane.has_value()) {
    if (last.lane_count < 2) {
      throw InvalidGeometry("restricted segment needs a surviving lane at the exit merge");
    }
    LaneDrop d;
    d.position_m = net.total_length_m;
    d.upstream_segment = static_cast<int>(spec.size()) - 1;
    d.side = resolve_side(last, "the exit");
    d.dropped_count = 1;
    d.dropped_first = d.side == DropSide::kLeft ? 0 : last.lane_count - 1;
    d.merge_target = d.side == DropSide::kLeft ? 1 : last.lane_count - 2;
    d.at_exit = true;
    net.drops.push_back(d);
  }
  for (std::size_t i = 0; i + 1 < spec.size(); ++i) {
    if (!spec[i].restricted_lane.has_value()) continue;
    if (spec[i].lane_count == spec[i + 1].lane_count) {
      throw InvalidGeometry("restricted segment " + std::to_string(i) +
                            " must end at a lane drop");
    }
    const LaneDrop* d = net.drop_after(static_cast<int>(i));
    const int r = *spec[i].restricted_lane;
    if (r < d->dropped_first || r >= d->dropped_first + d->dropped_count) {
      throw InvalidGeometry("restricted lane does not end at its segment's lane drop");
    }
  }

  net.merge_position_m = net.drops.empty() ? net.total_length_m : net.drops.back().position_m;
  return net;
}

inline RoadNetwork build_lane_drop_network(std::initializer_list<LaneDropSpec> spec,
                                           double speed_limit_mps) {
  return build_lane_drop_network(std::span<const LaneDropSpec>(spec.begin(), spec.size()),
                                 speed_limit_mps);
}

// The two-lane, 1 km network: general-purpose everywhere for the first
// 500 m, left lane restricted for the final 500 m, merge to one lane at
// the exit. Speed limit 25 m/s throughout.
inline RoadNetwork build_paper_network() {
  return build_lane_drop_network(
      {LaneDropSpec{500.0, 2, std::nullopt, std::nullopt},
       LaneDropSpec{500.0, 2, 0, std::nullopt}},
      25.0);
}

}  // namespace mergelane
