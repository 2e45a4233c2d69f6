#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

#include "mergelane/metrics.hpp"
#include "mergelane/network.hpp"
#include "mergelane/policy.hpp"
#include "mergelane/rng.hpp"
#include "mergelane/vehicle.hpp"

namespace mergelane {

// Dynamics parameters. HDVs and CAVs share one parameter set: CAVs drive
// as well as, but not better than, a competent human driver and differ
// only in policy compliance. Buses differ only in length.
struct ModelParams {
  DriverParams car{};
  DriverParams bus{2.6, 4.5, 1.0, 2.5, 0.5, 12.0};
  double lookahead_m = 200.0;      // mandatory lane-change anticipation
  double hysteresis_mps = 2.0;     // discretionary speed-advantage threshold
  double merge_zone_m = 200.0;     // zipper arbitration window before a drop
  double speed_window_m = 200.0;   // local mean-speed window for lane choice

  const DriverParams& of(VehicleClass c) const {
    return c == VehicleClass::kBus ? bus : car;
  }

  void validate() const {
    car.validate();
    bus.validate();
    if (lookahead_m <= 0 || hysteresis_mps < 0 || merge_zone_m <= 0 || speed_window_m <= 0) {
      throw ValidationError("lane-change parameters must be positive");
    }
  }
};

struct SimContext {
  const RoadNetwork* network = nullptr;
  PolicySpec policy{};
  ModelParams params{};
  double dt_s = 1.0;

  double speed_limit() const { return network->speed_limit_mps; }
};

// Krauss-style safe speed toward a leader driving leader_speed at gap
// (nose to tail). follower_nominal is the follower's nominal speed, the
// network speed limit. Floored at zero; callers handle the no-leader case.
inline double safe_speed(double gap_m, double leader_speed_mps, const DriverParams& p,
                         double follower_nominal_mps) {
  const double tau = p.reaction_time_s;
  const double denom = tau + (leader_speed_mps + follower_nominal_mps) / (2.0 * p.max_decel_mps2);
  const double v = leader_speed_mps + (gap_m - leader_speed_mps * tau) / denom;
  return std::max(0.0, v);
}

struct TrajectoryRow {
  std::uint64_t tick = 0;
  std::uint32_t vehicle_id = 0;
  std::int32_t lane = 0;
  double position_m = 0.0;
  double speed_mps = 0.0;
};

struct InvariantStats {
  std::uint64_t gap_violations = 0;
  std::uint64_t speed_violations = 0;
  std::uint64_t conservation_violations = 0;
  std::uint64_t restricted_entries = 0;
  std::uint64_t illegal_restricted_entries = 0;

  bool clean() const {
    return gap_violations == 0 && speed_violations == 0 && conservation_violations == 0 &&
           illegal_restricted_entries == 0;
  }
};

// Time-mean speed per road bin, for the per-segment speed profiles.
struct SpeedBins {
  double bin_m = 100.0;
  std::vector<double> speed_sum;
  std::vector<std::uint64_t> samples;

  void reset(double total_length_m, double bin) {
    bin_m = bin;
    const std::size_t n = static_cast<std::size_t>(std::ceil(total_length_m / bin));
    speed_sum.assign(n, 0.0);
    samples.assign(n, 0);
  }

  void add(double position_m, double speed_mps) {
    if (speed_sum.empty()) return;
    std::size_t i = static_cast<std::size_t>(position_m / bin_m);
    if (i >= speed_sum.size()) i = speed_sum.size() - 1;
    speed_sum[i] += speed_mps;
    samples[i] += 1;
  }

  double mean(std::size_t i) const {
    return samples[i] == 0 ? 0.0 : speed_sum[i] / static_cast<double>(samples[i]);
  }
};

// Virtual continuation of the last vehicle that left through an exit lane.
// The road past the exit is one lane per surviving lane, so discharge obeys
// car-following discipline across the boundary instead of vanishing freely.
struct GhostLeader {
  bool active = false;
  double position_m = 0.0;
  double speed_mps = 0.0;
  double length_m = 5.0;
};

struct WorldState {
  double clock_s = 0.0;
  std::uint64_t tick = 0;

  // One slot per scheduled arrival; slot index == vehicle id. Static
  // attributes are filled up front, kinematics when the vehicle enters.
  std::vector<VehicleState> fleet;
  std::vector<ArrivalEvent> arrivals;  // sorted by depart_wanted_s
  std::size_t next_arrival = 0;
  std::deque<std::uint32_t> entry_queue;

  ControllerState controller{};
  rng::Streams streams{};

  std::uint64_t generated = 0;
  std::uint64_t exited = 0;
  std::uint64_t on_road = 0;

  std::vector<GhostLeader> ghosts;  // one per lane of the last segment

  std::vector<VehicleRecord> records;
  std::vector<ControllerLogRow> controller_log;

  bool run_checks = false;
  InvariantStats checks{};
  SpeedBins bins{};
  std::vector<TrajectoryRow>* trajectory = nullptr;
};

inline WorldState init_world(const RoadNetwork& net, std::vector<ArrivalEvent> arrivals,
                             const rng::Streams& streams, int initial_threshold = 1,
                             double start_clock_s = 0.0) {
  WorldState w;
  w.clock_s = start_clock_s;
  w.arrivals = std::move(arrivals);
  w.streams = streams;
  w.controller.threshold = initial_threshold;
  w.controller.last_update_s = start_clock_s;
  w.fleet.resize(w.arrivals.size());
  for (std::size_t i = 0; i < w.arrivals.size(); ++i) {
    const ArrivalEvent& ev = w.arrivals[i];
    VehicleState& v = w.fleet[i];
    v.id = static_cast<std::uint32_t>(i);
    v.klass = ev.klass;
    v.passengers = ev.passengers;
    v.depart_wanted_s = ev.depart_wanted_s;
    v.access_granted = ev.access_granted;
    v.occupancy_violator = ev.occupancy_violator;
  }
  w.bins.reset(net.total_length_m, 100.0);
  w.ghosts.resize(static_cast<std::size_t>(net.segments.back().lane_count));
  return w;
}

namespace detail {

// Orders vehicle ids by (position, id); ids break exact position ties.
struct PosIdLess {
  const std::vector<VehicleState>* fleet;
  bool operator()(std::uint32_t a, std::uint32_t b) const {
    if ((*fleet)[a].position_m != (*fleet)[b].position_m) {
      return (*fleet)[a].position_m < (*fleet)[b].position_m;
    }
    return a < b;
  }
};

struct PosBefore {
  const std::vector<VehicleState>* fleet;
  bool operator()(std::uint32_t a, double pos) const { return (*fleet)[a].position_m < pos; }
};

}  // namespace detail

// Position-sorted vehicle ids per (segment, lane). Maintained across the
// tick phases; ascending position within each bucket.
class LaneIndex {
 public:
  void attach(const RoadNetwork& net) {
    net_ = &net;
    offsets_.assign(net.segments.size() + 1, 0);
    for (std::size_t s = 0; s < net.segments.size(); ++s) {
      offsets_[s + 1] = offsets_[s] + net.segments[s].lane_count;
    }
    buckets_.assign(static_cast<std::size_t>(offsets_.back()), {});
  }

  void rebuild(const std::vector<VehicleState>& fleet) {
    for (auto& b : buckets_) b.clear();
    for (const VehicleState& v : fleet) {
      if (v.on_road) insert(fleet, v.id);
    }
  }

  const std::vector<std::uint32_t>& bucket(int seg, int lane) const {
    return buckets_[slot(seg, lane)];
  }

  void insert(const std::vector<VehicleState>& fleet, std::uint32_t id) {
    const VehicleState& v = fleet[id];
    auto& b = buckets_[slot(v.segment, v.lane)];
    b.insert(std::upper_bound(b.begin(), b.end(), id, detail::PosIdLess{&fleet}), id);
  }

  void erase(const std::vector<VehicleState>& fleet, std::uint32_t id) {
    const VehicleState& v = fleet[id];
    auto& b = buckets_[slot(v.segment, v.lane)];
    auto it = std::find(b.begin(), b.end(), id);
    assert(it != b.end());
    b.erase(it);
  }

  void move(std::vector<VehicleState>& fleet, std::uint32_t id, int seg, int lane) {
    erase(fleet, id);
    fleet[id].segment = seg;
    fleet[id].lane = lane;
    insert(fleet, id);
  }

  // All on-road ids, descending position (id breaks exact ties).
  void snapshot_downstream_first(const std::vector<VehicleState>& fleet,
                                 std::vector<std::uint32_t>& out) const {
    out.clear();
    for (const auto& b : buckets_) out.insert(out.end(), b.begin(), b.end());
    std::sort(out.begin(), out.end(), [&fleet](std::uint32_t a, std::uint32_t b2) {
      if (fleet[a].position_m != fleet[b2].position_m) {
        return fleet[a].position_m > fleet[b2].position_m;
      }
      return a < b2;
    });
  }

  // Nearest vehicle at or ahead of position on the lane chain through
  // (seg, lane), excluding `self`; a vehicle exactly level counts as ahead.
  // Looks at most max_dist metres ahead.
  std::optional<std::uint32_t> leader_on_chain(const std::vector<VehicleState>& fleet, int seg,
                                               int lane, double position_m,
                                               std::uint32_t self = kNone,
                                               double max_dist = 1e18) const {
    const double horizon = position_m + max_dist;
    int s = seg;
    int l = lane;
    double probe = position_m;
    while (true) {
      const auto& b = buckets_[slot(s, l)];
      auto it = std::lower_bound(b.begin(), b.end(), probe, detail::PosBefore{&fleet});
      while (it != b.end() && *it == self) ++it;
      if (it != b.end()) {
        return fleet[*it].position_m <= horizon ? std::optional<std::uint32_t>(*it)
                                                : std::nullopt;
      }
      if (s + 1 >= static_cast<int>(net_->segments.size())) return std::nullopt;
      const auto cont = net_->continuation(s, l);
      if (!cont.has_value()) return std::nullopt;  // lane ends; the wall handles it
      if (net_->segments[s].end_m > horizon) return std::nullopt;
      probe = net_->segments[s].end_m;
      s += 1;
      l = *cont;
    }
  }

  // Nearest vehicle at or behind position on the chain (strictly behind if
  // a vehicle sits exactly at position and is not `self`: that counts as
  // ahead for gap purposes, so it is skipped here).
  std::optional<std::uint32_t> follower_on_chain(const std::vector<VehicleState>& fleet, int seg,
                                                 int lane, double position_m,
                                                 std::uint32_t self = kNone) const {
    int s = seg;
    int l = lane;
    while (true) {
      const auto& b = buckets_[slot(s, l)];
      auto it = std::lower_bound(b.begin(), b.end(), position_m, detail::PosBefore{&fleet});
      while (it != b.begin() && (*(it - 1) == self)) --it;
      if (it != b.begin()) return *(it - 1);
      if (s == 0) return std::nullopt;
      l = net_->upstream_lane(s, l);
      s -= 1;
    }
  }

  // Mean speed of vehicles strictly ahead within the window on the chain;
  // free-flow (speed limit) when the window is empty.
  double chain_mean_speed(const std::vector<VehicleState>& fleet, int seg, int lane,
                          double position_m, double window_m, std::uint32_t self) const {
    const double horizon = position_m + window_m;
    double sum = 0.0;
    int count = 0;
    int s = seg;
    int l = lane;
    double probe = position_m;
    while (true) {
      const auto& b = buckets_[slot(s, l)];
      for (auto it = std::lower_bound(b.begin(), b.end(), probe, detail::PosBefore{&fleet});
           it != b.end(); ++it) {
        if (*it == self) continue;
        if (fleet[*it].position_m > horizon) return finish(sum, count);
        if (fleet[*it].position_m <= position_m) continue;
        sum += fleet[*it].speed_mps;
        count += 1;
      }
      if (s + 1 >= static_cast<int>(net_->segments.size())) return finish(sum, count);
      const auto cont = net_->continuation(s, l);
      if (!cont.has_value() || net_->segments[s].end_m > horizon) return finish(sum, count);
      probe = net_->segments[s].end_m;
      s += 1;
      l = *cont;
    }
  }

  static constexpr std::uint32_t kNone = 0xFFFFFFFFu;

 private:
  double finish(double sum, int count) const {
    return count == 0 ? net_->speed_limit_mps : sum / count;
  }

  std::size_t slot(int seg, int lane) const {
    return static_cast<std::size_t>(offsets_[seg] + lane);
  }

  const RoadNetwork* net_ = nullptr;
  std::vector<int> offsets_;
  std::vector<std::vector<std::uint32_t>> buckets_;
};

// Where the lane chain through (seg, lane) stops being drivable for this
// vehicle: a physical lane drop, the start of a restricted segment it may
// not enter, or the exit merge. escape_dir is the lateral direction of the
// adjacent surviving/permitted lane.
struct LaneEnd {
  double position_m = 0.0;
  int escape_dir = +1;  // +1 toward higher lane index (right), -1 left
};

inline std::optional<LaneEnd> lane_end_ahead(const RoadNetwork& net, int seg, int lane,
                                             bool permitted) {
  int s = seg;
  int l = lane;
  while (true) {
    const LaneDrop* drop = net.drop_after(s);
    const bool last = s + 1 >= static_cast<int>(net.segments.size());
    if (drop != nullptr && l >= drop->dropped_first &&
        l < drop->dropped_first + drop->dropped_count) {
      return LaneEnd{drop->position_m, drop->side == DropSide::kLeft ? +1 : -1};
    }
    if (last) return std::nullopt;
    const int next_lane = drop == nullptr ? l : *net.continuation(s, l);
    const SegmentDef& next = net.segments[s + 1];
    if (!permitted && next.is_restricted(next_lane)) {
      const int dir = *next.restricted_lane == 0 ? +1 : -1;
      return LaneEnd{next.start_m, dir};
    }
    s += 1;
    l = next_lane;
  }
}

// Exit lane this chain feeds into, if it survives to the exit.
inline std::optional<int> exit_lane_of_chain(const RoadNetwork& net, int seg, int lane) {
  int s = seg;
  int l = lane;
  while (s + 1 < static_cast<int>(net.segments.size())) {
    const auto cont = net.continuation(s, l);
    if (!cont.has_value()) return std::nullopt;
    s += 1;
    l = *cont;
  }
  return net.exit_survives(l) ? std::optional<int>(l) : std::nullopt;
}

// Arithmetic mean speed on the restricted lane within the restricted
// segment; the speed limit when the lane is empty there.
inline double measure_restricted_lane_speed(std::span<const VehicleState> fleet,
                                            const RoadNetwork& net) {
  const SegmentDef* seg = net.restricted_segment();
  if (seg == nullptr) throw NoRestrictedLane("network has no restricted lane");
  double sum = 0.0;
  int count = 0;
  for (const VehicleState& v : fleet) {
    if (!v.on_road) continue;
    if (v.position_m < seg->start_m || v.position_m >= seg->end_m) continue;
    if (!seg->is_restricted(v.lane)) continue;
    sum += v.speed_mps;
    count += 1;
  }
  return count == 0 ? net.speed_limit_mps : sum / count;
}

namespace detail {

inline double length_of(const std::vector<VehicleState>& fleet, std::uint32_t id,
                        const ModelParams& params) {
  return params.of(fleet[id].klass).vehicle_length_m;
}

inline bool restricted_at(const RoadNetwork& net, int seg, int lane) {
  return net.segments[seg].is_restricted(lane);
}

// Bucket-backed equivalent of measure_restricted_lane_speed; the bucket of
// the restricted (segment, lane) holds exactly the vehicles inside the
// restricted span.
inline double restricted_lane_speed(const WorldState& world, const LaneIndex& index,
                                    const RoadNetwork& net) {
  for (int s = 0; s < static_cast<int>(net.segments.size()); ++s) {
    if (!net.segments[s].restricted_lane.has_value()) continue;
    const auto& b = index.bucket(s, *net.segments[s].restricted_lane);
    if (b.empty()) return net.speed_limit_mps;
    double sum = 0.0;
    for (std::uint32_t id : b) sum += world.fleet[id].speed_mps;
    return sum / static_cast<double>(b.size());
  }
  throw NoRestrictedLane("network has no restricted lane");
}

inline void note_restricted_entry(WorldState& world, const SimContext& ctx,
                                  const VehicleState& v, bool permitted) {
  world.checks.restricted_entries += 1;
  if (!permitted) world.checks.illegal_restricted_entries += 1;
}

// Reassigns a vehicle's lane (and possibly segment), tracking entries into
// the restricted lane.
inline void assign_lane(WorldState& world, const SimContext& ctx, LaneIndex& index,
                        std::uint32_t id, int seg, int lane, bool permitted) {
  const bool was = restricted_at(*ctx.network, world.fleet[id].segment, world.fleet[id].lane);
  index.move(world.fleet, id, seg, lane);
  if (!was && restricted_at(*ctx.network, seg, lane)) {
    note_restricted_entry(world, ctx, world.fleet[id], permitted);
  }
}

// Front and rear clearance around `position` in the target lane chain.
struct GapPair {
  double front = 1e18;
  double rear = 1e18;
  std::uint32_t front_id = LaneIndex::kNone;
  std::uint32_t rear_id = LaneIndex::kNone;
};

inline GapPair gaps_in_lane(const WorldState& world, const SimContext& ctx,
                            const LaneIndex& index, const VehicleState& v, int seg, int lane) {
  GapPair g;
  const auto& fleet = world.fleet;
  if (auto ahead = index.leader_on_chain(fleet, seg, lane, v.position_m, v.id)) {
    g.front = fleet[*ahead].position_m - length_of(fleet, *ahead, ctx.params) - v.position_m;
    g.front_id = *ahead;
  }
  if (auto behind = index.follower_on_chain(fleet, seg, lane, v.position_m, v.id)) {
    g.rear = v.position_m - ctx.params.of(v.klass).vehicle_length_m - fleet[*behind].position_m;
    g.rear_id = *behind;
  }
  return g;
}

// A change is admitted when min_gap clears on both sides and neither the
// entering vehicle nor its new follower would be forced beyond max_decel
// on the next tick (secure gaps).
inline bool gap_admits(const WorldState& world, const SimContext& ctx, const LaneIndex& index,
                       const VehicleState& v, int seg, int lane) {
  const DriverParams& p = ctx.params.of(v.klass);
  const GapPair g = gaps_in_lane(world, ctx, index, v, seg, lane);
  if (g.front < p.min_gap_m || g.rear < p.min_gap_m) return false;
  const double limit = ctx.network->speed_limit_mps;
  if (g.front_id != LaneIndex::kNone) {
    const VehicleState& leader = world.fleet[g.front_id];
    const double v_safe = safe_speed(std::max(0.0, g.front - p.min_gap_m), leader.speed_mps, p,
                                     limit);
    if (v_safe < v.speed_mps - p.max_decel_mps2 * ctx.dt_s) return false;
  }
  if (g.rear_id != LaneIndex::kNone) {
    const VehicleState& follower = world.fleet[g.rear_id];
    const DriverParams& pf = ctx.params.of(follower.klass);
    const double v_safe = safe_speed(std::max(0.0, g.rear - pf.min_gap_m), v.speed_mps, pf,
                                     limit);
    if (v_safe < follower.speed_mps - pf.max_decel_mps2 * ctx.dt_s) return false;
  }
  return true;
}

struct LaneChangeOutcome {
  std::optional<int> target;          // committed change
  std::optional<int> blocked_target;  // urgent change refused by the gap rule
};

inline LaneChangeOutcome lane_change_decision_impl(const VehicleState& v, WorldState& world,
                                                   const SimContext& ctx,
                                                   const LaneIndex& index, bool permitted) {
  const RoadNetwork& net = *ctx.network;
  const SegmentDef& seg = net.segments[v.segment];

  auto admits = [&](int lane) {
    if (lane < 0 || lane >= seg.lane_count) return false;
    if (seg.is_restricted(lane) && !permitted) return false;
    return gap_admits(world, ctx, index, v, v.segment, lane);
  };

  // Mandatory: the current lane ends or becomes forbidden within lookahead.
  const auto end = lane_end_ahead(net, v.segment, v.lane, permitted);
  if (end.has_value() && end->position_m - v.position_m <= ctx.params.lookahead_m) {
    const int target = v.lane + end->escape_dir;
    if (admits(target)) return {target, std::nullopt};
    return {std::nullopt, target >= 0 && target < seg.lane_count
                              ? std::optional<int>(target)
                              : std::nullopt};
  }

  // Eviction: standing on the restricted lane without permission (the
  // threshold rose after entry). Leave as soon as a gap admits.
  if (seg.is_restricted(v.lane) && !permitted) {
    const int dir = v.lane == 0 ? +1 : -1;
    const int target = v.lane + dir;
    if (admits(target)) return {target, std::nullopt};
    return {std::nullopt, std::nullopt};
  }

  // Discretionary: move for a clear local speed advantage. Skipped when
  // already driving close to the limit; no adjacent lane can offer more.
  if (v.speed_mps >= net.speed_limit_mps - ctx.params.hysteresis_mps) {
    return {std::nullopt, std::nullopt};
  }
  const double own = index.chain_mean_speed(world.fleet, v.segment, v.lane, v.position_m,
                                            ctx.params.speed_window_m, v.id);
  const double own_reach = end.has_value() ? end->position_m : net.total_length_m;
  std::optional<int> best;
  double best_gain = ctx.params.hysteresis_mps;
  for (int dir : {-1, +1}) {
    const int target = v.lane + dir;
    if (target < 0 || target >= seg.lane_count) continue;
    if (seg.is_restricted(target) && !permitted) continue;
    const auto target_end = lane_end_ahead(net, v.segment, target, permitted);
    const double target_reach =
        target_end.has_value() ? target_end->position_m : net.total_length_m;
    if (target_reach < own_reach) continue;  // never trade into a shorter lane
    if (target_end.has_value() &&
        target_end->position_m - v.position_m <= ctx.params.lookahead_m) {
      continue;  // no point moving into a lane about to end
    }
    const double theirs = index.chain_mean_speed(world.fleet, v.segment, target, v.position_m,
                                                 ctx.params.speed_window_m, v.id);
    const double gain = theirs - own;
    if (gain > best_gain && admits(target)) {
      best = target;
      best_gain = gain;
    }
  }
  return {best, std::nullopt};
}

inline bool try_insert_impl(WorldState& world, const SimContext& ctx, LaneIndex& index,
                            std::uint32_t arrival_index) {
  const RoadNetwork& net = *ctx.network;
  VehicleState& v = world.fleet[arrival_index];
  const DriverParams& p = ctx.params.of(v.klass);
  const bool permitted = permits(ctx.policy, world.controller, v);
  const SegmentDef& entry = net.segments.front();

  // Lane preference: how far this vehicle could ride the lane before being
  // forced out, then entry speed, then gap; rightmost breaks ties. The
  // reachability term pre-sorts traffic so nobody starts in a lane that
  // dead-ends for it while a through lane is available.
  int best_lane = -1;
  double best_reach = -1.0;
  double best_speed = -1.0;
  double best_gap = -1.0;
  for (int lane = 0; lane < entry.lane_count; ++lane) {
    if (entry.is_restricted(lane) && !permitted) continue;
    double gap = 1e18;
    double speed = net.speed_limit_mps;
    if (auto leader = index.leader_on_chain(world.fleet, 0, lane, 0.0)) {
      const VehicleState& lv = world.fleet[*leader];
      gap = lv.position_m - detail::length_of(world.fleet, *leader, ctx.params);
      if (gap < p.min_gap_m) continue;
      speed = std::min(speed,
                       safe_speed(std::max(0.0, gap - p.min_gap_m), lv.speed_mps, p,
                                  net.speed_limit_mps));
    }
    double reach = net.total_length_m;
    if (auto end = lane_end_ahead(net, 0, lane, permitted)) {
      if (end->position_m < p.min_gap_m + p.vehicle_length_m) continue;
      reach = end->position_m;
      speed = std::min(speed, safe_speed(std::max(0.0, end->position_m - p.min_gap_m), 0.0, p,
                                         net.speed_limit_mps));
    }
    const bool better =
        std::tie(reach, speed, gap, lane) > std::tie(best_reach, best_speed, best_gap,
                                                     best_lane);
    if (better) {
      best_lane = lane;
      best_reach = reach;
      best_speed = speed;
      best_gap = gap;
    }
  }
  if (best_lane < 0) return false;

  v.segment = 0;
  v.lane = best_lane;
  v.position_m = 0.0;
  v.speed_mps = best_speed;
  v.depart_actual_s = world.clock_s;
  v.on_road = true;
  index.insert(world.fleet, v.id);
  world.on_road += 1;
  if (entry.is_restricted(best_lane)) note_restricted_entry(world, ctx, v, permitted);
  return true;
}

inline void merge_arbitration_impl(WorldState& world, const SimContext& ctx, LaneIndex& index,
                                   const LaneDrop& drop,
                                   std::vector<std::uint32_t>& scratch) {
  const int lane_from =
      drop.side == DropSide::kLeft ? drop.merge_target - 1 : drop.merge_target + 1;
  const double zone_start = drop.position_m - ctx.params.merge_zone_m;

  scratch.clear();
  const auto& candidates = index.bucket(drop.upstream_segment, lane_from);
  for (auto it = candidates.rbegin(); it != candidates.rend(); ++it) {
    if (world.fleet[*it].position_m < zone_start) break;
    scratch.push_back(*it);
  }

  for (std::uint32_t id : scratch) {
    VehicleState& v = world.fleet[id];
    if (gap_admits(world, ctx, index, v, v.segment, drop.merge_target)) {
      const bool permitted = permits(ctx.policy, world.controller, v);
      assign_lane(world, ctx, index, id, v.segment, drop.merge_target, permitted);
    }
  }
}

}  // namespace detail

// Spec-shaped convenience wrappers; each builds a fresh index. The engine
// uses the *_impl variants with its live index.
inline std::optional<int> lane_change_decision(const VehicleState& vehicle, WorldState& world,
                                               const SimContext& ctx, bool permitted) {
  LaneIndex index;
  index.attach(*ctx.network);
  index.rebuild(world.fleet);
  return detail::lane_change_decision_impl(vehicle, world, ctx, index, permitted).target;
}

inline void merge_arbitration(WorldState& world, const SimContext& ctx,
                              double boundary_position_m) {
  const LaneDrop* drop = nullptr;
  for (const LaneDrop& d : ctx.network->drops) {
    if (d.position_m == boundary_position_m) drop = &d;
  }
  if (drop == nullptr) throw OutOfRange("no lane drop at the given boundary position");
  LaneIndex index;
  index.attach(*ctx.network);
  index.rebuild(world.fleet);
  std::vector<std::uint32_t> scratch;
  detail::merge_arbitration_impl(world, ctx, index, *drop, scratch);
}

inline bool try_insert(WorldState& world, const SimContext& ctx, std::uint32_t arrival_index) {
  LaneIndex index;
  index.attach(*ctx.network);
  index.rebuild(world.fleet);
  return detail::try_insert_impl(world, ctx, index, arrival_index);
}

// Scratch buffers reused across ticks.
struct StepScratch {
  LaneIndex index;
  std::vector<std::uint32_t> order;
  std::vector<std::uint32_t> merge_scratch;
  std::vector<double> yield_caps;       // per-vehicle cooperative speed caps
  std::vector<std::uint32_t> yielding;  // ids with an active cap this tick
  bool attached = false;

  void ensure(const RoadNetwork& net, const std::vector<VehicleState>& fleet) {
    if (!attached) {
      index.attach(net);
      index.rebuild(fleet);
      yield_caps.assign(fleet.size(), 1e18);
      attached = true;
    }
  }

  void reset_yields() {
    for (std::uint32_t id : yielding) yield_caps[id] = 1e18;
    yielding.clear();
  }

  void request_yield(std::uint32_t id, double cap) {
    if (yield_caps[id] > cap) {
      if (yield_caps[id] == 1e18) yielding.push_back(id);
      yield_caps[id] = cap;
    }
  }
};

// One simulation tick. Fixed phase order: controller, lane changes, speeds,
// positions, merge arbitration, exits, insertions. Vehicles are processed
// downstream first, which makes the update deterministic and lets each
// follower see its leader's already-updated speed.
inline void step(WorldState& world, const SimContext& ctx, StepScratch& scratch) {
  const RoadNetwork& net = *ctx.network;
  const double dt = ctx.dt_s;
  const double limit = net.speed_limit_mps;
  scratch.ensure(net, world.fleet);
  LaneIndex& index = scratch.index;

  // (1) controller
  if (ctx.policy.is_dynamic() && net.has_restricted_segment()) {
    ControllerLogRow row;
    if (update_threshold(world.controller, ctx.policy, world.clock_s, &row)) {
      world.controller_log.push_back(row);
    }
    record_speed_sample(world.controller, detail::restricted_lane_speed(world, index, net));
  }

  index.snapshot_downstream_first(world.fleet, scratch.order);

  // (2) lane changes; a blocked urgent merger asks its would-be follower
  // to open the gap (cooperative yielding).
  scratch.reset_yields();
  for (std::uint32_t id : scratch.order) {
    VehicleState& v = world.fleet[id];
    const bool permitted = permits(ctx.policy, world.controller, v);
    const auto outcome = detail::lane_change_decision_impl(v, world, ctx, index, permitted);
    if (outcome.target.has_value()) {
      detail::assign_lane(world, ctx, index, id, v.segment, *outcome.target, permitted);
    } else if (outcome.blocked_target.has_value()) {
      if (auto behind = index.follower_on_chain(world.fleet, v.segment,
                                                *outcome.blocked_target, v.position_m, id)) {
        const VehicleState& f = world.fleet[*behind];
        const DriverParams& pf = ctx.params.of(f.klass);
        const double gap = v.position_m - ctx.params.of(v.klass).vehicle_length_m -
                           f.position_m;
        // A follower already inside the merge slot drives past instead;
        // the merger waits for the next gap.
        if (gap >= pf.min_gap_m) {
          scratch.request_yield(*behind,
                                safe_speed(std::max(0.0, gap - pf.min_gap_m), v.speed_mps, pf,
                                           limit));
        }
      }
    }
  }

  // (3) speeds
  for (std::uint32_t id : scratch.order) {
    VehicleState& v = world.fleet[id];
    const DriverParams& p = ctx.params.of(v.klass);
    const double v_free = std::min(limit, v.speed_mps + p.max_accel_mps2 * dt);
    double v_target = v_free;
    double lead_gap = 0.0;
    double lead_speed = 0.0;
    bool have_leader = false;
    if (auto leader = index.leader_on_chain(world.fleet, v.segment, v.lane, v.position_m, id)) {
      const VehicleState& lv = world.fleet[*leader];
      lead_gap = lv.position_m - detail::length_of(world.fleet, *leader, ctx.params) -
                 v.position_m;
      lead_speed = lv.speed_mps;
      have_leader = true;
    } else if (auto exit_lane = exit_lane_of_chain(net, v.segment, v.lane)) {
      const GhostLeader& ghost = world.ghosts[static_cast<std::size_t>(*exit_lane)];
      if (ghost.active) {
        lead_gap = ghost.position_m - ghost.length_m - v.position_m;
        lead_speed = ghost.speed_mps;
        have_leader = true;
      }
    }
    if (have_leader) {
      v_target = std::min(v_target, safe_speed(std::max(0.0, lead_gap - p.min_gap_m),
                                               lead_speed, p, limit));
      // Overlap-proof cap: an on-road leader's speed is already its new value.
      v_target = std::min(v_target, std::max(0.0, lead_gap / dt + lead_speed));
    }
    const bool permitted = permits(ctx.policy, world.controller, v);
    if (auto end = lane_end_ahead(net, v.segment, v.lane, permitted)) {
      const double wall_gap = end->position_m - v.position_m;
      v_target = std::min(v_target, safe_speed(std::max(0.0, wall_gap - p.min_gap_m), 0.0, p,
                                               limit));
      v_target = std::min(v_target, std::max(0.0, (wall_gap - 1e-3) / dt));
    }
    v_target = std::min(v_target, scratch.yield_caps[id]);
    // Driving imperfection applies while interacting; an unconstrained
    // vehicle tracks its free speed exactly.
    if (v_target < v_free - 1e-12 && p.imperfection > 0.0) {
      const double u = rng::u01_at(world.streams.imperfection, id, world.tick);
      v_target = std::max(0.0, v_target - u * p.imperfection * p.max_accel_mps2 * dt);
    }
    v.speed_mps = v_target;
  }

  // (4) positions, segment transitions
  for (std::uint32_t id : scratch.order) {
    VehicleState& v = world.fleet[id];
    v.position_m += v.speed_mps * dt;
    world.bins.add(std::min(v.position_m, net.total_length_m - 1e-9), v.speed_mps);
    int seg = v.segment;
    int lane = v.lane;
    bool moved = false;
    bool entered_restricted = false;
    while (seg + 1 < static_cast<int>(net.segments.size()) &&
           v.position_m >= net.segments[seg].end_m) {
      const auto cont = net.continuation(seg, lane);
      assert(cont.has_value());  // walls keep dropped lanes behind the boundary
      const bool was = detail::restricted_at(net, seg, lane);
      seg += 1;
      lane = *cont;
      moved = true;
      if (!was && detail::restricted_at(net, seg, lane)) entered_restricted = true;
    }
    if (moved) {
      index.erase(world.fleet, id);
      v.segment = seg;
      v.lane = lane;
      index.insert(world.fleet, id);
      if (entered_restricted) {
        const bool permitted = permits(ctx.policy, world.controller, v);
        detail::note_restricted_entry(world, ctx, v, permitted);
      }
    }
  }

  // Ghost leaders roll on past the exit until they stop binding.
  for (GhostLeader& ghost : world.ghosts) {
    if (!ghost.active) continue;
    ghost.speed_mps = std::min(limit, ghost.speed_mps + ctx.params.car.max_accel_mps2 * dt);
    ghost.position_m += ghost.speed_mps * dt;
    if (ghost.position_m - net.total_length_m > 4.0 * limit) ghost.active = false;
  }

  // (5) merge arbitration at each lane drop
  for (const LaneDrop& drop : net.drops) {
    detail::merge_arbitration_impl(world, ctx, index, drop, scratch.merge_scratch);
  }

  // (6) exits
  {
    const int last = static_cast<int>(net.segments.size()) - 1;
    for (int lane = 0; lane < net.segments[last].lane_count; ++lane) {
      while (true) {
        const auto& b = index.bucket(last, lane);
        if (b.empty() || world.fleet[b.back()].position_m < net.total_length_m) break;
        const std::uint32_t id = b.back();
        VehicleState& v = world.fleet[id];
        index.erase(world.fleet, id);
        v.on_road = false;
        world.on_road -= 1;
        world.exited += 1;
        world.ghosts[static_cast<std::size_t>(lane)] = {
            true, v.position_m, v.speed_mps,
            ctx.params.of(v.klass).vehicle_length_m};
        VehicleRecord r;
        r.id = id;
        r.klass = v.klass;
        r.passengers = v.passengers;
        r.depart_wanted_s = v.depart_wanted_s;
        r.depart_actual_s = v.depart_actual_s;
        r.exit_s = world.clock_s + dt;
        r.free_flow_s = net.total_length_m / limit;
        world.records.push_back(r);
      }
    }
  }

  // (7) insertions
  while (world.next_arrival < world.arrivals.size() &&
         world.arrivals[world.next_arrival].depart_wanted_s <= world.clock_s) {
    world.entry_queue.push_back(static_cast<std::uint32_t>(world.next_arrival));
    world.next_arrival += 1;
    world.generated += 1;
  }
  while (!world.entry_queue.empty() &&
         detail::try_insert_impl(world, ctx, index, world.entry_queue.front())) {
    world.entry_queue.pop_front();
  }

  world.clock_s += dt;
  world.tick += 1;

  if (world.trajectory != nullptr) {
    index.snapshot_downstream_first(world.fleet, scratch.order);
    for (std::uint32_t id : scratch.order) {
      const VehicleState& v = world.fleet[id];
      world.trajectory->push_back({world.tick, id, v.lane, v.position_m, v.speed_mps});
    }
  }

  if (world.run_checks) {
    for (int seg = 0; seg < static_cast<int>(net.segments.size()); ++seg) {
      for (int lane = 0; lane < net.segments[seg].lane_count; ++lane) {
        const auto& b = index.bucket(seg, lane);
        for (std::size_t i = 0; i + 1 < b.size(); ++i) {
          const VehicleState& rear = world.fleet[b[i]];
          const VehicleState& front = world.fleet[b[i + 1]];
          const double gap = front.position_m -
                             detail::length_of(world.fleet, b[i + 1], ctx.params) -
                             rear.position_m;
          if (gap < -1e-9) world.checks.gap_violations += 1;
        }
        for (std::uint32_t id : b) {
          const double s = world.fleet[id].speed_mps;
          if (s < -1e-9 || s > limit + 1e-9) world.checks.speed_violations += 1;
        }
      }
    }
    if (world.generated != world.exited + world.on_road + world.entry_queue.size()) {
      world.checks.conservation_violations += 1;
    }
  }
}

inline void step(WorldState& world, const SimContext& ctx) {
  StepScratch scratch;
  scratch.ensure(*ctx.network, world.fleet);
  step(world, ctx, scratch);
}

}  // namespace mergelane
