#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mergelane/experiment.hpp"
#include "mergelane/traffic.hpp"

using namespace mergelane;

namespace {

struct Fixture {
  RoadNetwork net = build_paper_network();
  SimContext ctx;
  WorldState world;

  explicit Fixture(const std::string& policy = "Plus_1") {
    ctx.network = &net;
    ctx.policy = PolicySpec::parse(policy);
    ctx.params = ModelParams{};
    ctx.dt_s = 1.0;
    world = init_world(net, {}, rng::Streams::derive(1, 0));
  }

  // Places a vehicle directly; fixture-only, bypasses insertion.
  VehicleState& place(VehicleClass klass, int passengers, double position, double speed,
                      int lane, bool granted = true) {
    ArrivalEvent ev;
    ev.klass = klass;
    ev.passengers = static_cast<std::uint16_t>(passengers);
    ev.access_granted = granted;
    world.arrivals.push_back(ev);
    VehicleState v;
    v.id = static_cast<std::uint32_t>(world.fleet.size());
    v.klass = klass;
    v.passengers = static_cast<std::uint16_t>(passengers);
    v.access_granted = granted;
    v.segment = segment_index_at(net, position);
    v.lane = lane;
    v.position_m = position;
    v.speed_mps = speed;
    v.on_road = true;
    world.fleet.push_back(v);
    world.next_arrival = world.fleet.size();
    world.generated += 1;
    world.on_road += 1;
    return world.fleet.back();
  }
};

ScenarioConfig small_scenario(const std::string& policy, double veh_per_hour,
                              double horizon_s) {
  ScenarioConfig c;
  c.network.segments = {LaneDropSpec{500, 2, std::nullopt, std::nullopt},
                        LaneDropSpec{500, 2, 0, std::nullopt}};
  c.network.speed_limit_mps = 25.0;
  c.demand.intervals = {{0.0, horizon_s, veh_per_hour}};
  c.demand.p_hdv = 0.89;
  c.demand.p_cav = 0.10;
  c.demand.p_bus = 0.01;
  c.policy = PolicySpec::parse(policy);
  c.master_seed = 20240601;
  c.replications = 1;
  return c;
}

}  // namespace

TEST_CASE("safe_speed evaluates the following rule") {
  DriverParams p;  // tau 1, decel 4.5

  SECTION("zero gap to a stopped leader means zero speed") {
    CHECK(safe_speed(0.0, 0.0, p, 25.0) == 0.0);
  }

  SECTION("worked example, evaluated two independent ways") {
    // gap 50, leader 20: v = 20 + (50 - 20*1) / (1 + (20+25)/9) = 25
    CHECK_THAT(safe_speed(50.0, 20.0, p, 25.0), Catch::Matchers::WithinULP(25.0, 2));
    // gap 10, leader 5, rearranged: 5 + (10-5)*2b/(2b*tau + 5 + 25) = 5 + 45/39
    const double rearranged = 5.0 + (10.0 - 5.0 * 1.0) * (2.0 * 4.5) / (2.0 * 4.5 + 5.0 + 25.0);
    CHECK_THAT(safe_speed(10.0, 5.0, p, 25.0), Catch::Matchers::WithinULP(rearranged, 4));
  }

  SECTION("never negative") {
    CHECK(safe_speed(0.0, 10.0, p, 25.0) >= 0.0);
    CHECK(safe_speed(0.5, 30.0, p, 25.0) >= 0.0);
  }
}

TEST_CASE("a lone vehicle holds the speed limit exactly") {
  Fixture f;
  f.place(VehicleClass::kHdv, 1, 100.0, 25.0, 1);
  step(f.world, f.ctx);
  CHECK(f.world.fleet[0].speed_mps == 25.0);
  CHECK(f.world.fleet[0].position_m == 125.0);
}

TEST_CASE("free flow traverses the road in the nominal time") {
  ScenarioConfig c = small_scenario("DBL", 0, 10);
  const RoadNetwork net = c.network.build();
  SimContext ctx;
  ctx.network = &net;
  ctx.policy = c.policy;
  std::vector<ArrivalEvent> one(1);
  one[0].depart_wanted_s = 0.0;
  one[0].klass = VehicleClass::kHdv;
  one[0].passengers = 1;
  WorldState world = init_world(net, std::move(one), rng::Streams::derive(1, 0));
  StepScratch scratch;
  while (world.exited == 0) {
    step(world, ctx, scratch);
    REQUIRE(world.clock_s < 120.0);
  }
  REQUIRE(world.records.size() == 1);
  const VehicleRecord& r = world.records[0];
  const double actual_travel = r.exit_s - r.depart_actual_s;
  CHECK(std::abs(actual_travel - 40.0) <= ctx.dt_s + 1e-9);
  CHECK(std::abs(time_loss(r)) <= ctx.dt_s + 1e-9);
  CHECK(depart_delay(r) == 0.0);
}

TEST_CASE("a follower never exceeds the safe speed toward its leader") {
  Fixture f;
  f.place(VehicleClass::kHdv, 1, 600.0, 0.0, 1);   // stopped leader
  f.place(VehicleClass::kHdv, 1, 560.0, 25.0, 1);  // follower closing fast
  const double gap = 600.0 - 5.0 - 560.0;
  step(f.world, f.ctx);
  CHECK(f.world.fleet[1].speed_mps <=
        safe_speed(gap, 0.0, f.ctx.params.car, 25.0) + 1e-12);
  // and it keeps braking to a stop without contact over the next ticks
  for (int i = 0; i < 30; ++i) step(f.world, f.ctx);
  CHECK(f.world.fleet[1].position_m + 5.0 <= f.world.fleet[0].position_m + 1e-9);
}

TEST_CASE("insertion into an empty road departs on time at the limit") {
  ScenarioConfig c = small_scenario("DBL", 0, 10);
  const RoadNetwork net = c.network.build();
  SimContext ctx;
  ctx.network = &net;
  ctx.policy = c.policy;
  std::vector<ArrivalEvent> one(1);
  one[0].depart_wanted_s = 0.0;
  WorldState world = init_world(net, std::move(one), rng::Streams::derive(1, 0));
  step(world, ctx);
  REQUIRE(world.on_road == 1);
  CHECK(world.fleet[0].depart_actual_s == 0.0);
  CHECK(world.fleet[0].speed_mps == 25.0);
  CHECK(world.fleet[0].position_m == 0.0);  // inserted after the movement phase
}

TEST_CASE("insertion is blocked while both entry lanes are occupied") {
  Fixture f;
  f.place(VehicleClass::kHdv, 1, 4.0, 0.0, 0);  // tails cover position 0
  f.place(VehicleClass::kHdv, 1, 4.0, 0.0, 1);
  ArrivalEvent ev;
  ev.depart_wanted_s = 0.0;
  f.world.arrivals.push_back(ev);
  VehicleState slot;
  slot.id = static_cast<std::uint32_t>(f.world.fleet.size());
  f.world.fleet.push_back(slot);
  CHECK_FALSE(try_insert(f.world, f.ctx, slot.id));
}

TEST_CASE("queued arrivals insert in first-come order") {
  ScenarioConfig c = small_scenario("DBL", 0, 10);
  const RoadNetwork net = c.network.build();
  SimContext ctx;
  ctx.network = &net;
  ctx.policy = c.policy;
  std::vector<ArrivalEvent> three(3);
  for (auto& ev : three) ev.depart_wanted_s = 0.0;
  WorldState world = init_world(net, std::move(three), rng::Streams::derive(1, 0));
  step(world, ctx);
  // Two lanes accept the first two arrivals; the third waits its turn.
  CHECK(world.on_road == 2);
  REQUIRE(world.entry_queue.size() == 1);
  CHECK(world.entry_queue.front() == 2);
  CHECK(world.fleet[0].on_road);
  CHECK(world.fleet[1].on_road);
  // First arrival takes the rightmost of the equally good lanes.
  CHECK(world.fleet[0].lane == 1);
  CHECK(world.fleet[1].lane == 0);
}

TEST_CASE("lane ending for a non-permitted vehicle forces a change") {
  Fixture f("DBL");
  VehicleState& v = f.place(VehicleClass::kHdv, 1, 450.0, 20.0, 0);
  const auto target = lane_change_decision(v, f.world, f.ctx, false);
  REQUIRE(target.has_value());
  CHECK(*target == 1);
}

TEST_CASE("a permitted bus keeps the restricted-bound lane") {
  Fixture f("DBL");
  VehicleState& v = f.place(VehicleClass::kBus, 7, 450.0, 25.0, 0);
  CHECK_FALSE(lane_change_decision(v, f.world, f.ctx, true).has_value());
}

TEST_CASE("a permitted CAV moves into a faster restricted lane when the gap admits") {
  Fixture f("CAVStaticPlus_1");
  // crawling right lane inside the restricted segment
  f.place(VehicleClass::kCav, 2, 640.0, 3.0, 1);
  f.place(VehicleClass::kCav, 2, 620.0, 3.0, 1);
  VehicleState& v = f.place(VehicleClass::kCav, 2, 600.0, 3.0, 1);
  const auto target = lane_change_decision(v, f.world, f.ctx, true);
  REQUIRE(target.has_value());
  CHECK(*target == 0);

  // without permission the same vehicle stays put
  CHECK_FALSE(lane_change_decision(v, f.world, f.ctx, false).has_value());
}

TEST_CASE("no discretionary move into a lane that is about to end") {
  Fixture f("Plus_1");
  // right lane crawls at 920 m; the restricted lane is free but ends at the
  // exit merge 80 m ahead, inside the lookahead.
  f.place(VehicleClass::kCav, 2, 950.0, 2.0, 1);
  VehicleState& v = f.place(VehicleClass::kCav, 2, 920.0, 2.0, 1);
  CHECK_FALSE(lane_change_decision(v, f.world, f.ctx, true).has_value());
}

TEST_CASE("merge arbitration accepts a clear gap this tick") {
  Fixture f("Plus_1");
  VehicleState& v = f.place(VehicleClass::kHdv, 1, 980.0, 10.0, 0);
  merge_arbitration(f.world, f.ctx, 1000.0);
  CHECK(v.lane == 1);
}

TEST_CASE("a blocked merger waits and decelerates toward the boundary") {
  Fixture f("Plus_1");
  VehicleState& v = f.place(VehicleClass::kHdv, 1, 980.0, 10.0, 0);
  f.place(VehicleClass::kHdv, 1, 980.0, 10.0, 1);  // zero lateral gap
  merge_arbitration(f.world, f.ctx, 1000.0);
  CHECK(v.lane == 0);
  for (int i = 0; i < 40 && v.lane == 0; ++i) {
    step(f.world, f.ctx);
    CHECK(v.position_m < 1000.0);
  }
  if (v.lane == 0) CHECK(v.speed_mps < 1.0);
}

TEST_CASE("zipper merging preserves position order") {
  Fixture f("Plus_1");
  VehicleState& a = f.place(VehicleClass::kHdv, 1, 950.0, 0.0, 0);
  VehicleState& s = f.place(VehicleClass::kHdv, 1, 940.0, 0.0, 1);
  VehicleState& b = f.place(VehicleClass::kHdv, 1, 930.0, 0.0, 0);
  merge_arbitration(f.world, f.ctx, 1000.0);
  CHECK(a.lane == 1);
  CHECK(b.lane == 1);
  CHECK(a.position_m > s.position_m);
  CHECK(s.position_m > b.position_m);
}

TEST_CASE("threshold rises evict no-longer-qualified vehicles via lane change") {
  Fixture f("CAVDynamic_24");
  f.world.controller.threshold = 3;
  VehicleState& v = f.place(VehicleClass::kCav, 1, 600.0, 20.0, 0);
  const bool permitted = permits(f.ctx.policy, f.world.controller, v);
  CHECK_FALSE(permitted);
  const auto target = lane_change_decision(v, f.world, f.ctx, permitted);
  REQUIRE(target.has_value());
  CHECK(*target == 1);
}

TEST_CASE("simulation invariants hold on a congested mixed run") {
  for (const char* policy : {"DBL", "CAVStaticPlus_2", "CAVDynamic_24", "Access_0.2"}) {
    ScenarioConfig c = small_scenario(policy, 2800, 900);
    c.cav_proportion = 0.3;
    RunOptions options;
    options.checks = true;
    const RunResult r = run_scenario(c, 0, options);
    INFO(policy);
    CHECK(r.checks.gap_violations == 0);
    CHECK(r.checks.speed_violations == 0);
    CHECK(r.checks.conservation_violations == 0);
    CHECK(r.checks.illegal_restricted_entries == 0);
    CHECK(r.generated == r.exited);
    CHECK(r.generated > 0);
  }
}

TEST_CASE("per-tick speeds and positions land in the trajectory log") {
  ScenarioConfig c = small_scenario("DBL", 1200, 120);
  RunOptions options;
  options.trajectory = true;
  const RunResult r = run_scenario(c, 0, options);
  REQUIRE_FALSE(r.trajectory.empty());
  for (const TrajectoryRow& row : r.trajectory) {
    CHECK(row.position_m >= 0.0);
    CHECK(row.position_m <= 1000.0 + 25.0);
    CHECK(row.speed_mps >= 0.0);
    CHECK(row.speed_mps <= 25.0 + 1e-9);
    CHECK((row.lane == 0 || row.lane == 1));
  }
  const std::string csv_text = trajectory_csv(r.trajectory);
  CHECK(csv_text.rfind("tick,vehicle_id,lane,position,speed\n", 0) == 0);
}

TEST_CASE("the engine's restricted-lane reading matches the reference query") {
  Fixture f("CAVDynamic_24");
  f.place(VehicleClass::kCav, 2, 620.0, 18.0, 0);
  f.place(VehicleClass::kCav, 2, 700.0, 22.0, 0);
  f.place(VehicleClass::kHdv, 1, 650.0, 10.0, 1);
  f.place(VehicleClass::kHdv, 1, 100.0, 25.0, 0);
  LaneIndex index;
  index.attach(f.net);
  index.rebuild(f.world.fleet);
  CHECK(detail::restricted_lane_speed(f.world, index, f.net) ==
        measure_restricted_lane_speed(f.world.fleet, f.net));
  CHECK(measure_restricted_lane_speed(f.world.fleet, f.net) == 20.0);
}

TEST_CASE("runs are reproducible tick for tick") {
  ScenarioConfig c = small_scenario("CAVDynamic_23", 2000, 600);
  const RunResult a = run_scenario(c, 0);
  const RunResult b = run_scenario(c, 0);
  CHECK(vehicle_records_csv(a.records) == vehicle_records_csv(b.records));
  CHECK(controller_log_csv(a.controller_log) == controller_log_csv(b.controller_log));
  const RunResult other = run_scenario(c, 1);
  CHECK(vehicle_records_csv(a.records) != vehicle_records_csv(other.records));
}
