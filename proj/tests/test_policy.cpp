#include <catch_amalgamated.hpp>

#include <vector>

#include "mergelane/network.hpp"
#include "mergelane/policy.hpp"
#include "mergelane/rng.hpp"
#include "mergelane/traffic.hpp"

using namespace mergelane;

namespace {

VehicleState vehicle(VehicleClass klass, int passengers, bool granted = false,
                     bool violator = false) {
  VehicleState v;
  v.klass = klass;
  v.passengers = static_cast<std::uint16_t>(passengers);
  v.access_granted = granted;
  v.occupancy_violator = violator;
  return v;
}

PolicySpec policy(const std::string& name) { return PolicySpec::parse(name); }

}  // namespace

TEST_CASE("permits implements the access families") {
  ControllerState state;

  SECTION("DBL admits buses only") {
    CHECK(permits(policy("DBL"), state, vehicle(VehicleClass::kBus, 7)));
    CHECK_FALSE(permits(policy("DBL"), state, vehicle(VehicleClass::kCav, 5)));
    CHECK_FALSE(permits(policy("DBL"), state, vehicle(VehicleClass::kHdv, 5)));
  }

  SECTION("Plus_i admits any vehicle meeting the occupancy threshold") {
    CHECK(permits(policy("Plus_3"), state, vehicle(VehicleClass::kHdv, 3)));
    CHECK(permits(policy("Plus_3"), state, vehicle(VehicleClass::kCav, 4)));
    CHECK_FALSE(permits(policy("Plus_3"), state, vehicle(VehicleClass::kHdv, 2)));
    CHECK(permits(policy("Plus_3"), state, vehicle(VehicleClass::kBus, 7)));
  }

  SECTION("CAVStaticPlus_i admits buses and qualifying CAVs") {
    CHECK_FALSE(permits(policy("CAVStaticPlus_3"), state, vehicle(VehicleClass::kCav, 2)));
    CHECK(permits(policy("CAVStaticPlus_3"), state, vehicle(VehicleClass::kCav, 3)));
    CHECK(permits(policy("CAVStaticPlus_3"), state, vehicle(VehicleClass::kBus, 7)));
    for (int pax = 1; pax <= 5; ++pax) {
      CHECK_FALSE(permits(policy("CAVStaticPlus_1"), state, vehicle(VehicleClass::kHdv, pax)));
    }
  }

  SECTION("CAVDynamic follows the controller threshold") {
    state.threshold = 1;
    CHECK(permits(policy("CAVDynamic_24"), state, vehicle(VehicleClass::kCav, 1)));
    state.threshold = 4;
    CHECK_FALSE(permits(policy("CAVDynamic_24"), state, vehicle(VehicleClass::kCav, 3)));
    CHECK(permits(policy("CAVDynamic_24"), state, vehicle(VehicleClass::kCav, 4)));
    for (int pax = 1; pax <= 5; ++pax) {
      state.threshold = 1;
      CHECK_FALSE(permits(policy("CAVDynamic_24"), state, vehicle(VehicleClass::kHdv, pax)));
    }
  }

  SECTION("Access_f reads the per-vehicle coin, buses always pass") {
    CHECK(permits(policy("Access_0.2"), state, vehicle(VehicleClass::kHdv, 1, true)));
    CHECK_FALSE(permits(policy("Access_0.2"), state, vehicle(VehicleClass::kHdv, 1, false)));
    CHECK(permits(policy("Access_0.2"), state, vehicle(VehicleClass::kBus, 7, false)));
  }

  SECTION("occupancy violators ignore the Plus_i rule") {
    CHECK(permits(policy("Plus_3"), state, vehicle(VehicleClass::kHdv, 1, false, true)));
    CHECK_FALSE(permits(policy("CAVStaticPlus_3"), state,
                        vehicle(VehicleClass::kHdv, 1, false, true)));
  }
}

TEST_CASE("permits is monotone in passenger count") {
  ControllerState state;
  rng::SplitMix64 rnd(11);
  std::vector<PolicySpec> policies;
  policies.push_back(policy("DBL"));
  for (int i = 1; i <= 5; ++i) policies.push_back(policy("Plus_" + std::to_string(i)));
  for (int i = 1; i <= 5; ++i) {
    policies.push_back(policy("CAVStaticPlus_" + std::to_string(i)));
  }
  policies.push_back(policy("CAVDynamic_24"));
  for (int trial = 0; trial < 2000; ++trial) {
    const auto klass = static_cast<VehicleClass>(rnd.next() % 3);
    const int pax = 1 + static_cast<int>(rnd.next() % 5);
    state.threshold = 1 + static_cast<int>(rnd.next() % 5);
    for (const PolicySpec& p : policies) {
      VehicleState lo = vehicle(klass, pax);
      VehicleState hi = vehicle(klass, pax + 1);
      if (permits(p, state, lo)) CHECK(permits(p, state, hi));
    }
  }
}

TEST_CASE("a frozen dynamic threshold is CAVStaticPlus of the same level") {
  ControllerState state;
  rng::SplitMix64 rnd(5);
  for (int i = 1; i <= 5; ++i) {
    state.threshold = i;
    const PolicySpec dynamic = policy("CAVDynamic_24");
    const PolicySpec frozen = policy("CAVStaticPlus_" + std::to_string(i));
    for (int trial = 0; trial < 1000; ++trial) {
      VehicleState v = vehicle(static_cast<VehicleClass>(rnd.next() % 3),
                               1 + static_cast<int>(rnd.next() % 5));
      CHECK(permits(dynamic, state, v) == permits(frozen, ControllerState{}, v));
    }
  }
}

TEST_CASE("record_speed_sample accumulates the interval mean") {
  ControllerState state;
  record_speed_sample(state, 20.0);
  CHECK(state.speed_samples == 1);
  CHECK(state.speed_sum == 20.0);
  record_speed_sample(state, 24.0);
  CHECK(state.speed_sum / static_cast<double>(state.speed_samples) == 22.0);
}

TEST_CASE("update_threshold follows the feedback rule with clamps") {
  PolicySpec p = policy("CAVDynamic_22");

  SECTION("slow lane raises the threshold") {
    ControllerState s;
    s.threshold = 2;
    record_speed_sample(s, 20.0);
    CHECK(update_threshold(s, p, 60.0));
    CHECK(s.threshold == 3);
  }
  SECTION("fast lane lowers the threshold") {
    ControllerState s;
    s.threshold = 2;
    record_speed_sample(s, 24.0);
    CHECK(update_threshold(s, p, 60.0));
    CHECK(s.threshold == 1);
  }
  SECTION("clamped at the top of the studied range") {
    ControllerState s;
    s.threshold = 5;
    record_speed_sample(s, 10.0);
    CHECK(update_threshold(s, p, 60.0));
    CHECK(s.threshold == 5);
  }
  SECTION("clamped at one") {
    ControllerState s;
    s.threshold = 1;
    record_speed_sample(s, 24.5);
    CHECK(update_threshold(s, p, 60.0));
    CHECK(s.threshold == 1);
  }
  SECTION("an exact tie holds the threshold") {
    ControllerState s;
    s.threshold = 3;
    record_speed_sample(s, 22.0);
    CHECK(update_threshold(s, p, 60.0));
    CHECK(s.threshold == 3);
  }
  SECTION("nothing fires before the control interval elapses") {
    ControllerState s;
    s.threshold = 2;
    record_speed_sample(s, 10.0);
    CHECK_FALSE(update_threshold(s, p, 59.0));
    CHECK(s.threshold == 2);
    CHECK(s.speed_samples == 1);
  }
  SECTION("the accumulator resets each interval") {
    ControllerState s;
    record_speed_sample(s, 10.0);
    ControllerLogRow row;
    CHECK(update_threshold(s, p, 60.0, &row));
    CHECK(row.interval_mean_speed == 10.0);
    CHECK(s.speed_samples == 0);
    CHECK(s.last_update_s == 60.0);
  }
}

TEST_CASE("a scripted speed sequence yields one exact threshold trajectory") {
  PolicySpec p = policy("CAVDynamic_22");
  ControllerState s;
  s.threshold = 1;
  const double speeds[10] = {20, 24, 20, 20, 20, 20, 20, 24, 24, 24};
  const int expected[10] = {2, 1, 2, 3, 4, 5, 5, 4, 3, 2};
  for (int k = 0; k < 10; ++k) {
    record_speed_sample(s, speeds[k]);
    const int before = s.threshold;
    REQUIRE(update_threshold(s, p, 60.0 * (k + 1)));
    CHECK(s.threshold == expected[k]);
    CHECK(std::abs(s.threshold - before) <= 1);  // one unit per interval
    CHECK(s.threshold >= 1);
    CHECK(s.threshold <= 5);
  }
}

TEST_CASE("measure_restricted_lane_speed averages the restricted span") {
  const RoadNetwork net = build_paper_network();
  std::vector<VehicleState> fleet(4);
  // two vehicles inside the restricted lane
  fleet[0] = vehicle(VehicleClass::kCav, 2);
  fleet[0].on_road = true;
  fleet[0].segment = 1;
  fleet[0].lane = 0;
  fleet[0].position_m = 600;
  fleet[0].speed_mps = 20;
  fleet[1] = fleet[0];
  fleet[1].position_m = 700;
  fleet[1].speed_mps = 24;
  // same lane index but upstream of the restricted segment
  fleet[2] = fleet[0];
  fleet[2].segment = 0;
  fleet[2].position_m = 100;
  fleet[2].speed_mps = 5;
  // restricted segment, general-purpose lane
  fleet[3] = fleet[0];
  fleet[3].lane = 1;
  fleet[3].speed_mps = 1;
  CHECK(measure_restricted_lane_speed(fleet, net) == 22.0);

  for (auto& v : fleet) v.on_road = false;
  CHECK(measure_restricted_lane_speed(fleet, net) == 25.0);

  fleet[0].on_road = true;
  fleet[0].speed_mps = 0.0;
  CHECK(measure_restricted_lane_speed(fleet, net) == 0.0);

  const RoadNetwork plain = build_lane_drop_network(
      {LaneDropSpec{1000, 2, std::nullopt, std::nullopt}}, 25.0);
  CHECK_THROWS_AS(measure_restricted_lane_speed(fleet, plain), NoRestrictedLane);
}

TEST_CASE("policy names parse and print in the published notation") {
  for (const char* name : {"DBL", "Plus_1", "Plus_5", "CAVStaticPlus_3", "CAVDynamic_24",
                           "CAVDynamic_22.5", "Access_0.2"}) {
    CHECK(PolicySpec::parse(name).name() == name);
  }
  CHECK_THROWS_AS(PolicySpec::parse("HOV"), ParseError);
  CHECK_THROWS_AS(PolicySpec::parse("Plus_"), ParseError);
  CHECK_THROWS_AS(PolicySpec::parse("CAVDynamic_24x"), ParseError);

  CHECK_THROWS_AS(PolicySpec::parse("Plus_7").validate(25.0), ValidationError);
  CHECK_THROWS_AS(PolicySpec::parse("CAVDynamic_26").validate(25.0), ValidationError);
  CHECK_THROWS_AS(PolicySpec::parse("Access_1.5").validate(25.0), ValidationError);
  CHECK_NOTHROW(PolicySpec::parse("CAVDynamic_25").validate(25.0));
}
