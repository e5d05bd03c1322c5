#include "doctest.h"

#include <cmath>
#include <random>

#include "corridor/error.hpp"
#include "corridor/feedback.hpp"
#include "corridor/fixtures.hpp"

using namespace corridor;

namespace {

constexpr std::int64_t kT0 = 1688467693120;  // 2023-07-04 10:48:13.120Z

SyncedSignalState signal(PhaseState state, std::int64_t residual_ms, std::uint16_t intersection = 1) {
  return {intersection, 2, state, kT0, residual_ms, kT0 + residual_ms};
}

IntegratedRecord in_lane(double d, double v) {
  IntegratedRecord r;
  r.timestamp_epoch_ms = kT0;
  r.temp_id = 7;
  r.speed_mps = v;
  r.matched_intersection_id = 1;
  r.matched_lane_id = 2;
  r.signal_group_id = 2;
  r.distance_to_stop_line_m = d;
  return r;
}

// A record placed on a fixture lane, matched through the lane index, heading
// along the direction of travel.
IntegratedRecord on_fixture(const MapMessage& map, const std::string& movement, double d, double v,
                            PhaseState state, std::int64_t residual_ms, std::int64_t ts, std::uint32_t id) {
  const auto lane_id = fixtures::ingress_lane_id(map, movement);
  REQUIRE(lane_id != 0);
  IntegratedRecord r;
  r.timestamp_epoch_ms = ts;
  r.temp_id = id;
  r.position = fixtures::point_on_lane(map, lane_id, d);
  r.speed_mps = v;
  LaneIndex index;
  index.update(map);
  const auto m = index.match(r.position.latitude_deg, r.position.longitude_deg);
  REQUIRE(m.has_value());
  REQUIRE(m->lane_id == lane_id);
  r.heading_deg = index.find(map.intersection_id)->find_lane(lane_id)->direction_deg;
  r.matched_intersection_id = m->intersection_id;
  r.matched_lane_id = m->lane_id;
  r.signal_group_id = m->signal_group_id;
  r.distance_to_stop_line_m = m->distance_to_stop_line_m;
  r.event_state = state;
  r.residual_phase_ms = residual_ms;
  return r;
}

std::size_t count_type(const std::vector<FeedbackMessage>& out, FeedbackType t) {
  std::size_t n = 0;
  for (const auto& m : out) n += m.type() == t;
  return n;
}

}  // namespace

TEST_CASE("advisory examples") {
  FeedbackConfig cfg;
  const auto a = advisory_speed(in_lane(5, 2.7), signal(PhaseState::ProtectedMovementAllowed, 900), cfg);
  REQUIRE(a.has_value());
  CHECK(std::abs(a->advisory_speed_mps - 2.16) < 0.005);
  CHECK(a->current_speed_mps == 2.7);
  CHECK(a->remaining_ms == 900);

  CHECK_FALSE(advisory_speed(in_lane(5, 10), signal(PhaseState::ProtectedMovementAllowed, 900), cfg));
  CHECK_FALSE(advisory_speed(in_lane(5, 0), signal(PhaseState::ProtectedMovementAllowed, 900), cfg));

  cfg.speed_limit_mps = 15;
  const auto red = advisory_speed(in_lane(100, 12), signal(PhaseState::StopAndRemain, 10000), cfg);
  REQUIRE(red.has_value());
  CHECK(red->advisory_speed_mps == doctest::Approx(10.0));
  CHECK_FALSE(advisory_speed(in_lane(100, 0.3), signal(PhaseState::StopAndRemain, 10000), cfg));
  CHECK_FALSE(advisory_speed(in_lane(100, 12), signal(PhaseState::ProtectedClearance, 2000), cfg));
}

TEST_CASE("advisory bounds hold for random inputs") {
  FeedbackConfig cfg;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dist(0, 200), speed(0, 25);
  std::uniform_int_distribution<std::int64_t> residual(0, 120000);
  for (int i = 0; i < 20000; ++i) {
    const auto rec = in_lane(dist(rng), speed(rng));
    const auto green = advisory_speed(rec, signal(PhaseState::ProtectedMovementAllowed, residual(rng)), cfg);
    if (green) {
      REQUIRE(green->advisory_speed_mps >= 0);
      REQUIRE(green->advisory_speed_mps <= *rec.speed_mps);
    }
    const auto red = advisory_speed(rec, signal(PhaseState::StopAndRemain, residual(rng)), cfg);
    if (red) {
      REQUIRE(red->advisory_speed_mps >= 0);
      REQUIRE(red->advisory_speed_mps <= cfg.speed_limit_mps);
    }
  }
}

TEST_CASE("queue examples") {
  FeedbackConfig cfg;
  CHECK(queue_estimate({in_lane(45.3, 0)}, cfg) == 45.3);
  CHECK(queue_estimate({in_lane(45.3, 0), in_lane(31.5, 0.1), in_lane(80, 9)}, cfg) == 45.3);
  CHECK(queue_estimate({in_lane(31.5, 0)}, cfg) == 31.5);
  CHECK(queue_estimate({in_lane(60, 5)}, cfg) == 0);
  CHECK(queue_estimate({}, cfg) == 0);
}

TEST_CASE("adding a farther stopped vehicle never shrinks the queue") {
  FeedbackConfig cfg;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(0, 150), speed(0, 3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<IntegratedRecord> rs;
    for (int k = 0; k < 8; ++k) rs.push_back(in_lane(dist(rng), speed(rng)));
    const double before = queue_estimate(rs, cfg);
    rs.push_back(in_lane(before + dist(rng), 0));
    REQUIRE(queue_estimate(rs, cfg) >= before);
  }
}

TEST_CASE("timing recommendation examples") {
  FeedbackConfig cfg;
  const auto t = signal_timing_recommendation(45.3, signal(PhaseState::StopAndRemain, 88770), cfg);
  REQUIRE(t.has_value());
  CHECK(t->queue_length_m == 45.3);
  CHECK(t->remaining_red_s == 88.77);
  CHECK(t->recommended_extension_s == 5);
  CHECK_FALSE(signal_timing_recommendation(45.3, signal(PhaseState::StopAndRemain, 10000), cfg));
  CHECK_FALSE(signal_timing_recommendation(0, signal(PhaseState::StopAndRemain, 88770), cfg));
  CHECK_FALSE(signal_timing_recommendation(45.3, signal(PhaseState::ProtectedMovementAllowed, 88770), cfg));
}

TEST_CASE("incident examples") {
  FeedbackConfig cfg;
  VehicleHistory h{in_lane(60, 14.57)};
  auto inc = detect_incidents(h, nullptr, cfg);
  REQUIRE(inc.size() == 1);
  CHECK(inc[0].kind == IncidentKind::Overspeed);
  CHECK(inc[0].details.at("speed_limit_mps") == 11.2);

  auto a = in_lane(60, 15), b = in_lane(50, 10);
  b.timestamp_epoch_ms += 1000;
  cfg.overspeed = false;
  inc = detect_incidents({a, b}, nullptr, cfg);
  REQUIRE(inc.size() == 1);
  CHECK(inc[0].kind == IncidentKind::HardBraking);
  CHECK(inc[0].details.at("decel_mps2") == -5.0);

  VehicleHistory steady;
  for (int i = 0; i < 50; ++i) {
    auto r = in_lane(100 - i, 10);
    r.timestamp_epoch_ms += i * 100;
    steady.push_back(r);
  }
  CHECK(detect_incidents(steady, nullptr, FeedbackConfig{}).empty());

  VehicleHistory jumpy;
  for (int i = 0; i < 10; ++i) {
    auto r = in_lane(100, i % 2 ? 2.0 : 10.0);
    r.timestamp_epoch_ms += i * 500;
    jumpy.push_back(r);
  }
  FeedbackConfig only_erratic;
  only_erratic.hard_braking = false;
  inc = detect_incidents(jumpy, nullptr, only_erratic);
  REQUIRE(inc.size() == 1);
  CHECK(inc[0].kind == IncidentKind::ErraticSpeed);
}

TEST_CASE("geometric incidents use the lane index") {
  const auto map = fixtures::build_map(fixtures::park_dayton());
  LaneIndex index;
  index.update(map);
  FeedbackConfig cfg;

  auto r = on_fixture(map, "NB-T", 30, 8, PhaseState::ProtectedMovementAllowed, 20000, kT0, 1);
  CHECK(detect_incidents({r}, &index, cfg).empty());

  r.heading_deg = std::fmod(*r.heading_deg + 180.0, 360.0);
  auto inc = detect_incidents({r}, &index, cfg);
  REQUIRE(inc.size() == 1);
  CHECK(inc[0].kind == IncidentKind::WrongWay);

  // Off the lanes, 40 m east and 40 m north of the reference point.
  IntegratedRecord off;
  off.timestamp_epoch_ms = kT0;
  const auto* g = index.find(1);
  off.position = g->frame.to_geo({40, 40});
  inc = detect_incidents({off}, &index, cfg);
  REQUIRE(inc.size() == 1);
  CHECK(inc[0].kind == IncidentKind::LaneDeviation);

  // Inside the intersection box: turning vehicles are not flagged.
  off.position = g->frame.to_geo({1, 1});
  CHECK(detect_incidents({off}, &index, cfg).empty());

  // Far away.
  off.position = g->frame.to_geo({300, 300});
  CHECK(detect_incidents({off}, &index, cfg).empty());
}

TEST_CASE("the three field scenarios give exactly three messages") {
  const auto fish = fixtures::build_map(fixtures::park_fish_hatchery());
  const auto regent = fixtures::build_map(fixtures::park_regent());
  const auto dayton = fixtures::build_map(fixtures::park_dayton());
  const std::vector<IntegratedRecord> records{
      on_fixture(fish, "SB-T", 5, 2.7, PhaseState::ProtectedMovementAllowed, 900, kT0, 101),
      on_fixture(regent, "SB-T", 45.3, 0, PhaseState::StopAndRemain, 88770, kT0 + 100, 102),
      on_fixture(dayton, "WB-T", 60, 14.57, PhaseState::ProtectedMovementAllowed, 20000, kT0 + 200, 103),
  };
  const auto out = generate_feedback({fish, regent, dayton}, records, FeedbackConfig{});
  REQUIRE(out.size() == 3);
  CHECK(count_type(out, FeedbackType::VehicleAdvisory) == 1);
  CHECK(count_type(out, FeedbackType::SignalTimingAdjustment) == 1);
  CHECK(count_type(out, FeedbackType::IncidentNotification) == 1);

  const auto& adv = std::get<AdvisoryPayload>(out[0].payload);
  CHECK(std::abs(adv.advisory_speed_mps - 2.16) < 0.005);
  CHECK(out[0].intersection_id == 3);
  const auto& tim = std::get<TimingPayload>(out[1].payload);
  CHECK(std::abs(tim.queue_length_m - 45.3) < 0.05);
  CHECK(tim.remaining_red_s == 88.77);
  CHECK_FALSE(out[1].vehicle_id.has_value());
  const auto& inc = std::get<IncidentPayload>(out[2].payload);
  CHECK(inc.kind == IncidentKind::Overspeed);
  CHECK(out[2].vehicle_id == 103u);
}

TEST_CASE("rate limits and dedup") {
  const auto dayton = fixtures::build_map(fixtures::park_dayton());
  FeedbackEngine engine(FeedbackConfig{});
  engine.observe_map(dayton);

  // 10 s of continuous overspeed at 10 Hz: one notification.
  std::size_t incidents = 0;
  for (int i = 0; i < 100; ++i) {
    const auto r = on_fixture(dayton, "WB-T", 95 - i * 0.9, 14.57, PhaseState::ProtectedMovementAllowed, 60000,
                              kT0 + i * 100, 9);
    incidents += count_type(engine.on_record(r), FeedbackType::IncidentNotification);
  }
  CHECK(incidents == 1);

  // Cannot-clear advisories at 10 Hz for 3 s: one per second.
  FeedbackEngine slow(FeedbackConfig{});
  std::size_t advisories = 0;
  for (int i = 0; i < 30; ++i) {
    auto r = in_lane(50, 2.7);
    r.event_state = PhaseState::ProtectedMovementAllowed;
    r.residual_phase_ms = 900;
    r.timestamp_epoch_ms = kT0 + i * 100;
    advisories += count_type(slow.on_record(r), FeedbackType::VehicleAdvisory);
  }
  CHECK(advisories == 3);

  // A standing queue during one red interval: one recommendation; the next red interval gets its own.
  FeedbackEngine timing(FeedbackConfig{});
  std::size_t recs = 0;
  for (int i = 0; i < 50; ++i) {
    auto r = in_lane(45.3, 0);
    r.event_state = PhaseState::StopAndRemain;
    r.residual_phase_ms = 88770 - i * 100;
    r.timestamp_epoch_ms = kT0 + i * 100;
    recs += count_type(timing.on_record(r), FeedbackType::SignalTimingAdjustment);
  }
  CHECK(recs == 1);
  auto later = in_lane(45.3, 0);
  later.event_state = PhaseState::StopAndRemain;
  later.residual_phase_ms = 88770;
  later.timestamp_epoch_ms = kT0 + 200000;
  CHECK(count_type(timing.on_record(later), FeedbackType::SignalTimingAdjustment) == 1);
}

TEST_CASE("stale stopped vehicles do not count toward the queue") {
  FeedbackEngine engine(FeedbackConfig{});
  auto far = in_lane(45.3, 0);
  far.temp_id = 1;
  far.event_state = PhaseState::StopAndRemain;
  far.residual_phase_ms = 1000;  // too short to recommend
  engine.on_record(far);
  auto near = in_lane(10, 0);
  near.temp_id = 2;
  near.event_state = PhaseState::StopAndRemain;
  near.residual_phase_ms = 80000;
  near.timestamp_epoch_ms = kT0 + 5000;
  CHECK(engine.on_record(near).empty());
}

TEST_CASE("identical input, identical output") {
  const auto dayton = fixtures::build_map(fixtures::park_dayton());
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(1, 90), v(0, 16);
  std::uniform_int_distribution<std::int64_t> res(0, 90000);
  std::vector<IntegratedRecord> recs;
  const char* moves[] = {"NB-T", "SB-T", "EB-L", "WB-T"};
  for (int i = 0; i < 300; ++i) {
    recs.push_back(on_fixture(dayton, moves[i % 4], d(rng), v(rng),
                              i % 3 ? PhaseState::StopAndRemain : PhaseState::ProtectedMovementAllowed, res(rng),
                              kT0 + i * 50, static_cast<std::uint32_t>(i % 7)));
  }
  const auto a = generate_feedback({dayton}, recs, FeedbackConfig{});
  const auto b = generate_feedback({dayton}, recs, FeedbackConfig{});
  CHECK(a == b);
  CHECK_FALSE(a.empty());
  for (const auto& m : a) {
    const json j = m;
    REQUIRE(j.get<FeedbackMessage>() == m);
    if (const auto* adv = std::get_if<AdvisoryPayload>(&m.payload)) REQUIRE(adv->advisory_speed_mps >= 0);
    if (const auto* t = std::get_if<TimingPayload>(&m.payload)) REQUIRE(t->queue_length_m >= 0);
  }
}

TEST_CASE("feedback json layout") {
  FeedbackMessage m{kT0, 4, std::uint8_t{6}, std::nullopt, TimingPayload{45.3, 88.77, 5}};
  const json j = m;
  CHECK(j.at("type") == "SignalTimingAdjustment");
  CHECK(j.at("timestamp") == "2023-07-04T10:48:13.120Z");
  CHECK(j.at("intersection") == 4);
  CHECK(j.at("signal_group") == 6);
  CHECK(j.at("vehicle_id").is_null());
  CHECK(j.at("payload").at("remaining_red_s") == 88.77);
  json bad = j;
  bad["type"] = "Nope";
  CHECK_THROWS_AS(bad.get<FeedbackMessage>(), Error);
}

TEST_CASE("config json") {
  const auto c = json::parse(R"({"beta": 0.5, "speed_limits": {"3": 13.4}, "rules": {"wrong_way": false}})")
                     .get<FeedbackConfig>();
  CHECK(c.beta == 0.5);
  CHECK(c.limit_for(3) == 13.4);
  CHECK(c.limit_for(1) == 11.2);
  CHECK_FALSE(c.wrong_way);
  CHECK(c.overspeed);
  const auto back = json(c).get<FeedbackConfig>();
  CHECK(back.limit_for(3) == 13.4);
  CHECK_THROWS_AS(json::parse(R"({"beta": 1.5})").get<FeedbackConfig>(), Error);
}
