#include "corridor/fixtures.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <fmt/format.h>

#include "corridor/error.hpp"

namespace corridor::fixtures {

namespace {

// Approach order NB, EB, SB, WB; each approach enters from the opposite leg.
struct Approach {
  const char* name;
  Vec2 leg;  // outward unit vector of the leg the approach enters on
};

constexpr std::array<Approach, 4> kApproaches{{
    {"NB", {0, -1}},
    {"EB", {-1, 0}},
    {"SB", {0, 1}},
    {"WB", {1, 0}},
}};

// Legs in lane-id order for egress lanes: N, E, S, W.
constexpr std::array<Vec2, 4> kLegs{{{0, 1}, {1, 0}, {0, -1}, {-1, 0}}};

Vec2 right_of(Vec2 d) { return {d.y, -d.x}; }
Vec2 left_of(Vec2 d) { return {-d.y, d.x}; }

std::int32_t to_cm_even(double m) {
  // Node offsets travel in 2 cm units; keep fixtures on that grid.
  return static_cast<std::int32_t>(2 * std::lround(m * 50.0));
}

NodeOffset node(Vec2 p) { return {to_cm_even(p.x), to_cm_even(p.y)}; }

std::size_t leg_index(Vec2 leg) {
  for (std::size_t i = 0; i < kLegs.size(); ++i) {
    if (kLegs[i] == leg) return i;
  }
  return 0;
}

int turn_rank(char turn) { return turn == 'L' ? 0 : turn == 'T' ? 1 : 2; }

}  // namespace

MapMessage build_map(const IntersectionSpec& spec) {
  MapMessage map;
  map.intersection_id = spec.id;
  map.ref_point = spec.ref_point;
  map.lane_width_cm = kLaneWidthCm;
  const double w = kLaneWidthCm / 100.0;

  std::uint8_t next_id = 1;
  const auto egress_base = static_cast<std::uint8_t>(spec.movements.size() + 1);

  for (const auto& approach : kApproaches) {
    std::vector<const MovementSpec*> lanes;
    for (const auto& mv : spec.movements) {
      if (mv.movement.size() != 4 || mv.movement[2] != '-') {
        throw Error(Errc::InvalidConfig, fmt::format("bad movement '{}'", mv.movement));
      }
      if (mv.movement.compare(0, 2, approach.name) == 0) lanes.push_back(&mv);
    }
    std::stable_sort(lanes.begin(), lanes.end(), [](const MovementSpec* a, const MovementSpec* b) {
      return turn_rank(a->movement[3]) < turn_rank(b->movement[3]);
    });
    const Vec2 travel = approach.leg * -1.0;
    for (std::size_t k = 0; k < lanes.size(); ++k) {
      const char turn = lanes[k]->movement[3];
      const Vec2 exit_leg = turn == 'T' ? travel : turn == 'L' ? left_of(travel) : right_of(travel);
      const Vec2 lateral = right_of(travel) * (w / 2 + w * static_cast<double>(k));
      LaneDescriptor lane;
      lane.lane_id = next_id++;
      lane.signal_group_id = lanes[k]->signal_group_id;
      lane.connecting_lane_id = static_cast<std::uint8_t>(egress_base + leg_index(exit_leg));
      lane.nodes = {node(approach.leg * kStopLineSetbackM + lateral),
                    node(approach.leg * (kStopLineSetbackM + kLaneLengthM) + lateral)};
      map.lanes.push_back(lane);
    }
  }

  for (const auto& leg : kLegs) {
    const Vec2 lateral = right_of(leg) * (w / 2);
    LaneDescriptor lane;
    lane.lane_id = next_id++;
    lane.nodes = {node(leg * kStopLineSetbackM + lateral), node(leg * (kStopLineSetbackM + kLaneLengthM) + lateral)};
    map.lanes.push_back(lane);
  }
  return map;
}

IntersectionSpec park_dayton() {
  return {1,
          "Park @ Dayton",
          {43.0716000, -89.4009000, 26500},
          {{1, "SB-L"}, {2, "NB-T"}, {3, "EB-L"}, {4, "WB-T"}, {5, "NB-L"}, {6, "SB-T"}, {7, "WB-L"}, {8, "EB-T"}}};
}

IntersectionSpec intersection_2() {
  return {2,
          "Park @ corridor-2",
          {43.0603000, -89.3992000, 26800},
          {{2, "NB-T"}, {6, "SB-T"}, {3, "SB-L"}, {9, "WB-R"}, {4, "WB-T"}}};
}

IntersectionSpec park_fish_hatchery() {
  auto spec = park_dayton();
  spec.id = 3;
  spec.name = "Park @ Fish Hatchery";
  spec.ref_point = {43.0497000, -89.3967000, 27000};
  spec.movements.push_back({6, "SB-R"});
  return spec;
}

IntersectionSpec park_regent() {
  auto spec = park_dayton();
  spec.id = 4;
  spec.name = "Park @ Regent";
  spec.ref_point = {43.0680000, -89.4006000, 26700};
  return spec;
}

std::vector<IntersectionSpec> corridor() { return {park_dayton(), intersection_2(), park_fish_hatchery(), park_regent()}; }

std::vector<MapMessage> named_maps(const std::string& name) {
  std::vector<MapMessage> out;
  if (name == "corridor") {
    for (const auto& spec : corridor()) out.push_back(build_map(spec));
  } else if (name == "park_dayton") {
    out.push_back(build_map(park_dayton()));
  } else if (name == "intersection_2") {
    out.push_back(build_map(intersection_2()));
  } else if (name == "park_fish_hatchery") {
    out.push_back(build_map(park_fish_hatchery()));
  } else if (name == "park_regent") {
    out.push_back(build_map(park_regent()));
  }
  return out;
}

std::uint8_t ingress_lane_id(const MapMessage& map, const std::string& movement) {
  const IntersectionGeometry geometry(map);
  for (const auto& lane : geometry.lanes) {
    if (lane.signal_group_id != 0 && movement_label(geometry, lane) == movement) return lane.lane_id;
  }
  return 0;
}

GeoPoint point_on_lane(const MapMessage& map, std::uint8_t lane_id, double distance_m) {
  const IntersectionGeometry geometry(map);
  const LanePolygon* lane = geometry.find_lane(lane_id);
  if (!lane) throw Error(Errc::InvalidConfig, fmt::format("no lane {}", lane_id));
  const auto& c = lane->centerline;
  Vec2 p = c[0];
  if (distance_m < 0.0) {
    const Vec2 d = c[0] - c[1];
    p = c[0] + d * (-distance_m / norm(d));
  } else {
    double left = distance_m;
    p = c.back();
    for (std::size_t i = 0; i + 1 < c.size(); ++i) {
      const double seg = norm(c[i + 1] - c[i]);
      if (left <= seg) {
        p = c[i] + (c[i + 1] - c[i]) * (left / seg);
        break;
      }
      left -= seg;
    }
  }
  return geometry.frame.to_geo(p);
}

}  // namespace corridor::fixtures
