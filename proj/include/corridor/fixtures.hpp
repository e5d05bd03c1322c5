#pragma once

// Synthetic intersection layouts for the Park Street corridor. Each layout is
// a four-leg intersection with right-hand traffic: ingress lanes for the
// listed movements, one egress lane per leg.

#include <cstdint>
#include <string>
#include <vector>

#include "corridor/lanegeo.hpp"
#include "corridor/messages.hpp"

namespace corridor::fixtures {

struct MovementSpec {
  std::uint8_t signal_group_id = 0;
  std::string movement;  // "NB-T", "SB-L", "WB-R" ...
};

struct IntersectionSpec {
  std::uint16_t id = 0;
  std::string name;
  GeoPoint ref_point;
  std::vector<MovementSpec> movements;
};

inline constexpr std::uint16_t kLaneWidthCm = 350;
inline constexpr double kStopLineSetbackM = 15.0;
inline constexpr double kLaneLengthM = 100.0;

MapMessage build_map(const IntersectionSpec& spec);

IntersectionSpec park_dayton();
IntersectionSpec intersection_2();
IntersectionSpec park_fish_hatchery();
IntersectionSpec park_regent();
std::vector<IntersectionSpec> corridor();

// MAPs by fixture name: park_dayton, intersection_2, park_fish_hatchery,
// park_regent, or corridor for all four. Empty for an unknown name.
std::vector<MapMessage> named_maps(const std::string& name);

// Lane id of the ingress lane carrying a movement; 0 when absent.
std::uint8_t ingress_lane_id(const MapMessage& map, const std::string& movement);

// Point on a lane's centerline, distance_m from the stop-line end.
GeoPoint point_on_lane(const MapMessage& map, std::uint8_t lane_id, double distance_m);

}  // namespace corridor::fixtures
