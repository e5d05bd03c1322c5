#include "corridor/messages.hpp"

#include <cmath>
#include <set>

#include <fmt/format.h>

#include "corridor/error.hpp"

namespace corridor {

const char* phase_state_name(PhaseState state) noexcept {
  switch (state) {
    case PhaseState::Unavailable: return "unavailable";
    case PhaseState::Dark: return "dark";
    case PhaseState::StopThenProceed: return "stop-then-proceed";
    case PhaseState::StopAndRemain: return "stop-and-remain";
    case PhaseState::PreMovement: return "pre-movement";
    case PhaseState::PermissiveMovementAllowed: return "permissive-movement-allowed";
    case PhaseState::ProtectedMovementAllowed: return "protected-movement-allowed";
    case PhaseState::PermissiveClearance: return "permissive-clearance";
    case PhaseState::ProtectedClearance: return "protected-clearance";
    case PhaseState::CautionConflictingTraffic: return "caution-conflicting-traffic";
  }
  return "invalid";
}

const MovementState* SpatMessage::find_movement(std::uint8_t signal_group_id) const {
  for (const auto& m : movements) {
    if (m.signal_group_id == signal_group_id) return &m;
  }
  return nullptr;
}

const LaneDescriptor* MapMessage::find_lane(std::uint8_t lane_id) const {
  for (const auto& l : lanes) {
    if (l.lane_id == lane_id) return &l;
  }
  return nullptr;
}

MsgType message_type(const Message& message) noexcept {
  switch (message.index()) {
    case 0: return MsgType::Bsm;
    case 1: return MsgType::Spat;
    default: return MsgType::Map;
  }
}

namespace {

// Scale s such that engineering = raw / s (or raw * |s| when multiply is set).
struct Scale {
  double factor;
  bool multiply;
};

Scale scale_of(FieldKind kind) {
  switch (kind) {
    case FieldKind::Latitude:
    case FieldKind::Longitude: return {1e7, false};
    case FieldKind::Elevation: return {10.0, true};
    case FieldKind::Speed: return {50.0, false};
    case FieldKind::Heading: return {80.0, false};
    case FieldKind::SteeringAngle: return {1.5, true};
    case FieldKind::Acceleration: return {100.0, false};
    case FieldKind::VerticalAcceleration: return {50.0, false};
    case FieldKind::NodeOffset: return {2.0, true};
  }
  return {1.0, true};
}

const char* field_name(FieldKind kind) {
  switch (kind) {
    case FieldKind::Latitude: return "latitude";
    case FieldKind::Longitude: return "longitude";
    case FieldKind::Elevation: return "elevation";
    case FieldKind::Speed: return "speed";
    case FieldKind::Heading: return "heading";
    case FieldKind::SteeringAngle: return "steering angle";
    case FieldKind::Acceleration: return "acceleration";
    case FieldKind::VerticalAcceleration: return "vertical acceleration";
    case FieldKind::NodeOffset: return "node offset";
  }
  return "field";
}

bool in_raw_range(FieldKind kind, double value) {
  if (!std::isfinite(value)) return false;
  const auto s = scale_of(kind);
  const double raw = s.multiply ? value / s.factor : value * s.factor;
  const auto r = raw_range(kind);
  const double q = std::round(raw);
  return q >= static_cast<double>(r.min) && q <= static_cast<double>(r.max);
}

void check(ValidationResult& out, bool condition, std::string message) {
  if (!condition) out.violations.push_back(std::move(message));
}

void check_field(ValidationResult& out, FieldKind kind, double value, const char* what) {
  if (!in_raw_range(kind, value)) out.violations.push_back(fmt::format("{} out of range", what));
}

}  // namespace

RawRange raw_range(FieldKind kind) noexcept {
  switch (kind) {
    case FieldKind::Latitude: return {-900000000, 900000001};
    case FieldKind::Longitude: return {-1799999999, 1800000001};
    case FieldKind::Elevation: return {-4096, 61439};
    case FieldKind::Speed: return {0, 8190};
    case FieldKind::Heading: return {0, 28799};
    case FieldKind::SteeringAngle: return {-126, 127};
    case FieldKind::Acceleration: return {-2000, 2001};
    case FieldKind::VerticalAcceleration: return {-127, 127};
    case FieldKind::NodeOffset: return {-32767, 32767};
  }
  return {0, 0};
}

double raw_to_engineering(FieldKind kind, std::int64_t raw) {
  const auto r = raw_range(kind);
  if (raw < r.min || raw > r.max) {
    throw Error(Errc::FieldOutOfRange, fmt::format("raw {} {} outside [{}, {}]", field_name(kind), raw, r.min, r.max));
  }
  const auto s = scale_of(kind);
  return s.multiply ? static_cast<double>(raw) * s.factor : static_cast<double>(raw) / s.factor;
}

std::int64_t engineering_to_raw(FieldKind kind, double value) {
  if (!std::isfinite(value)) {
    throw Error(Errc::FieldOutOfRange, fmt::format("{} is not finite", field_name(kind)));
  }
  const auto s = scale_of(kind);
  const std::int64_t raw = std::llround(s.multiply ? value / s.factor : value * s.factor);
  const auto r = raw_range(kind);
  if (raw < r.min || raw > r.max) {
    throw Error(Errc::FieldOutOfRange, fmt::format("{} {} quantizes outside [{}, {}]", field_name(kind), value, r.min, r.max));
  }
  return raw;
}

ValidationResult validate(const BsmCore& bsm) {
  ValidationResult out;
  check(out, std::isfinite(bsm.latitude_deg) && bsm.latitude_deg >= -90.0 && bsm.latitude_deg <= 90.0000001,
        "latitude out of range");
  check(out,
        std::isfinite(bsm.longitude_deg) && bsm.longitude_deg >= -179.9999999 && bsm.longitude_deg <= 180.0000001,
        "longitude out of range");
  if (bsm.sec_mark_ms) check(out, *bsm.sec_mark_ms <= 59999, "sec_mark out of range");
  check_field(out, FieldKind::Elevation, bsm.elevation_cm, "elevation");
  if (bsm.speed_mps) {
    check(out, std::isfinite(*bsm.speed_mps) && *bsm.speed_mps >= 0.0 && *bsm.speed_mps <= 163.8,
          "speed out of range");
  }
  if (bsm.heading_deg) {
    check(out, std::isfinite(*bsm.heading_deg) && *bsm.heading_deg >= 0.0 && *bsm.heading_deg < 360.0 &&
                   in_raw_range(FieldKind::Heading, *bsm.heading_deg),
          "heading out of range");
  }
  check_field(out, FieldKind::SteeringAngle, bsm.steering_angle_deg, "steering angle");
  check_field(out, FieldKind::Acceleration, bsm.accel_long_mps2, "longitudinal acceleration");
  check_field(out, FieldKind::Acceleration, bsm.accel_lat_mps2, "lateral acceleration");
  check_field(out, FieldKind::VerticalAcceleration, bsm.accel_vert_g, "vertical acceleration");
  check(out, static_cast<unsigned>(bsm.transmission) <= 7, "transmission out of range");
  check(out, bsm.width_cm <= 1023, "width out of range");
  check(out, bsm.length_cm <= 4095, "length out of range");
  check(out, bsm.path_hist.size() <= 15, "path history longer than 15 points");
  auto offset_ok = [](const PathOffset& p) {
    return p.dlat >= -32768 && p.dlat <= 32767 && p.dlon >= -32768 && p.dlon <= 32767;
  };
  for (const auto& p : bsm.path_hist) {
    if (!offset_ok(p)) {
      out.violations.emplace_back("path history offset out of range");
      break;
    }
  }
  if (bsm.path_pred) check(out, offset_ok(*bsm.path_pred), "path prediction offset out of range");
  return out;
}

ValidationResult validate(const SpatMessage& spat) {
  ValidationResult out;
  check(out, spat.moy <= kMaxMoy, "moy out of range");
  check(out, spat.d_second_ms <= kMaxDSecond, "d_second out of range");
  check(out, !spat.movements.empty(), "spat needs at least one movement");
  check(out, spat.movements.size() <= 15, "spat has more than 15 movements");
  std::set<std::uint8_t> groups;
  for (const auto& m : spat.movements) {
    check(out, m.signal_group_id >= 1, "signal group id must be >= 1");
    check(out, groups.insert(m.signal_group_id).second,
          fmt::format("duplicate signal group {}", m.signal_group_id));
    check(out, static_cast<unsigned>(m.event_state) <= 9, "event state out of range");
    check(out, m.min_end_time_mark <= kTimeMarkUndefined, "min_end_time_mark out of range");
    check(out, m.max_end_time_mark <= kTimeMarkUndefined, "max_end_time_mark out of range");
    if (m.min_end_time_mark != kTimeMarkUndefined && m.max_end_time_mark != kTimeMarkUndefined) {
      check(out, m.min_end_time_mark <= m.max_end_time_mark, "min_end_time_mark exceeds max_end_time_mark");
    }
  }
  return out;
}

ValidationResult validate(const MapMessage& map) {
  ValidationResult out;
  const auto& ref = map.ref_point;
  check(out, std::isfinite(ref.latitude_deg) && ref.latitude_deg >= -90.0 && ref.latitude_deg <= 90.0000001,
        "latitude out of range");
  check(out,
        std::isfinite(ref.longitude_deg) && ref.longitude_deg >= -179.9999999 &&
            ref.longitude_deg <= 180.0000001,
        "longitude out of range");
  check_field(out, FieldKind::Elevation, ref.elevation_cm, "elevation");
  check(out, map.lane_width_cm <= 32767, "lane width out of range");
  check(out, map.lanes.size() <= 63, "map has more than 63 lanes");
  std::set<std::uint8_t> ids;
  for (const auto& lane : map.lanes) {
    check(out, lane.lane_id >= 1, "lane id must be >= 1");
    check(out, ids.insert(lane.lane_id).second, fmt::format("duplicate lane id {}", lane.lane_id));
    check(out, lane.nodes.size() >= 2, "lane needs ≥2 nodes");
    check(out, lane.nodes.size() <= 63, "lane has more than 63 nodes");
    for (const auto& n : lane.nodes) {
      if (n.dx_cm < -65534 || n.dx_cm > 65534 || n.dy_cm < -65534 || n.dy_cm > 65534) {
        out.violations.push_back(fmt::format("lane {} node offset out of range", lane.lane_id));
        break;
      }
    }
  }
  return out;
}

ValidationResult validate(const Message& message) {
  return std::visit([](const auto& m) { return validate(m); }, message);
}

}  // namespace corridor
