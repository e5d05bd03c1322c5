#pragma once

// Engineering-unit domain types for BSM, SPaT and MAP messages and the fused
// integrated record. All values are already scaled: degrees, metres per
// second, centimetres. Wire quantization lives in the codec.

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace corridor {

enum class MsgType : std::uint8_t { Bsm = 1, Spat = 2, Map = 3 };

enum class Transmission : std::uint8_t {
  Neutral = 0,
  Park = 1,
  Forward = 2,
  Reverse = 3,
  Reserved1 = 4,
  Reserved2 = 5,
  Reserved3 = 6,
  Unavailable = 7,
};

// J2735 MovementPhaseState.
enum class PhaseState : std::uint8_t {
  Unavailable = 0,
  Dark = 1,
  StopThenProceed = 2,
  StopAndRemain = 3,
  PreMovement = 4,
  PermissiveMovementAllowed = 5,
  ProtectedMovementAllowed = 6,
  PermissiveClearance = 7,
  ProtectedClearance = 8,
  CautionConflictingTraffic = 9,
};

const char* phase_state_name(PhaseState state) noexcept;

inline constexpr std::uint16_t kSecMarkUnavailable = 65535;
inline constexpr std::uint16_t kTimeMarkUndefined = 36001;
inline constexpr std::uint32_t kMaxMoy = 527040;
inline constexpr std::uint16_t kMaxDSecond = 60999;

// Offset of a path point from the current position, in 1e-7 degree units.
struct PathOffset {
  std::int32_t dlat = 0;
  std::int32_t dlon = 0;
  bool operator==(const PathOffset&) const = default;
};

struct BsmCore {
  std::uint32_t temp_id = 0;
  std::optional<std::uint16_t> sec_mark_ms;  // nullopt on the wire is 65535
  double latitude_deg = 0.0;
  double longitude_deg = 0.0;
  std::int32_t elevation_cm = 0;
  std::optional<double> speed_mps;
  std::optional<double> heading_deg;
  double steering_angle_deg = 0.0;
  double accel_long_mps2 = 0.0;
  double accel_lat_mps2 = 0.0;
  double accel_vert_g = 0.0;
  std::uint8_t brake_status = 0;
  Transmission transmission = Transmission::Neutral;
  std::uint16_t width_cm = 0;
  std::uint16_t length_cm = 0;
  std::uint8_t accuracy_raw = 0;
  std::vector<PathOffset> path_hist;
  std::optional<PathOffset> path_pred;

  bool operator==(const BsmCore&) const = default;
};

struct MovementState {
  std::uint8_t signal_group_id = 1;
  PhaseState event_state = PhaseState::Unavailable;
  std::uint16_t min_end_time_mark = kTimeMarkUndefined;  // tenths of a second in the hour
  std::uint16_t max_end_time_mark = kTimeMarkUndefined;

  bool operator==(const MovementState&) const = default;
};

struct SpatMessage {
  std::uint16_t intersection_id = 0;
  std::uint32_t moy = 0;
  std::uint16_t d_second_ms = 0;
  std::vector<MovementState> movements;

  const MovementState* find_movement(std::uint8_t signal_group_id) const;
  bool operator==(const SpatMessage&) const = default;
};

struct GeoPoint {
  double latitude_deg = 0.0;
  double longitude_deg = 0.0;
  std::int32_t elevation_cm = 0;
  bool operator==(const GeoPoint&) const = default;
};

// Planar offset from the MAP reference point; x east, y north.
struct NodeOffset {
  std::int32_t dx_cm = 0;
  std::int32_t dy_cm = 0;
  bool operator==(const NodeOffset&) const = default;
};

struct LaneDescriptor {
  std::uint8_t lane_id = 1;
  std::uint8_t signal_group_id = 0;     // 0: unsignalized (egress)
  std::uint8_t connecting_lane_id = 0;  // 0: none
  std::vector<NodeOffset> nodes;        // nodes[0] sits on the stop line

  bool operator==(const LaneDescriptor&) const = default;
};

struct MapMessage {
  std::uint16_t intersection_id = 0;
  GeoPoint ref_point;
  std::uint16_t lane_width_cm = 0;
  std::vector<LaneDescriptor> lanes;

  const LaneDescriptor* find_lane(std::uint8_t lane_id) const;
  bool operator==(const MapMessage&) const = default;
};

using Message = std::variant<BsmCore, SpatMessage, MapMessage>;

MsgType message_type(const Message& message) noexcept;

struct IntegratedRecord {
  std::int64_t timestamp_epoch_ms = 0;
  std::uint32_t temp_id = 0;
  GeoPoint position;
  std::optional<double> speed_mps;
  std::optional<double> heading_deg;
  std::optional<std::uint16_t> matched_intersection_id;
  std::optional<std::uint8_t> matched_lane_id;
  std::optional<std::uint8_t> signal_group_id;
  std::optional<PhaseState> event_state;
  std::optional<std::int64_t> residual_phase_ms;
  std::optional<double> distance_to_stop_line_m;
  std::vector<std::string> source_rsu_ids;

  bool operator==(const IntegratedRecord&) const = default;
};

struct ValidationResult {
  std::vector<std::string> violations;
  bool ok() const noexcept { return violations.empty(); }
};

ValidationResult validate(const BsmCore& bsm);
ValidationResult validate(const SpatMessage& spat);
ValidationResult validate(const MapMessage& map);
ValidationResult validate(const Message& message);

// Raw J2735-style integers (before any wire offset) versus engineering values.
enum class FieldKind {
  Latitude,              // 1e-7 deg          -> deg
  Longitude,             // 1e-7 deg          -> deg
  Elevation,             // 0.1 m             -> cm
  Speed,                 // 0.02 m/s          -> m/s
  Heading,               // 0.0125 deg        -> deg
  SteeringAngle,         // 1.5 deg           -> deg
  Acceleration,          // 0.01 m/s^2        -> m/s^2
  VerticalAcceleration,  // 0.02 g            -> g
  NodeOffset,            // 2 cm              -> cm
};

struct RawRange {
  std::int64_t min;
  std::int64_t max;
};

RawRange raw_range(FieldKind kind) noexcept;

// Throws Error{FieldOutOfRange} when raw lies outside raw_range(kind).
double raw_to_engineering(FieldKind kind, std::int64_t raw);

// Quantizes to the field resolution, rounding half away from zero. Throws
// Error{FieldOutOfRange} when the quantized value falls outside the range.
std::int64_t engineering_to_raw(FieldKind kind, double value);

}  // namespace corridor
