#include "corridor/codec.hpp"

#include <cmath>

#include <fmt/format.h>

#include "corridor/error.hpp"

namespace corridor {

namespace {

constexpr std::int64_t kLatOffset = 900000000;
constexpr std::int64_t kLonOffset = 1799999999;
constexpr std::int64_t kElevOffset = 4096;
constexpr std::int64_t kSteeringOffset = 126;
constexpr std::int64_t kAccelOffset = 2000;
constexpr std::int64_t kVertOffset = 127;
constexpr std::uint64_t kSpeedUnavailable = 8191;
constexpr std::uint64_t kHeadingUnavailable = 28800;

[[noreturn]] void out_of_range(const std::string& what) { throw Error(Errc::FieldOutOfRange, what); }

std::uint64_t offset_raw(FieldKind kind, double value, std::int64_t offset) {
  return static_cast<std::uint64_t>(engineering_to_raw(kind, value) + offset);
}

double from_offset(FieldKind kind, std::uint64_t wire, std::int64_t offset, const char* name) {
  const auto raw = static_cast<std::int64_t>(wire) - offset;
  const auto r = raw_range(kind);
  if (raw < r.min || raw > r.max) out_of_range(fmt::format("{} wire value {}", name, wire));
  return raw_to_engineering(kind, raw);
}

std::int32_t elevation_cm_from_wire(std::uint64_t wire) {
  return static_cast<std::int32_t>((static_cast<std::int64_t>(wire) - kElevOffset) * 10);
}

void write_path_offset(BitWriter& w, const PathOffset& p) {
  w.write_signed(p.dlat, 16);
  w.write_signed(p.dlon, 16);
}

PathOffset read_path_offset(BitReader& r) {
  PathOffset p;
  p.dlat = static_cast<std::int32_t>(r.read_signed(16));
  p.dlon = static_cast<std::int32_t>(r.read_signed(16));
  return p;
}

void encode_geo(BitWriter& w, double lat, double lon, std::int32_t elev_cm) {
  w.write(offset_raw(FieldKind::Latitude, lat, kLatOffset), 31);
  w.write(offset_raw(FieldKind::Longitude, lon, kLonOffset), 32);
  w.write(offset_raw(FieldKind::Elevation, elev_cm, kElevOffset), 16);
}

void encode_body(BitWriter& w, const BsmCore& m) {
  w.write(m.temp_id, 32);
  w.write(m.sec_mark_ms.value_or(kSecMarkUnavailable), 16);
  encode_geo(w, m.latitude_deg, m.longitude_deg, m.elevation_cm);
  w.write(m.speed_mps ? static_cast<std::uint64_t>(engineering_to_raw(FieldKind::Speed, *m.speed_mps))
                      : kSpeedUnavailable,
          13);
  w.write(m.heading_deg ? static_cast<std::uint64_t>(engineering_to_raw(FieldKind::Heading, *m.heading_deg))
                        : kHeadingUnavailable,
          15);
  w.write(offset_raw(FieldKind::SteeringAngle, m.steering_angle_deg, kSteeringOffset), 8);
  w.write(offset_raw(FieldKind::Acceleration, m.accel_long_mps2, kAccelOffset), 12);
  w.write(offset_raw(FieldKind::Acceleration, m.accel_lat_mps2, kAccelOffset), 12);
  w.write(offset_raw(FieldKind::VerticalAcceleration, m.accel_vert_g, kVertOffset), 8);
  w.write(m.brake_status, 8);
  w.write(static_cast<std::uint64_t>(m.transmission), 3);
  w.write(m.width_cm, 10);
  w.write(m.length_cm, 12);
  w.write(m.accuracy_raw, 8);
  w.write(m.path_hist.size(), 4);
  for (const auto& p : m.path_hist) write_path_offset(w, p);
  w.write(m.path_pred ? 1 : 0, 1);
  if (m.path_pred) write_path_offset(w, *m.path_pred);
}

void encode_body(BitWriter& w, const SpatMessage& m) {
  w.write(m.intersection_id, 16);
  w.write(m.moy, 20);
  w.write(m.d_second_ms, 16);
  w.write(m.movements.size(), 4);
  for (const auto& mv : m.movements) {
    w.write(mv.signal_group_id, 8);
    w.write(static_cast<std::uint64_t>(mv.event_state), 4);
    w.write(mv.min_end_time_mark, 16);
    w.write(mv.max_end_time_mark, 16);
  }
}

void encode_body(BitWriter& w, const MapMessage& m) {
  w.write(m.intersection_id, 16);
  encode_geo(w, m.ref_point.latitude_deg, m.ref_point.longitude_deg, m.ref_point.elevation_cm);
  w.write(m.lane_width_cm, 15);
  w.write(m.lanes.size(), 6);
  for (const auto& lane : m.lanes) {
    w.write(lane.lane_id, 8);
    w.write(lane.signal_group_id, 8);
    w.write(lane.connecting_lane_id, 8);
    w.write(lane.nodes.size(), 6);
    for (const auto& n : lane.nodes) {
      w.write_signed(engineering_to_raw(FieldKind::NodeOffset, n.dx_cm), 16);
      w.write_signed(engineering_to_raw(FieldKind::NodeOffset, n.dy_cm), 16);
    }
  }
}

BsmCore decode_bsm(BitReader& r) {
  BsmCore m;
  m.temp_id = static_cast<std::uint32_t>(r.read(32));
  const auto sec_mark = r.read(16);
  if (sec_mark != kSecMarkUnavailable) {
    if (sec_mark > 59999) out_of_range(fmt::format("sec_mark {}", sec_mark));
    m.sec_mark_ms = static_cast<std::uint16_t>(sec_mark);
  }
  m.latitude_deg = from_offset(FieldKind::Latitude, r.read(31), kLatOffset, "latitude");
  m.longitude_deg = from_offset(FieldKind::Longitude, r.read(32), kLonOffset, "longitude");
  m.elevation_cm = elevation_cm_from_wire(r.read(16));
  const auto speed = r.read(13);
  if (speed != kSpeedUnavailable) m.speed_mps = raw_to_engineering(FieldKind::Speed, static_cast<std::int64_t>(speed));
  const auto heading = r.read(15);
  if (heading > kHeadingUnavailable) out_of_range(fmt::format("heading wire value {}", heading));
  if (heading != kHeadingUnavailable) {
    m.heading_deg = raw_to_engineering(FieldKind::Heading, static_cast<std::int64_t>(heading));
  }
  m.steering_angle_deg = from_offset(FieldKind::SteeringAngle, r.read(8), kSteeringOffset, "steering");
  m.accel_long_mps2 = from_offset(FieldKind::Acceleration, r.read(12), kAccelOffset, "accel_long");
  m.accel_lat_mps2 = from_offset(FieldKind::Acceleration, r.read(12), kAccelOffset, "accel_lat");
  m.accel_vert_g = from_offset(FieldKind::VerticalAcceleration, r.read(8), kVertOffset, "accel_vert");
  m.brake_status = static_cast<std::uint8_t>(r.read(8));
  m.transmission = static_cast<Transmission>(r.read(3));
  m.width_cm = static_cast<std::uint16_t>(r.read(10));
  m.length_cm = static_cast<std::uint16_t>(r.read(12));
  m.accuracy_raw = static_cast<std::uint8_t>(r.read(8));
  const auto count = r.read(4);
  m.path_hist.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) m.path_hist.push_back(read_path_offset(r));
  if (r.read(1)) m.path_pred = read_path_offset(r);
  return m;
}

SpatMessage decode_spat(BitReader& r) {
  SpatMessage m;
  m.intersection_id = static_cast<std::uint16_t>(r.read(16));
  m.moy = static_cast<std::uint32_t>(r.read(20));
  if (m.moy > kMaxMoy) out_of_range(fmt::format("moy {}", m.moy));
  m.d_second_ms = static_cast<std::uint16_t>(r.read(16));
  if (m.d_second_ms > kMaxDSecond) out_of_range(fmt::format("d_second {}", m.d_second_ms));
  const auto count = r.read(4);
  if (count == 0) out_of_range("movement_count 0");
  m.movements.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    MovementState mv;
    mv.signal_group_id = static_cast<std::uint8_t>(r.read(8));
    const auto state = r.read(4);
    if (state > 9) out_of_range(fmt::format("event_state {}", state));
    mv.event_state = static_cast<PhaseState>(state);
    mv.min_end_time_mark = static_cast<std::uint16_t>(r.read(16));
    mv.max_end_time_mark = static_cast<std::uint16_t>(r.read(16));
    m.movements.push_back(mv);
  }
  return m;
}

MapMessage decode_map(BitReader& r) {
  MapMessage m;
  m.intersection_id = static_cast<std::uint16_t>(r.read(16));
  m.ref_point.latitude_deg = from_offset(FieldKind::Latitude, r.read(31), kLatOffset, "ref latitude");
  m.ref_point.longitude_deg = from_offset(FieldKind::Longitude, r.read(32), kLonOffset, "ref longitude");
  m.ref_point.elevation_cm = elevation_cm_from_wire(r.read(16));
  m.lane_width_cm = static_cast<std::uint16_t>(r.read(15));
  const auto lanes = r.read(6);
  m.lanes.reserve(lanes);
  for (std::uint64_t i = 0; i < lanes; ++i) {
    LaneDescriptor lane;
    lane.lane_id = static_cast<std::uint8_t>(r.read(8));
    lane.signal_group_id = static_cast<std::uint8_t>(r.read(8));
    lane.connecting_lane_id = static_cast<std::uint8_t>(r.read(8));
    const auto nodes = r.read(6);
    if (nodes < 2) out_of_range(fmt::format("lane {} node_count {}", lane.lane_id, nodes));
    lane.nodes.reserve(nodes);
    for (std::uint64_t j = 0; j < nodes; ++j) {
      NodeOffset n;
      n.dx_cm = static_cast<std::int32_t>(raw_to_engineering(FieldKind::NodeOffset, r.read_signed(16)));
      n.dy_cm = static_cast<std::int32_t>(raw_to_engineering(FieldKind::NodeOffset, r.read_signed(16)));
      lane.nodes.push_back(n);
    }
    m.lanes.push_back(std::move(lane));
  }
  return m;
}

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

void BitWriter::write(std::uint64_t value, unsigned bits) {
  if (bits < 64 && (value >> bits) != 0) {
    throw Error(Errc::FieldOutOfRange, fmt::format("value {} does not fit in {} bits", value, bits));
  }
  for (unsigned i = bits; i-- > 0;) {
    if (bits_ % 8 == 0) bytes_.push_back(0);
    if ((value >> i) & 1U) bytes_.back() |= static_cast<std::uint8_t>(0x80U >> (bits_ % 8));
    ++bits_;
  }
}

void BitWriter::write_signed(std::int64_t value, unsigned bits) {
  const std::int64_t lo = -(std::int64_t{1} << (bits - 1));
  const std::int64_t hi = (std::int64_t{1} << (bits - 1)) - 1;
  if (value < lo || value > hi) {
    throw Error(Errc::FieldOutOfRange, fmt::format("signed value {} does not fit in {} bits", value, bits));
  }
  const std::uint64_t mask = (std::uint64_t{1} << bits) - 1;
  write(static_cast<std::uint64_t>(value) & mask, bits);
}

std::vector<std::uint8_t> BitWriter::finish() {
  bits_ = bytes_.size() * 8;
  return std::move(bytes_);
}

std::uint64_t BitReader::read(unsigned bits) {
  if (remaining() < bits) {
    throw Error(Errc::Truncated, fmt::format("need {} bits at offset {}, {} left", bits, pos_, remaining()));
  }
  std::uint64_t value = 0;
  for (unsigned i = 0; i < bits; ++i, ++pos_) {
    value = (value << 1) | ((bytes_[pos_ / 8] >> (7 - pos_ % 8)) & 1U);
  }
  return value;
}

std::int64_t BitReader::read_signed(unsigned bits) {
  const auto raw = read(bits);
  const std::uint64_t sign = std::uint64_t{1} << (bits - 1);
  return (raw & sign) ? static_cast<std::int64_t>(raw) - static_cast<std::int64_t>(sign << 1)
                      : static_cast<std::int64_t>(raw);
}

std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xF]);
  }
  return out;
}

std::vector<std::uint8_t> from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw Error(Errc::MalformedHex, "odd-length hex string");
  std::vector<std::uint8_t> out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int hi = hex_value(hex[2 * i]);
    const int lo = hex_value(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) throw Error(Errc::MalformedHex, fmt::format("non-hex character near offset {}", 2 * i));
    out[i] = static_cast<std::uint8_t>((hi << 4) | lo);
  }
  return out;
}

std::vector<std::uint8_t> encode_bytes(const Message& message) {
  const auto v = validate(message);
  if (!v.ok()) throw Error(Errc::InvalidMessage, v.violations.front());
  BitWriter w;
  w.write(static_cast<std::uint64_t>(message_type(message)), 3);
  std::visit([&w](const auto& m) { encode_body(w, m); }, message);
  return w.finish();
}

Message decode_bytes(std::span<const std::uint8_t> bytes) {
  BitReader r(bytes);
  const auto type = r.read(3);
  Message message;
  switch (type) {
    case 1: message = decode_bsm(r); break;
    case 2: message = decode_spat(r); break;
    case 3: message = decode_map(r); break;
    default: throw Error(Errc::UnknownMsgType, fmt::format("msg_type {}", type));
  }
  if (r.remaining() >= 8) {
    throw Error(Errc::NonZeroPadding, fmt::format("{} trailing bits after frame", r.remaining()));
  }
  if (r.remaining() > 0 && r.read(static_cast<unsigned>(r.remaining())) != 0) {
    throw Error(Errc::NonZeroPadding, "padding bits are not zero");
  }
  const auto v = validate(message);
  if (!v.ok()) throw Error(Errc::FieldOutOfRange, v.violations.front());
  return message;
}

std::string encode_frame(const Message& message) { return to_hex(encode_bytes(message)); }

Message decode_frame(std::string_view payload_hex) { return decode_bytes(from_hex(payload_hex)); }

}  // namespace corridor
