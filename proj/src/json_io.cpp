#include "corridor/json_io.hpp"

#include <fmt/format.h>

#include "corridor/error.hpp"

namespace corridor {

namespace {

template <typename T>
json opt(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> opt_get(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->template get<T>();
}

}  // namespace

void to_json(json& j, const PathOffset& p) { j = json{{"dlat", p.dlat}, {"dlon", p.dlon}}; }

void from_json(const json& j, PathOffset& p) {
  j.at("dlat").get_to(p.dlat);
  j.at("dlon").get_to(p.dlon);
}

void to_json(json& j, const BsmCore& m) {
  j = json{{"temp_id", m.temp_id},
           {"sec_mark_ms", opt(m.sec_mark_ms)},
           {"latitude_deg", m.latitude_deg},
           {"longitude_deg", m.longitude_deg},
           {"elevation_cm", m.elevation_cm},
           {"speed_mps", opt(m.speed_mps)},
           {"heading_deg", opt(m.heading_deg)},
           {"steering_angle_deg", m.steering_angle_deg},
           {"accel_long_mps2", m.accel_long_mps2},
           {"accel_lat_mps2", m.accel_lat_mps2},
           {"accel_vert_g", m.accel_vert_g},
           {"brake_status", m.brake_status},
           {"transmission", static_cast<int>(m.transmission)},
           {"width_cm", m.width_cm},
           {"length_cm", m.length_cm},
           {"accuracy_raw", m.accuracy_raw},
           {"path_hist", m.path_hist},
           {"path_pred", opt(m.path_pred)}};
}

void from_json(const json& j, BsmCore& m) {
  j.at("temp_id").get_to(m.temp_id);
  m.sec_mark_ms = opt_get<std::uint16_t>(j, "sec_mark_ms");
  j.at("latitude_deg").get_to(m.latitude_deg);
  j.at("longitude_deg").get_to(m.longitude_deg);
  m.elevation_cm = j.value("elevation_cm", 0);
  m.speed_mps = opt_get<double>(j, "speed_mps");
  m.heading_deg = opt_get<double>(j, "heading_deg");
  m.steering_angle_deg = j.value("steering_angle_deg", 0.0);
  m.accel_long_mps2 = j.value("accel_long_mps2", 0.0);
  m.accel_lat_mps2 = j.value("accel_lat_mps2", 0.0);
  m.accel_vert_g = j.value("accel_vert_g", 0.0);
  m.brake_status = j.value("brake_status", std::uint8_t{0});
  m.transmission = static_cast<Transmission>(j.value("transmission", 0));
  m.width_cm = j.value("width_cm", std::uint16_t{0});
  m.length_cm = j.value("length_cm", std::uint16_t{0});
  m.accuracy_raw = j.value("accuracy_raw", std::uint8_t{0});
  m.path_hist = j.value("path_hist", std::vector<PathOffset>{});
  m.path_pred = opt_get<PathOffset>(j, "path_pred");
}

void to_json(json& j, const MovementState& m) {
  j = json{{"signal_group_id", m.signal_group_id},
           {"event_state", static_cast<int>(m.event_state)},
           {"min_end_time_mark", m.min_end_time_mark},
           {"max_end_time_mark", m.max_end_time_mark}};
}

void from_json(const json& j, MovementState& m) {
  j.at("signal_group_id").get_to(m.signal_group_id);
  m.event_state = static_cast<PhaseState>(j.at("event_state").get<int>());
  m.min_end_time_mark = j.value("min_end_time_mark", kTimeMarkUndefined);
  m.max_end_time_mark = j.value("max_end_time_mark", kTimeMarkUndefined);
}

void to_json(json& j, const SpatMessage& m) {
  j = json{{"intersection_id", m.intersection_id},
           {"moy", m.moy},
           {"d_second_ms", m.d_second_ms},
           {"movements", m.movements}};
}

void from_json(const json& j, SpatMessage& m) {
  j.at("intersection_id").get_to(m.intersection_id);
  j.at("moy").get_to(m.moy);
  j.at("d_second_ms").get_to(m.d_second_ms);
  j.at("movements").get_to(m.movements);
}

void to_json(json& j, const GeoPoint& p) {
  j = json{{"latitude_deg", p.latitude_deg}, {"longitude_deg", p.longitude_deg}, {"elevation_cm", p.elevation_cm}};
}

void from_json(const json& j, GeoPoint& p) {
  j.at("latitude_deg").get_to(p.latitude_deg);
  j.at("longitude_deg").get_to(p.longitude_deg);
  p.elevation_cm = j.value("elevation_cm", 0);
}

void to_json(json& j, const NodeOffset& n) { j = json{{"dx_cm", n.dx_cm}, {"dy_cm", n.dy_cm}}; }

void from_json(const json& j, NodeOffset& n) {
  j.at("dx_cm").get_to(n.dx_cm);
  j.at("dy_cm").get_to(n.dy_cm);
}

void to_json(json& j, const LaneDescriptor& l) {
  j = json{{"lane_id", l.lane_id},
           {"signal_group_id", l.signal_group_id},
           {"connecting_lane_id", l.connecting_lane_id},
           {"nodes", l.nodes}};
}

void from_json(const json& j, LaneDescriptor& l) {
  j.at("lane_id").get_to(l.lane_id);
  l.signal_group_id = j.value("signal_group_id", std::uint8_t{0});
  l.connecting_lane_id = j.value("connecting_lane_id", std::uint8_t{0});
  j.at("nodes").get_to(l.nodes);
}

void to_json(json& j, const MapMessage& m) {
  j = json{{"intersection_id", m.intersection_id},
           {"ref_point", m.ref_point},
           {"lane_width_cm", m.lane_width_cm},
           {"lanes", m.lanes}};
}

void from_json(const json& j, MapMessage& m) {
  j.at("intersection_id").get_to(m.intersection_id);
  j.at("ref_point").get_to(m.ref_point);
  j.at("lane_width_cm").get_to(m.lane_width_cm);
  m.lanes = j.value("lanes", std::vector<LaneDescriptor>{});
}

void to_json(json& j, const IntegratedRecord& r) {
  j = json{{"timestamp_epoch_ms", r.timestamp_epoch_ms},
           {"temp_id", r.temp_id},
           {"position", r.position},
           {"speed_mps", opt(r.speed_mps)},
           {"heading_deg", opt(r.heading_deg)},
           {"matched_intersection_id", opt(r.matched_intersection_id)},
           {"matched_lane_id", opt(r.matched_lane_id)},
           {"signal_group_id", opt(r.signal_group_id)},
           {"event_state", r.event_state ? json(static_cast<int>(*r.event_state)) : json(nullptr)},
           {"residual_phase_ms", opt(r.residual_phase_ms)},
           {"distance_to_stop_line_m", opt(r.distance_to_stop_line_m)},
           {"source_rsu_ids", r.source_rsu_ids}};
}

void from_json(const json& j, IntegratedRecord& r) {
  j.at("timestamp_epoch_ms").get_to(r.timestamp_epoch_ms);
  j.at("temp_id").get_to(r.temp_id);
  j.at("position").get_to(r.position);
  r.speed_mps = opt_get<double>(j, "speed_mps");
  r.heading_deg = opt_get<double>(j, "heading_deg");
  r.matched_intersection_id = opt_get<std::uint16_t>(j, "matched_intersection_id");
  r.matched_lane_id = opt_get<std::uint8_t>(j, "matched_lane_id");
  r.signal_group_id = opt_get<std::uint8_t>(j, "signal_group_id");
  if (auto s = opt_get<int>(j, "event_state")) r.event_state = static_cast<PhaseState>(*s);
  else r.event_state.reset();
  r.residual_phase_ms = opt_get<std::int64_t>(j, "residual_phase_ms");
  r.distance_to_stop_line_m = opt_get<double>(j, "distance_to_stop_line_m");
  r.source_rsu_ids = j.value("source_rsu_ids", std::vector<std::string>{});
}

json message_to_json(const Message& message) {
  json j = std::visit([](const auto& m) { return json(m); }, message);
  switch (message_type(message)) {
    case MsgType::Bsm: j["msg_type"] = "bsm"; break;
    case MsgType::Spat: j["msg_type"] = "spat"; break;
    case MsgType::Map: j["msg_type"] = "map"; break;
  }
  return j;
}

Message message_from_json(const json& j) {
  const auto type = j.at("msg_type").get<std::string>();
  if (type == "bsm") return j.get<BsmCore>();
  if (type == "spat") return j.get<SpatMessage>();
  if (type == "map") return j.get<MapMessage>();
  throw Error(Errc::UnknownMsgType, fmt::format("msg_type \"{}\"", type));
}

void to_json(json& j, const FrameLogEntry& f) {
  j = json{{"rsu_id", f.rsu_id}, {"received_at_ms", f.received_at_ms}, {"payload_hex", f.payload_hex}};
}

void from_json(const json& j, FrameLogEntry& f) {
  j.at("rsu_id").get_to(f.rsu_id);
  j.at("received_at_ms").get_to(f.received_at_ms);
  j.at("payload_hex").get_to(f.payload_hex);
}

std::string to_ndjson_line(const json& j) { return j.dump() + "\n"; }

}  // namespace corridor
