#pragma once

// NDJSON forms of the message types. Field names are the snake_case member
// names; optionals serialize as null. Messages carry a "msg_type"
// discriminator ("bsm", "spat", "map") when written through the Message
// variant.

#include "json.hpp"

#include "corridor/messages.hpp"

namespace corridor {

using json = nlohmann::json;

void to_json(json& j, const PathOffset& p);
void from_json(const json& j, PathOffset& p);
void to_json(json& j, const BsmCore& m);
void from_json(const json& j, BsmCore& m);
void to_json(json& j, const MovementState& m);
void from_json(const json& j, MovementState& m);
void to_json(json& j, const SpatMessage& m);
void from_json(const json& j, SpatMessage& m);
void to_json(json& j, const GeoPoint& p);
void from_json(const json& j, GeoPoint& p);
void to_json(json& j, const NodeOffset& n);
void from_json(const json& j, NodeOffset& n);
void to_json(json& j, const LaneDescriptor& l);
void from_json(const json& j, LaneDescriptor& l);
void to_json(json& j, const MapMessage& m);
void from_json(const json& j, MapMessage& m);
void to_json(json& j, const IntegratedRecord& r);
void from_json(const json& j, IntegratedRecord& r);

json message_to_json(const Message& message);
Message message_from_json(const json& j);

// Frame-log line: {"rsu_id", "received_at_ms", "payload_hex"}.
struct FrameLogEntry {
  std::string rsu_id;
  std::int64_t received_at_ms = 0;
  std::string payload_hex;
  bool operator==(const FrameLogEntry&) const = default;
};

void to_json(json& j, const FrameLogEntry& f);
void from_json(const json& j, FrameLogEntry& f);

// One compact JSON object per line; key order is fixed so output is stable.
std::string to_ndjson_line(const json& j);

}  // namespace corridor
