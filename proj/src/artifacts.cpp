#include "corridor/artifacts.hpp"

#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include <fmt/format.h>

#include "corridor/codec.hpp"
#include "corridor/error.hpp"
#include "corridor/feedback.hpp"
#include "corridor/lanegeo.hpp"

namespace corridor {

namespace fs = std::filesystem;

const json& format_versions() {
  static const json v = {
      {"frames.ndjson", "frame-log/1"},
      {"integrated.ndjson", "integrated-record/1"},
      {"feedback.ndjson", "feedback/1"},
      {"integrity.ndjson", "integrity/1"},
      {"dead_letters.ndjson", "dead-letter/1"},
      {"trajectory.geojson", "trajectory-geojson/1"},
      {"lanes.geojson", "lanes-geojson/1"},
      {"counters.json", "counters/1"},
      {"summary.json", "simulation-summary/1"},
      {"stats.json", "stats/1"},
      {"queue.csv", "queue-csv/1"},
      {"intersections.csv", "intersections-csv/1"},
      {"archive", "archive-segments/1"},
      {"manifest.json", "manifest/1"},
  };
  return v;
}

namespace {

json position(const GeoPoint& p) {
  return json::array({p.longitude_deg, p.latitude_deg, p.elevation_cm / 100.0});
}

json opt_json(const auto& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json trajectory_geojson(const std::vector<IntegratedRecord>& records) {
  json features = json::array();
  std::map<std::uint32_t, std::vector<const IntegratedRecord*>> by_vehicle;
  for (const auto& r : records) {
    by_vehicle[r.temp_id].push_back(&r);
    features.push_back({{"type", "Feature"},
                        {"geometry", {{"type", "Point"}, {"coordinates", position(r.position)}}},
                        {"properties",
                         {{"temp_id", r.temp_id},
                          {"t_ms", r.timestamp_epoch_ms},
                          {"speed_mps", opt_json(r.speed_mps)},
                          {"heading_deg", opt_json(r.heading_deg)},
                          {"intersection_id", opt_json(r.matched_intersection_id)},
                          {"lane_id", opt_json(r.matched_lane_id)},
                          {"event_state", r.event_state ? json(static_cast<int>(*r.event_state)) : json(nullptr)},
                          {"residual_phase_ms", opt_json(r.residual_phase_ms)}}}});
  }
  for (const auto& [id, recs] : by_vehicle) {
    json coords = json::array(), speeds = json::array(), times = json::array();
    for (const auto* r : recs) {
      coords.push_back(position(r->position));
      speeds.push_back(opt_json(r->speed_mps));
      times.push_back(r->timestamp_epoch_ms);
    }
    features.push_back({{"type", "Feature"},
                        {"geometry", {{"type", "LineString"}, {"coordinates", coords}}},
                        {"properties", {{"temp_id", id}, {"speeds_mps", speeds}, {"t_ms", times}}}});
  }
  return {{"type", "FeatureCollection"}, {"features", features}};
}

json lanes_geojson(const std::vector<MapMessage>& maps) {
  json features = json::array();
  for (const auto& map : maps) {
    std::optional<IntersectionGeometry> geo;
    try {
      geo.emplace(map);
    } catch (const Error&) {
      continue;
    }
    for (const auto& lane : geo->lanes) {
      json ring = json::array();
      for (const auto& v : lane.boundary) ring.push_back(position(geo->frame.to_geo(v)));
      if (!lane.boundary.empty()) ring.push_back(ring.front());
      json props = {{"intersection_id", lane.intersection_id},
                    {"lane_id", lane.lane_id},
                    {"signal_group_id", lane.signal_group_id},
                    {"kind", lane.signal_group_id ? "ingress" : "egress"},
                    {"movement", movement_label(*geo, lane)},
                    {"direction_deg", lane.direction_deg}};
      features.push_back({{"type", "Feature"},
                          {"geometry", {{"type", "Polygon"}, {"coordinates", json::array({ring})}}},
                          {"properties", props}});
      props["kind"] = "stop_line";
      features.push_back({{"type", "Feature"},
                          {"geometry",
                           {{"type", "LineString"},
                            {"coordinates", json::array({position(geo->frame.to_geo(lane.stop_line.a)),
                                                         position(geo->frame.to_geo(lane.stop_line.b))})}}},
                          {"properties", props}});
    }
  }
  return {{"type", "FeatureCollection"}, {"features", features}};
}

std::string queue_csv(const std::vector<QueuePoint>& series) {
  std::string out = "t_ms,intersection_id,signal_group_id,queue_length_m\n";
  for (const auto& q : series) {
    out += fmt::format("{},{},{},{}\n", q.second_epoch_ms, q.intersection_id, q.signal_group_id, q.queue_length_m);
  }
  return out;
}

// ---- checks ----

namespace {

struct Bad {
  std::string why;
};

void need(bool ok, const std::string& why) {
  if (!ok) throw Bad{why};
}

const json& field(const json& j, const char* key) {
  need(j.is_object() && j.contains(key), fmt::format("missing '{}'", key));
  return j.at(key);
}

void need_int(const json& j, const char* key) {
  need(field(j, key).is_number_integer(), fmt::format("'{}' is not an integer", key));
}

void need_string(const json& j, const char* key) {
  need(field(j, key).is_string(), fmt::format("'{}' is not a string", key));
}

void need_number_or_null(const json& j, const char* key) {
  const auto& v = field(j, key);
  need(v.is_number() || v.is_null(), fmt::format("'{}' is not a number", key));
}

json parse_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  need(!j.is_discarded(), "not JSON");
  return j;
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  need(static_cast<bool>(in), "cannot read");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

template <class Fn>
std::size_t each_line(const fs::path& file, Fn fn) {
  std::ifstream in(file, std::ios::binary);
  need(static_cast<bool>(in), "cannot read");
  std::string line;
  std::size_t n = 0, lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      fn(parse_json(line));
    } catch (const Bad& b) {
      throw Bad{fmt::format("line {}: {}", lineno, b.why)};
    } catch (const std::exception& e) {
      throw Bad{fmt::format("line {}: {}", lineno, e.what())};
    }
    ++n;
  }
  return n;
}

void check_record(const json& j) {
  static const std::vector<const char*> keys{"timestamp_epoch_ms", "temp_id", "position", "speed_mps",
                                             "heading_deg", "matched_intersection_id", "matched_lane_id",
                                             "signal_group_id", "event_state", "residual_phase_ms",
                                             "distance_to_stop_line_m", "source_rsu_ids"};
  for (const char* k : keys) field(j, k);
  need(j.size() == keys.size(), "unexpected keys");
  need_int(j, "timestamp_epoch_ms");
  need_int(j, "temp_id");
  need(j["source_rsu_ids"].is_array() && !j["source_rsu_ids"].empty(), "source_rsu_ids empty");
  const auto& es = j["event_state"];
  need(es.is_null() || (es.is_number_integer() && es.get<int>() >= 0 && es.get<int>() <= 9), "event_state range");
  (void)j.get<IntegratedRecord>();
}

void check_feedback(const json& j) {
  for (const char* k : {"type", "timestamp", "timestamp_epoch_ms", "intersection", "signal_group", "vehicle_id", "payload"}) {
    field(j, k);
  }
  need_int(j, "timestamp_epoch_ms");
  (void)j.get<FeedbackMessage>();
}

void check_position(const json& p) {
  need(p.is_array() && (p.size() == 2 || p.size() == 3), "bad position");
  for (const auto& c : p) need(c.is_number(), "non-numeric coordinate");
  need(std::abs(p[0].get<double>()) <= 180 && std::abs(p[1].get<double>()) <= 90, "coordinate out of range");
}

std::size_t check_features(const json& j, bool trajectory) {
  need(field(j, "type") == "FeatureCollection", "not a FeatureCollection");
  const auto& features = field(j, "features");
  need(features.is_array(), "features is not an array");
  for (const auto& f : features) {
    need(field(f, "type") == "Feature", "not a Feature");
    const auto& g = field(f, "geometry");
    const auto& props = field(f, "properties");
    need(props.is_object(), "properties is not an object");
    const auto type = field(g, "type").get<std::string>();
    const auto& coords = field(g, "coordinates");
    if (type == "Point") {
      check_position(coords);
    } else if (type == "LineString") {
      need(coords.is_array() && !coords.empty(), "empty LineString");
      for (const auto& p : coords) check_position(p);
    } else if (type == "Polygon") {
      need(!trajectory, "Polygon in a trajectory");
      need(coords.is_array() && coords.size() == 1, "Polygon must have one ring");
      const auto& ring = coords[0];
      need(ring.size() >= 4 && ring.front() == ring.back(), "ring not closed");
      for (const auto& p : ring) check_position(p);
    } else {
      need(false, "geometry " + type);
    }
    if (trajectory) {
      need_int(props, "temp_id");
      if (type == "Point") {
        need_int(props, "t_ms");
        need_number_or_null(props, "speed_mps");
      } else {
        need(field(props, "speeds_mps").size() == coords.size(), "speeds_mps length");
      }
    } else {
      need_int(props, "intersection_id");
      need_int(props, "lane_id");
    }
  }
  return features.size();
}

std::size_t check_csv(const fs::path& file, const std::string& header) {
  std::ifstream in(file, std::ios::binary);
  need(static_cast<bool>(in), "cannot read");
  std::string line;
  need(static_cast<bool>(std::getline(in, line)) && line == header, "bad header");
  const auto columns = std::count(header.begin(), header.end(), ',') + 1;
  static const std::regex number(R"(-?\d+(\.\d+)?([eE][-+]?\d+)?)");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::stringstream s(line);
    std::string cell;
    long n = 0;
    while (std::getline(s, cell, ',')) {
      need(std::regex_match(cell, number), fmt::format("row {}: '{}' is not a number", rows, cell));
      ++n;
    }
    need(n == columns, fmt::format("row {}: {} columns", rows, n));
  }
  return rows;
}

std::size_t check_segment(const fs::path& file) {
  static const std::regex name(R"(seg-\d{10}\.ndjson)");
  need(std::regex_match(file.filename().string(), name), "bad segment name");
  const auto kind = file.parent_path().filename().string();
  const auto seg = file.filename().string();
  return each_line(file, [&](const json& j) {
    if (kind == "feedback") {
      check_feedback(j);
    } else {
      need(kind == "records" || kind == "relevant", "unknown segment kind " + kind);
      check_record(j);
    }
    need(ArchiveStore::segment_name(j.at("timestamp_epoch_ms").get<std::int64_t>()) == seg, "record outside its hour");
  });
}

}  // namespace

FileCheck check_artifact(const fs::path& file, const fs::path& root) {
  FileCheck c;
  c.file = root.empty() ? file.filename().string() : fs::relative(file, root).string();
  const auto name = file.filename().string();
  try {
    if (name == "frames.ndjson") {
      c.items = each_line(file, [](const json& j) {
        auto f = parse_frame_line(j.dump());
        need(f.has_value(), "not a frame");
        (void)decode_frame(f->payload_hex);
      });
    } else if (name == "integrated.ndjson") {
      c.items = each_line(file, check_record);
    } else if (name == "feedback.ndjson") {
      c.items = each_line(file, check_feedback);
    } else if (name == "integrity.ndjson") {
      c.items = each_line(file, [](const json& j) {
        need_string(j, "key");
        need_string(j, "field");
        need(field(j, "dissenting_rsus").is_array(), "dissenting_rsus");
      });
    } else if (name == "dead_letters.ndjson") {
      c.items = each_line(file, [](const json& j) {
        need_string(j, "worker_id");
        need_string(j, "reason");
        (void)field(j, "frame").get<FrameLogEntry>();
      });
    } else if (name == "trajectory.geojson") {
      c.items = check_features(parse_json(slurp(file)), true);
    } else if (name == "lanes.geojson") {
      c.items = check_features(parse_json(slurp(file)), false);
    } else if (name == "counters.json") {
      auto j = parse_json(slurp(file));
      need_int(j, "frames");
      need(field(j, "workers").is_array(), "workers");
      need(field(j, "central").is_object(), "central");
      c.items = 1;
    } else if (name == "summary.json") {
      auto j = parse_json(slurp(file));
      need(field(j, "frames").is_object(), "frames");
      need(field(j, "vehicles").is_array(), "vehicles");
      need_int(j, "ticks");
      c.items = 1;
    } else if (name == "stats.json") {
      auto j = parse_json(slurp(file));
      need_int(j, "records");
      need_int(j, "vehicles");
      need(field(j, "queue_series").is_array(), "queue_series");
      need(field(j, "intersections").is_array(), "intersections");
      need(field(j, "feedback").is_object(), "feedback");
      c.items = 1;
    } else if (name == "queue.csv") {
      c.items = check_csv(file, "t_ms,intersection_id,signal_group_id,queue_length_m");
    } else if (name == "intersections.csv") {
      c.items = check_csv(file, "intersection_id,records,vehicles,speed_p50,speed_p85,speed_p95,speed_max");
    } else if (name == "manifest.json") {
      auto j = parse_json(slurp(file));
      need_string(j, "subcommand");
      need_string(j, "version");
      need(field(j, "formats").is_object(), "formats");
      need(field(j, "outputs").is_array(), "outputs");
      for (const auto& o : j["outputs"]) {
        need(o.is_string() && fs::exists(file.parent_path() / o.get<std::string>()), "missing output " + o.dump());
      }
      c.items = j["outputs"].size();
    } else if (file.extension() == ".ndjson" && name.starts_with("seg-")) {
      c.items = check_segment(file);
    } else {
      need(false, "unknown artifact");
    }
  } catch (const Bad& b) {
    c.ok = false;
    c.reason = b.why;
  } catch (const std::exception& e) {
    c.ok = false;
    c.reason = e.what();
  }
  return c;
}

std::vector<FileCheck> selfcheck(const fs::path& dir) {
  std::vector<FileCheck> out;
  for (const auto& [name, _] : format_versions().items()) {
    if (name != "archive" && fs::is_regular_file(dir / name)) out.push_back(check_artifact(dir / name, dir));
  }
  for (const char* kind : {"records", "relevant", "feedback"}) {
    const auto sub = dir / "archive" / kind;
    if (!fs::is_directory(sub)) continue;
    std::vector<fs::path> segs;
    for (const auto& e : fs::directory_iterator(sub)) segs.push_back(e.path());
    std::sort(segs.begin(), segs.end());
    for (const auto& s : segs) out.push_back(check_artifact(s, dir));
  }
  return out;
}

}  // namespace corridor
