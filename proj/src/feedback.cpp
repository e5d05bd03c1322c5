#include "corridor/feedback.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "corridor/error.hpp"

namespace corridor {

namespace {

constexpr const char* kTypeNames[] = {"SignalTimingAdjustment", "VehicleAdvisory", "IncidentNotification"};
constexpr const char* kIncidentNames[] = {"overspeed", "hard_braking", "erratic_speed", "lane_deviation",
                                          "wrong_way"};

double angle_between(double a_deg, double b_deg) {
  double d = std::fmod(std::abs(a_deg - b_deg), 360.0);
  return d > 180.0 ? 360.0 - d : d;
}

}  // namespace

const char* feedback_type_name(FeedbackType type) noexcept { return kTypeNames[static_cast<int>(type)]; }
const char* incident_kind_name(IncidentKind kind) noexcept { return kIncidentNames[static_cast<int>(kind)]; }

double FeedbackConfig::limit_for(std::uint16_t intersection_id) const {
  auto it = speed_limits.find(intersection_id);
  return it == speed_limits.end() ? speed_limit_mps : it->second;
}

void to_json(json& j, const FeedbackMessage& m) {
  json payload;
  if (const auto* a = std::get_if<AdvisoryPayload>(&m.payload)) {
    payload = {{"current_speed_mps", a->current_speed_mps},
               {"advisory_speed_mps", a->advisory_speed_mps},
               {"distance_to_stop_line_m", a->distance_to_stop_line_m},
               {"remaining_ms", a->remaining_ms}};
  } else if (const auto* t = std::get_if<TimingPayload>(&m.payload)) {
    payload = {{"queue_length_m", t->queue_length_m},
               {"remaining_red_s", t->remaining_red_s},
               {"recommended_extension_s", t->recommended_extension_s}};
  } else {
    const auto& i = std::get<IncidentPayload>(m.payload);
    payload = {{"incident_kind", incident_kind_name(i.kind)}, {"details", i.details}};
  }
  j = json{{"type", feedback_type_name(m.type())},
           {"timestamp", format_iso8601(m.timestamp_epoch_ms)},
           {"timestamp_epoch_ms", m.timestamp_epoch_ms},
           {"intersection", m.intersection_id},
           {"signal_group", m.signal_group_id ? json(*m.signal_group_id) : json(nullptr)},
           {"vehicle_id", m.vehicle_id ? json(*m.vehicle_id) : json(nullptr)},
           {"payload", std::move(payload)}};
}

void from_json(const json& j, FeedbackMessage& m) {
  m.timestamp_epoch_ms = j.at("timestamp_epoch_ms").get<std::int64_t>();
  m.intersection_id = j.at("intersection").get<std::uint16_t>();
  m.signal_group_id = j.at("signal_group").is_null() ? std::nullopt
                                                     : std::optional(j.at("signal_group").get<std::uint8_t>());
  m.vehicle_id = j.at("vehicle_id").is_null() ? std::nullopt : std::optional(j.at("vehicle_id").get<std::uint32_t>());
  const auto type = j.at("type").get<std::string>();
  const auto& p = j.at("payload");
  if (type == kTypeNames[0]) {
    m.payload = TimingPayload{p.at("queue_length_m").get<double>(), p.at("remaining_red_s").get<double>(),
                              p.at("recommended_extension_s").get<double>()};
  } else if (type == kTypeNames[1]) {
    m.payload = AdvisoryPayload{p.at("current_speed_mps").get<double>(), p.at("advisory_speed_mps").get<double>(),
                                p.at("distance_to_stop_line_m").get<double>(),
                                p.at("remaining_ms").get<std::int64_t>()};
  } else if (type == kTypeNames[2]) {
    IncidentPayload inc;
    const auto kind = p.at("incident_kind").get<std::string>();
    const auto* it = std::find_if(std::begin(kIncidentNames), std::end(kIncidentNames),
                                  [&](const char* n) { return kind == n; });
    if (it == std::end(kIncidentNames)) throw Error(Errc::InvalidMessage, fmt::format("incident kind '{}'", kind));
    inc.kind = static_cast<IncidentKind>(it - std::begin(kIncidentNames));
    inc.details = p.at("details");
    m.payload = inc;
  } else {
    throw Error(Errc::InvalidMessage, fmt::format("feedback type '{}'", type));
  }
}

void to_json(json& j, const FeedbackConfig& c) {
  json limits = json::object();
  for (const auto& [id, v] : c.speed_limits) limits[std::to_string(id)] = v;
  j = json{{"beta", c.beta},
           {"speed_limit_mps", c.speed_limit_mps},
           {"speed_limits", limits},
           {"stopped_speed_mps", c.stopped_speed_mps},
           {"queue_threshold_m", c.queue_threshold_m},
           {"red_threshold_s", c.red_threshold_s},
           {"extension_s", c.extension_s},
           {"hard_braking_mps2", c.hard_braking_mps2},
           {"erratic_std_mps", c.erratic_std_mps},
           {"erratic_window_ms", c.erratic_window_ms},
           {"wrong_way_deg", c.wrong_way_deg},
           {"lane_deviation_radius_m", c.lane_deviation_radius_m},
           {"advisory_interval_ms", c.advisory_interval_ms},
           {"queue_staleness_ms", c.queue_staleness_ms},
           {"history_size", c.history_size},
           {"rules",
            {{"advisories", c.advisories},
             {"timing", c.timing},
             {"overspeed", c.overspeed},
             {"hard_braking", c.hard_braking},
             {"erratic_speed", c.erratic_speed},
             {"lane_deviation", c.lane_deviation},
             {"wrong_way", c.wrong_way}}}};
}

void from_json(const json& j, FeedbackConfig& c) {
  c.beta = j.value("beta", c.beta);
  c.speed_limit_mps = j.value("speed_limit_mps", c.speed_limit_mps);
  if (j.contains("speed_limits")) {
    c.speed_limits.clear();
    for (const auto& [k, v] : j.at("speed_limits").items()) {
      c.speed_limits[static_cast<std::uint16_t>(std::stoul(k))] = v.get<double>();
    }
  }
  c.stopped_speed_mps = j.value("stopped_speed_mps", c.stopped_speed_mps);
  c.queue_threshold_m = j.value("queue_threshold_m", c.queue_threshold_m);
  c.red_threshold_s = j.value("red_threshold_s", c.red_threshold_s);
  c.extension_s = j.value("extension_s", c.extension_s);
  c.hard_braking_mps2 = j.value("hard_braking_mps2", c.hard_braking_mps2);
  c.erratic_std_mps = j.value("erratic_std_mps", c.erratic_std_mps);
  c.erratic_window_ms = j.value("erratic_window_ms", c.erratic_window_ms);
  c.wrong_way_deg = j.value("wrong_way_deg", c.wrong_way_deg);
  c.lane_deviation_radius_m = j.value("lane_deviation_radius_m", c.lane_deviation_radius_m);
  c.advisory_interval_ms = j.value("advisory_interval_ms", c.advisory_interval_ms);
  c.queue_staleness_ms = j.value("queue_staleness_ms", c.queue_staleness_ms);
  c.history_size = j.value("history_size", c.history_size);
  if (c.beta < 0.0 || c.beta > 1.0) throw Error(Errc::InvalidConfig, "beta must lie in [0, 1]");
  if (c.history_size < 2) throw Error(Errc::InvalidConfig, "history_size must be at least 2");
  if (j.contains("rules")) {
    const auto& r = j.at("rules");
    c.advisories = r.value("advisories", c.advisories);
    c.timing = r.value("timing", c.timing);
    c.overspeed = r.value("overspeed", c.overspeed);
    c.hard_braking = r.value("hard_braking", c.hard_braking);
    c.erratic_speed = r.value("erratic_speed", c.erratic_speed);
    c.lane_deviation = r.value("lane_deviation", c.lane_deviation);
    c.wrong_way = r.value("wrong_way", c.wrong_way);
  }
}

std::optional<AdvisoryPayload> advisory_speed(const IntegratedRecord& record, const SyncedSignalState& signal,
                                              const FeedbackConfig& cfg) {
  if (!record.matched_lane_id || !record.distance_to_stop_line_m || !record.speed_mps || !signal.residual_phase_ms) {
    return std::nullopt;
  }
  const double v = *record.speed_mps;
  const double d = *record.distance_to_stop_line_m;
  const double t = static_cast<double>(*signal.residual_phase_ms) / 1000.0;
  AdvisoryPayload out{v, 0.0, d, *signal.residual_phase_ms};
  if (signal.event_state == PhaseState::ProtectedMovementAllowed) {
    if (v > 0.0 && d / v > t) {
      out.advisory_speed_mps = cfg.beta * v;
      return out;
    }
    return std::nullopt;
  }
  if (signal.event_state == PhaseState::StopAndRemain && v > cfg.stopped_speed_mps && t > 0.0) {
    out.advisory_speed_mps = std::min(cfg.limit_for(signal.intersection_id), d / t);
    return out;
  }
  return std::nullopt;
}

double queue_estimate(const std::vector<IntegratedRecord>& records, const FeedbackConfig& cfg) {
  double queue = 0.0;
  for (const auto& r : records) {
    if (r.speed_mps && *r.speed_mps < cfg.stopped_speed_mps && r.distance_to_stop_line_m) {
      queue = std::max(queue, *r.distance_to_stop_line_m);
    }
  }
  return queue;
}

std::optional<TimingPayload> signal_timing_recommendation(double queue_m, const SyncedSignalState& signal,
                                                          const FeedbackConfig& cfg) {
  if (signal.event_state != PhaseState::StopAndRemain || !signal.residual_phase_ms) return std::nullopt;
  const double red_s = static_cast<double>(*signal.residual_phase_ms) / 1000.0;
  if (queue_m < cfg.queue_threshold_m || red_s < cfg.red_threshold_s) return std::nullopt;
  // Reported at centimetre resolution.
  return TimingPayload{std::round(queue_m * 100.0) / 100.0, red_s, cfg.extension_s};
}

std::vector<Vec2> intersection_box(const IntersectionGeometry& geometry) {
  std::vector<Vec2> pts;
  for (const auto& lane : geometry.lanes) {
    pts.push_back(lane.stop_line.a);
    pts.push_back(lane.stop_line.b);
  }
  try {
    return convex_hull(pts);
  } catch (const Error&) {
    return {};
  }
}

std::vector<IncidentPayload> detect_incidents(const VehicleHistory& history, const LaneIndex* lanes,
                                              const FeedbackConfig& cfg) {
  std::vector<IncidentPayload> out;
  if (history.empty()) return out;
  const auto& rec = history.back();

  if (cfg.overspeed && rec.speed_mps) {
    const double limit = cfg.limit_for(rec.matched_intersection_id.value_or(0));
    if (*rec.speed_mps > limit) {
      out.push_back({IncidentKind::Overspeed,
                     {{"speed_mps", *rec.speed_mps},
                      {"speed_limit_mps", limit},
                      {"advice", fmt::format("reduce speed to {:.1f} m/s", limit)}}});
    }
  }

  if (cfg.hard_braking && history.size() >= 2) {
    const auto& prev = history[history.size() - 2];
    const auto dt = rec.timestamp_epoch_ms - prev.timestamp_epoch_ms;
    if (dt > 0 && rec.speed_mps && prev.speed_mps) {
      const double decel = (*rec.speed_mps - *prev.speed_mps) / (static_cast<double>(dt) / 1000.0);
      if (decel <= cfg.hard_braking_mps2) out.push_back({IncidentKind::HardBraking, {{"decel_mps2", decel}}});
    }
  }

  if (cfg.erratic_speed && history.size() >= 2) {
    std::vector<double> speeds;
    for (const auto& r : history) {
      if (r.speed_mps && rec.timestamp_epoch_ms - r.timestamp_epoch_ms <= cfg.erratic_window_ms) {
        speeds.push_back(*r.speed_mps);
      }
    }
    if (speeds.size() >= 2) {
      double mean = 0.0;
      for (double s : speeds) mean += s;
      mean /= static_cast<double>(speeds.size());
      double var = 0.0;
      for (double s : speeds) var += (s - mean) * (s - mean);
      const double sd = std::sqrt(var / static_cast<double>(speeds.size()));
      if (sd > cfg.erratic_std_mps) out.push_back({IncidentKind::ErraticSpeed, {{"speed_std_mps", sd}}});
    }
  }

  if (!lanes) return out;

  if (cfg.lane_deviation && !rec.matched_lane_id) {
    for (const auto& [id, geometry] : lanes->intersections()) {
      const Vec2 p = geometry.frame.to_xy(rec.position.latitude_deg, rec.position.longitude_deg);
      if (norm(p) > cfg.lane_deviation_radius_m) continue;
      const auto box = intersection_box(geometry);
      if (!box.empty() && point_in_convex(p, box)) continue;
      out.push_back({IncidentKind::LaneDeviation, {{"intersection_id", id}, {"distance_to_ref_m", norm(p)}}});
      break;
    }
  }

  if (cfg.wrong_way && rec.matched_lane_id && rec.matched_intersection_id && rec.heading_deg) {
    const auto* geometry = lanes->find(*rec.matched_intersection_id);
    const auto* lane = geometry ? geometry->find_lane(*rec.matched_lane_id) : nullptr;
    if (lane) {
      // Egress lanes (no signal group) are travelled away from the stop line.
      const double travel = lane->signal_group_id == 0 ? lane->direction_deg + 180.0 : lane->direction_deg;
      const double diff = angle_between(*rec.heading_deg, travel);
      if (diff > cfg.wrong_way_deg) {
        out.push_back({IncidentKind::WrongWay, {{"heading_deg", *rec.heading_deg}, {"lane_bearing_deg",
                                                                                    std::fmod(travel, 360.0)}}});
      }
    }
  }
  return out;
}

FeedbackEngine::FeedbackEngine(FeedbackConfig cfg) : cfg_(std::move(cfg)) {}

void FeedbackEngine::observe_map(const MapMessage& map) {
  try {
    lanes_.update(map);
  } catch (const Error&) {
  }
}

std::vector<FeedbackMessage> FeedbackEngine::on_record(const IntegratedRecord& rec) {
  std::vector<FeedbackMessage> out;
  auto& hist = history_[rec.temp_id];
  if (!hist.empty() && rec.timestamp_epoch_ms < hist.back().timestamp_epoch_ms) return out;
  hist.push_back(rec);
  while (hist.size() > cfg_.history_size) hist.pop_front();
  current_[rec.temp_id] = rec;

  const std::uint16_t intersection = rec.matched_intersection_id.value_or(0);

  if (cfg_.advisories && rec.signal_group_id && rec.event_state) {
    SyncedSignalState signal{intersection, *rec.signal_group_id, *rec.event_state, rec.timestamp_epoch_ms,
                             rec.residual_phase_ms, std::nullopt};
    if (auto adv = advisory_speed(rec, signal, cfg_)) {
      auto last = last_advisory_.find(rec.temp_id);
      if (last == last_advisory_.end() || rec.timestamp_epoch_ms - last->second >= cfg_.advisory_interval_ms) {
        last_advisory_[rec.temp_id] = rec.timestamp_epoch_ms;
        out.push_back({rec.timestamp_epoch_ms, intersection, rec.signal_group_id, rec.temp_id, *adv});
      }
    }
  }

  if (cfg_.timing && rec.signal_group_id && rec.event_state == PhaseState::StopAndRemain && rec.residual_phase_ms) {
    const GroupKey key{intersection, *rec.signal_group_id};
    auto until = timing_red_until_.find(key);
    if (until == timing_red_until_.end() || rec.timestamp_epoch_ms >= until->second) {
      std::vector<IntegratedRecord> group;
      for (const auto& [id, r] : current_) {
        if (r.matched_intersection_id == rec.matched_intersection_id && r.signal_group_id == rec.signal_group_id &&
            rec.timestamp_epoch_ms - r.timestamp_epoch_ms <= cfg_.queue_staleness_ms) {
          group.push_back(r);
        }
      }
      SyncedSignalState signal{intersection, *rec.signal_group_id, PhaseState::StopAndRemain,
                               rec.timestamp_epoch_ms, rec.residual_phase_ms, std::nullopt};
      if (auto adj = signal_timing_recommendation(queue_estimate(group, cfg_), signal, cfg_)) {
        timing_red_until_[key] = rec.timestamp_epoch_ms + *rec.residual_phase_ms;
        out.push_back({rec.timestamp_epoch_ms, intersection, rec.signal_group_id, std::nullopt, *adj});
      }
    }
  }

  const auto incidents = detect_incidents(hist, &lanes_, cfg_);
  for (int k = 0; k < 5; ++k) {
    const auto kind = static_cast<IncidentKind>(k);
    const auto it = std::find_if(incidents.begin(), incidents.end(), [&](const auto& i) { return i.kind == kind; });
    const auto active_key = std::make_pair(rec.temp_id, kind);
    if (it == incidents.end()) {
      active_incidents_.erase(active_key);
    } else if (active_incidents_.insert(active_key).second) {
      out.push_back({rec.timestamp_epoch_ms, intersection, rec.signal_group_id, rec.temp_id, *it});
    }
  }
  emitted_ += out.size();
  return out;
}

std::vector<FeedbackMessage> generate_feedback(const std::vector<MapMessage>& maps,
                                               const std::vector<IntegratedRecord>& records,
                                               const FeedbackConfig& cfg) {
  FeedbackEngine engine(cfg);
  for (const auto& m : maps) engine.observe_map(m);
  std::vector<FeedbackMessage> out;
  for (const auto& r : records) {
    for (auto& f : engine.on_record(r)) out.push_back(std::move(f));
  }
  return out;
}

}  // namespace corridor
