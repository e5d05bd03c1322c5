#include "corridor/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "corridor/codec.hpp"
#include "corridor/error.hpp"
#include "corridor/fixtures.hpp"
#include "corridor/fusion.hpp"
#include "corridor/timesync.hpp"

namespace corridor {

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int64_t seconds_to_ms(double s) { return std::llround(s * 1000.0); }

[[noreturn]] void invalid(const std::string& where, const std::string& what) {
  throw Error(Errc::ScenarioInvalid, where.empty() ? what : fmt::format("{}: {}", where, what));
}

double quantize(FieldKind kind, double v) { return raw_to_engineering(kind, engineering_to_raw(kind, v)); }

}  // namespace

// ---- signal control ----

std::int64_t PhasePlan::cycle_ms() const {
  std::int64_t c = 0;
  for (const auto& p : phases) c += p.green_ms + p.yellow_ms + p.all_red_ms;
  return c;
}

std::vector<std::uint8_t> PhasePlan::groups() const {
  std::set<std::uint8_t> s;
  for (const auto& p : phases) s.insert(p.green_groups.begin(), p.green_groups.end());
  return {s.begin(), s.end()};
}

void check_plan(const PhasePlan& plan) {
  if (plan.phases.empty()) throw Error(Errc::InvalidConfig, fmt::format("plan {} has no phases", plan.intersection_id));
  std::set<std::uint8_t> seen;
  for (const auto& p : plan.phases) {
    if (p.green_groups.empty()) throw Error(Errc::InvalidConfig, "phase without green groups");
    if (p.green_ms <= 0 || p.yellow_ms <= 0 || p.all_red_ms <= 0) {
      throw Error(Errc::InvalidConfig, "phase durations must be positive");
    }
    if (p.green_ms % 100 || p.yellow_ms % 100 || p.all_red_ms % 100) {
      throw Error(Errc::InvalidConfig, "phase durations must be whole tenths of a second");
    }
    for (auto g : p.green_groups) {
      if (g == 0) throw Error(Errc::InvalidConfig, "signal group 0 is reserved");
      if (!seen.insert(g).second) throw Error(Errc::InvalidConfig, fmt::format("group {} green in two phases", g));
    }
  }
  if (plan.offset_ms % 100) throw Error(Errc::InvalidConfig, "offset must be whole tenths of a second");
}

void to_json(json& j, const PhasePlan& p) {
  json phases = json::array();
  for (const auto& ph : p.phases) {
    phases.push_back({{"green", ph.green_groups},
                      {"green_s", ph.green_ms / 1000.0},
                      {"yellow_s", ph.yellow_ms / 1000.0},
                      {"all_red_s", ph.all_red_ms / 1000.0}});
  }
  j = json{{"intersection_id", p.intersection_id}, {"offset_s", p.offset_ms / 1000.0}, {"phases", phases}};
}

void from_json(const json& j, PhasePlan& p) {
  p.intersection_id = j.at("intersection_id").get<std::uint16_t>();
  p.offset_ms = seconds_to_ms(j.value("offset_s", 0.0));
  p.phases.clear();
  for (const auto& ph : j.at("phases")) {
    Phase phase;
    phase.green_groups = ph.at("green").get<std::vector<std::uint8_t>>();
    phase.green_ms = seconds_to_ms(ph.value("green_s", 30.0));
    phase.yellow_ms = seconds_to_ms(ph.value("yellow_s", 3.0));
    phase.all_red_ms = seconds_to_ms(ph.value("all_red_s", 2.0));
    p.phases.push_back(std::move(phase));
  }
}

PhasePlan default_plan(const MapMessage& map) {
  const IntersectionGeometry geometry(map);
  PhasePlan plan{map.intersection_id, {Phase{}, Phase{}, Phase{}}, 0};
  for (const auto& [group, label] : signal_group_movements(geometry)) {
    const bool north_south = label.rfind("NB", 0) == 0 || label.rfind("SB", 0) == 0;
    const bool left = label.size() > 3 && label[3] == 'L';
    plan.phases[north_south ? (left ? 0 : 1) : 2].green_groups.push_back(group);
  }
  std::erase_if(plan.phases, [](const Phase& p) { return p.green_groups.empty(); });
  return plan;
}

const GroupSignal* SignalState::find(std::uint8_t signal_group_id) const {
  for (const auto& g : groups) {
    if (g.signal_group_id == signal_group_id) return &g;
  }
  return nullptr;
}

std::uint16_t time_mark(std::int64_t epoch_ms) {
  return static_cast<std::uint16_t>(((epoch_ms % kMsPerHour) + kMsPerHour) % kMsPerHour / kTimeMarkQuantumMs);
}

SpatMessage to_spat(const SignalState& state, int year) {
  const std::int64_t since = state.epoch_ms - year_start_epoch_ms(year);
  if (since < 0) throw Error(Errc::MoyOutOfRange, "signal state precedes the scenario year");
  SpatMessage spat;
  spat.intersection_id = state.intersection_id;
  spat.moy = static_cast<std::uint32_t>(since / kMsPerMinute);
  spat.d_second_ms = static_cast<std::uint16_t>(since % kMsPerMinute);
  if (spat.moy > minutes_in_year(year)) throw Error(Errc::MoyOutOfRange, "signal state past the scenario year");
  for (const auto& g : state.groups) {
    const auto tm = time_mark(g.end_epoch_ms);
    spat.movements.push_back({g.signal_group_id, g.state, tm, tm});
  }
  return spat;
}

SignalState controller_tick(const PhasePlan& plan, std::int64_t sim_ms, std::int64_t start_epoch_ms) {
  return SignalController(plan, start_epoch_ms).state(sim_ms);
}

SignalController::SignalController(PhasePlan plan, std::int64_t start_epoch_ms)
    : plan_(std::move(plan)), start_epoch_ms_(start_epoch_ms) {
  check_plan(plan_);
}

std::int64_t SignalController::plan_time(std::int64_t sim_ms) const {
  const std::int64_t x = sim_ms + plan_.offset_ms;
  std::int64_t shift = 0;
  for (const auto& [anchor, extra] : extensions_) {
    const std::int64_t at = anchor + shift;
    if (x < at) break;
    if (x < at + extra) return anchor - 1;  // held on the last green instant
    shift += extra;
  }
  return x - shift;
}

std::int64_t SignalController::sim_time(std::int64_t plan_ms) const {
  std::int64_t shift = 0;
  for (const auto& [anchor, extra] : extensions_) {
    if (plan_ms >= anchor) shift += extra;
  }
  return plan_ms + shift - plan_.offset_ms;
}

namespace {

struct GreenWindow {
  std::int64_t start = 0;
  std::int64_t green_end = 0;
  std::int64_t yellow_end = 0;
};

// The window of the group's green in the cycle containing p.
GreenWindow window_in_cycle(const PhasePlan& plan, std::uint8_t group, std::int64_t p) {
  const std::int64_t cycle = plan.cycle_ms();
  const std::int64_t c0 = floor_div(p, cycle) * cycle;
  std::int64_t start = c0;
  for (const auto& ph : plan.phases) {
    if (std::find(ph.green_groups.begin(), ph.green_groups.end(), group) != ph.green_groups.end()) {
      return {start, start + ph.green_ms, start + ph.green_ms + ph.yellow_ms};
    }
    start += ph.green_ms + ph.yellow_ms + ph.all_red_ms;
  }
  throw Error(Errc::InvalidConfig, fmt::format("group {} not in plan", group));
}

}  // namespace

SignalState SignalController::state(std::int64_t sim_ms) const {
  const std::int64_t p = plan_time(sim_ms);
  const std::int64_t cycle = plan_.cycle_ms();
  SignalState out{plan_.intersection_id, start_epoch_ms_ + sim_ms, {}};
  for (auto g : plan_.groups()) {
    const auto w = window_in_cycle(plan_, g, p);
    GroupSignal gs{g, PhaseState::StopAndRemain, 0};
    std::int64_t end = 0;
    if (p >= w.start && p < w.green_end) {
      gs.state = PhaseState::ProtectedMovementAllowed;
      end = w.green_end;
    } else if (p >= w.green_end && p < w.yellow_end) {
      gs.state = PhaseState::ProtectedClearance;
      end = w.yellow_end;
    } else {
      end = p < w.start ? w.start : w.start + cycle;
    }
    gs.end_epoch_ms = start_epoch_ms_ + sim_time(end);
    out.groups.push_back(gs);
  }
  return out;
}

bool SignalController::request_extension(std::uint8_t signal_group_id, std::int64_t sim_ms, std::int64_t extra_ms) {
  if (extra_ms <= 0) return false;
  const std::int64_t p = plan_time(sim_ms);
  const auto w = window_in_cycle(plan_, signal_group_id, p);
  const std::int64_t anchor = p < w.green_end ? w.green_end : w.green_end + plan_.cycle_ms();
  return extensions_.emplace(anchor, extra_ms).second;
}

// ---- vehicles ----

Path::Path(std::vector<Vec2> points) : points_(std::move(points)) {
  cumulative_.reserve(points_.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < points_.size(); ++i) {
    if (i) acc += norm(points_[i] - points_[i - 1]);
    cumulative_.push_back(acc);
  }
}

std::size_t Path::segment_at(double s) const {
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
  std::size_t i = static_cast<std::size_t>(it - cumulative_.begin());
  i = i == 0 ? 0 : i - 1;
  return std::min(i, points_.size() - 2);
}

Vec2 Path::at(double s) const {
  if (points_.size() < 2) return points_.empty() ? Vec2{} : points_[0];
  s = std::clamp(s, 0.0, length());
  const auto i = segment_at(s);
  const double len = cumulative_[i + 1] - cumulative_[i];
  const double t = len > 0 ? (s - cumulative_[i]) / len : 0.0;
  return points_[i] + (points_[i + 1] - points_[i]) * t;
}

double Path::heading_at(double s) const {
  if (points_.size() < 2) return 0.0;
  // A point on a node belongs to the segment arriving there.
  const auto it = std::lower_bound(cumulative_.begin(), cumulative_.end(), std::clamp(s, 0.0, length()));
  std::size_t i = static_cast<std::size_t>(it - cumulative_.begin());
  i = std::clamp<std::size_t>(i, 1, points_.size() - 1) - 1;
  return bearing_deg(points_[i], points_[i + 1]);
}

const PathSpan* Path::span_at(double s) const {
  for (const auto& sp : spans) {
    if (s >= sp.start_m && s <= sp.end_m) return &sp;
  }
  return nullptr;
}

const StopLineMark* Path::next_stop_line(double s) const {
  for (const auto& l : stop_lines) {
    if (l.arc_m >= s) return &l;
  }
  return nullptr;
}

Path build_path(const std::vector<RouteItem>& route, const std::map<std::uint16_t, IntersectionGeometry>& geometry,
                const LocalFrame& frame) {
  struct Piece {
    const IntersectionGeometry* geometry;
    const LanePolygon* lane;
  };
  std::vector<Piece> pieces;
  for (std::size_t k = 0; k < route.size(); ++k) {
    const auto& item = route[k];
    const std::string where = fmt::format("route[{}]", k);
    const auto git = geometry.find(item.intersection_id);
    if (git == geometry.end()) invalid(where, fmt::format("no MAP for intersection {}", item.intersection_id));
    const auto& g = git->second;
    if (!item.movement.empty()) {
      const LanePolygon* ingress = nullptr;
      for (const auto& lane : g.lanes) {
        if (lane.signal_group_id != 0 && movement_label(g, lane) == item.movement) {
          ingress = &lane;
          break;
        }
      }
      if (!ingress) invalid(where, fmt::format("intersection {} has no {} lane", item.intersection_id, item.movement));
      pieces.push_back({&g, ingress});
      if (const auto* egress = g.find_lane(ingress->connecting_lane_id)) pieces.push_back({&g, egress});
    } else {
      const auto* lane = g.find_lane(item.lane_id);
      if (!lane) invalid(where, fmt::format("intersection {} has no lane {}", item.intersection_id, item.lane_id));
      pieces.push_back({&g, lane});
    }
  }
  if (pieces.empty()) invalid("route", "empty");

  std::vector<Vec2> pts;
  double arc = 0.0;
  auto push = [&](Vec2 p) {
    if (!pts.empty()) {
      const double d = norm(p - pts.back());
      if (d < 1e-6) return;
      arc += d;
    }
    pts.push_back(p);
  };
  std::vector<PathSpan> spans;
  std::vector<StopLineMark> lines;
  for (const auto& [g, lane] : pieces) {
    std::vector<Vec2> c;
    for (const auto& v : lane->centerline) {
      const auto geo = g->frame.to_geo(v);
      c.push_back(frame.to_xy(geo.latitude_deg, geo.longitude_deg));
    }
    const bool ingress = lane->signal_group_id != 0;
    if (ingress) std::reverse(c.begin(), c.end());
    push(c.front());
    const double start = arc;
    for (std::size_t i = 1; i < c.size(); ++i) push(c[i]);
    spans.push_back({start, arc, g->map.intersection_id, lane->lane_id, ingress});
    if (ingress) lines.push_back({arc, g->map.intersection_id, lane->lane_id, lane->signal_group_id});
  }
  Path path(std::move(pts));
  path.spans = std::move(spans);
  path.stop_lines = std::move(lines);
  return path;
}

void advance_vehicle(VirtualVehicle& vh, const Surroundings& around, std::int64_t dt_ms, const KinematicParams& k) {
  const double dt = static_cast<double>(dt_ms) / 1000.0;
  const double v = vh.speed_mps;
  const double b = k.comfort_decel_mps2;

  std::optional<double> stop_at = around.obstacle_m;
  if (const auto* line = vh.path->next_stop_line(vh.s_m); line && around.signal) {
    const double gap = line->arc_m - vh.s_m;
    const bool committed = vh.committed_line_m && *vh.committed_line_m == line->arc_m;
    bool stop = false;
    switch (*around.signal) {
      case PhaseState::StopAndRemain:
      case PhaseState::StopThenProceed:
        stop = !committed;
        break;
      case PhaseState::ProtectedClearance:
      case PhaseState::PermissiveClearance:
        if (committed) break;
        // Too close to stop comfortably: go through.
        if (gap < v * v / (2 * b) && v > 0) {
          vh.committed_line_m = line->arc_m;
        } else {
          stop = true;
        }
        break;
      default:
        break;
    }
    if (stop) stop_at = stop_at ? std::min(*stop_at, line->arc_m) : line->arc_m;
  }

  const double v1 = v > vh.target_speed_mps ? std::max(vh.target_speed_mps, v - b * dt)
                                            : std::min(vh.target_speed_mps, v + k.max_accel_mps2 * dt);
  const double ds1 = (v + v1) / 2 * dt;
  if (stop_at && (*stop_at - vh.s_m) - ds1 < v1 * v1 / (2 * b)) {
    const double gap = std::max(0.0, *stop_at - vh.s_m);
    if (gap <= 1e-9 || v <= 1e-9) {
      vh.accel_mps2 = -v / dt;
      vh.speed_mps = 0.0;
      return;
    }
    const double a = v * v / (2 * gap);
    if (2 * gap / v <= dt) {
      vh.s_m += gap;
      vh.speed_mps = 0.0;
      vh.accel_mps2 = -v / dt;
      return;
    }
    vh.s_m += v * dt - a * dt * dt / 2;
    vh.speed_mps = v - a * dt;
    vh.accel_mps2 = -a;
    return;
  }
  vh.s_m += ds1;
  vh.speed_mps = v1;
  vh.accel_mps2 = (v1 - v) / dt;
}

BsmCore vehicle_bsm(std::uint32_t temp_id, GeoPoint position, double speed_mps, double heading_deg,
                    double accel_mps2, std::int64_t epoch_ms) {
  BsmCore b;
  b.temp_id = temp_id;
  b.sec_mark_ms = static_cast<std::uint16_t>(((epoch_ms % kMsPerMinute) + kMsPerMinute) % kMsPerMinute);
  b.latitude_deg = quantize(FieldKind::Latitude, position.latitude_deg);
  b.longitude_deg = quantize(FieldKind::Longitude, position.longitude_deg);
  b.elevation_cm = static_cast<std::int32_t>(std::lround(position.elevation_cm / 10.0) * 10);
  b.speed_mps = quantize(FieldKind::Speed, std::clamp(speed_mps, 0.0, 163.8));
  double h = std::fmod(heading_deg, 360.0);
  if (h < 0) h += 360.0;
  b.heading_deg = raw_to_engineering(FieldKind::Heading, std::llround(h * 80.0) % 28800);
  b.accel_long_mps2 = quantize(FieldKind::Acceleration, std::clamp(accel_mps2, -20.0, 20.0));
  b.brake_status = accel_mps2 < -0.5 ? 0x0F : 0;
  b.transmission = Transmission::Forward;
  b.width_cm = 180;
  b.length_cm = 480;
  return b;
}

bool ObuTwin::apply(const IntegratedRecord& record) {
  if (record.temp_id != temp_id_) {
    throw Error(Errc::InvalidMessage, fmt::format("record for {} applied to twin {}", record.temp_id, temp_id_));
  }
  if (state_ && record.timestamp_epoch_ms < state_->timestamp_epoch_ms) {
    ++stale_;
    return false;
  }
  state_ = record;
  return true;
}

bool ObuTwin::apply(const BsmCore& bsm, std::int64_t epoch_ms) {
  IntegratedRecord r;
  r.timestamp_epoch_ms = epoch_ms;
  r.temp_id = bsm.temp_id;
  r.position = {bsm.latitude_deg, bsm.longitude_deg, bsm.elevation_cm};
  r.speed_mps = bsm.speed_mps;
  r.heading_deg = bsm.heading_deg;
  return apply(r);
}

// ---- scenario ----

std::int64_t Scenario::start_epoch_ms() const {
  return year_start_epoch_ms(year) + static_cast<std::int64_t>(moy) * kMsPerMinute + start_ms_in_minute;
}

std::string rsu_id_for(std::uint16_t intersection_id) { return fmt::format("rsu-{}", intersection_id); }

namespace {

std::map<std::uint16_t, IntersectionGeometry> geometries_of(const std::vector<MapMessage>& maps) {
  std::map<std::uint16_t, IntersectionGeometry> out;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    try {
      if (!out.emplace(maps[i].intersection_id, IntersectionGeometry(maps[i])).second) {
        invalid(fmt::format("maps[{}]", i), fmt::format("duplicate intersection {}", maps[i].intersection_id));
      }
    } catch (const Error& e) {
      if (e.code() == Errc::ScenarioInvalid) throw;
      invalid(fmt::format("maps[{}]", i), e.what());
    }
  }
  return out;
}

LocalFrame scenario_frame(const std::vector<MapMessage>& maps) {
  return maps.empty() ? LocalFrame{} : LocalFrame(maps.front().ref_point);
}

std::vector<MapMessage> fixture_maps(const std::string& name, const std::string& where) {
  auto maps = fixtures::named_maps(name);
  if (maps.empty()) invalid(where, fmt::format("unknown fixture '{}'", name));
  return maps;
}

}  // namespace

void check_scenario(const Scenario& s) {
  if (s.tick_ms <= 0 || 1000 % s.tick_ms != 0) invalid("tick_ms", "must divide 1000");
  if (!(s.duration_s > 0)) invalid("duration_s", "must be positive");
  if (s.year < 1970 || s.year > 9999) invalid("start_time.year", "out of range");
  if (s.moy >= minutes_in_year(s.year)) invalid("start_time.moy", "beyond the year");
  if (s.start_ms_in_minute < 0 || s.start_ms_in_minute >= kMsPerMinute || s.start_ms_in_minute % 100) {
    invalid("start_time.ms", "must be a multiple of 100 below 60000");
  }
  try {
    check_config(s.channel);
  } catch (const Error& e) {
    invalid("channel", e.what());
  }
  const auto geometry = geometries_of(s.maps);
  std::set<std::uint16_t> planned;
  for (std::size_t i = 0; i < s.plans.size(); ++i) {
    const auto& p = s.plans[i];
    const std::string where = fmt::format("plans[{}]", i);
    const auto git = geometry.find(p.intersection_id);
    if (git == geometry.end()) invalid(where, fmt::format("no MAP for intersection {}", p.intersection_id));
    if (!planned.insert(p.intersection_id).second) invalid(where, "duplicate plan");
    try {
      check_plan(p);
    } catch (const Error& e) {
      invalid(where, e.what());
    }
    const auto groups = p.groups();
    for (const auto& lane : git->second.lanes) {
      if (lane.signal_group_id && !std::binary_search(groups.begin(), groups.end(), lane.signal_group_id)) {
        invalid(where, fmt::format("signal group {} of lane {} never turns green", lane.signal_group_id, lane.lane_id));
      }
    }
  }
  for (const auto& [id, g] : geometry) {
    if (!planned.count(id)) invalid("plans", fmt::format("no plan for intersection {}", id));
  }
  const auto frame = scenario_frame(s.maps);
  std::set<std::uint32_t> ids;
  for (std::size_t i = 0; i < s.vehicles.size(); ++i) {
    const auto& v = s.vehicles[i];
    const std::string where = fmt::format("vehicles[{}]", i);
    if (!ids.insert(v.temp_id).second) invalid(where, fmt::format("duplicate id {}", v.temp_id));
    if (v.entry_ms < 0) invalid(where + ".entry_s", "negative");
    if (v.kind == VehicleKind::Twin) {
      if (v.replay.empty()) invalid(where + ".replay", "no records");
      continue;
    }
    if (!(v.target_speed_mps > 0 && v.target_speed_mps <= 40)) invalid(where + ".target_speed_mps", "out of range");
    try {
      build_path(v.route, geometry, frame);
    } catch (const Error& e) {
      invalid(where, e.what());
    }
  }
}

Scenario parse_scenario(const json& j, const std::filesystem::path& base_dir) {
  Scenario s;
  std::string where;
  try {
    where = "start_time";
    const auto& st = j.at("start_time");
    s.year = st.value("year", s.year);
    s.moy = st.at("moy").get<std::uint32_t>();
    s.start_ms_in_minute = st.value("ms", std::int64_t{0});
    where = "tick_ms";
    s.tick_ms = j.value("tick_ms", s.tick_ms);
    where = "duration_s";
    s.duration_s = j.at("duration_s").get<double>();
    where = "channel";
    if (j.contains("channel")) s.channel = j.at("channel").get<ChannelConfig>();
    where = "seed";
    if (j.contains("seed")) s.channel.seed = j.at("seed").get<std::uint64_t>();
    where = "apply_green_extension";
    s.apply_green_extension = j.value("apply_green_extension", false);
    where = "feedback";
    if (j.contains("feedback")) s.feedback = j.at("feedback").get<FeedbackConfig>();

    const auto& maps = j.at("maps");
    for (std::size_t i = 0; i < maps.size(); ++i) {
      where = fmt::format("maps[{}]", i);
      if (maps[i].is_string()) {
        for (auto& m : fixture_maps(maps[i].get<std::string>(), where)) s.maps.push_back(std::move(m));
      } else {
        s.maps.push_back(maps[i].get<MapMessage>());
      }
    }
    std::map<std::uint16_t, PhasePlan> plans;
    if (j.contains("plans")) {
      for (std::size_t i = 0; i < j.at("plans").size(); ++i) {
        where = fmt::format("plans[{}]", i);
        s.plans.push_back(j.at("plans")[i].get<PhasePlan>());
      }
    }
    for (const auto& m : s.maps) {
      const bool has = std::any_of(s.plans.begin(), s.plans.end(),
                                   [&](const PhasePlan& p) { return p.intersection_id == m.intersection_id; });
      where = fmt::format("maps (intersection {})", m.intersection_id);
      if (!has) s.plans.push_back(default_plan(m));
    }

    if (j.contains("vehicles")) {
      const auto& vs = j.at("vehicles");
      for (std::size_t i = 0; i < vs.size(); ++i) {
        where = fmt::format("vehicles[{}]", i);
        const auto& v = vs[i];
        VehicleSpec spec;
        spec.temp_id = v.at("id").get<std::uint32_t>();
        const auto kind = v.value("kind", std::string("virtual"));
        if (kind == "twin") {
          spec.kind = VehicleKind::Twin;
        } else if (kind != "virtual") {
          invalid(where + ".kind", fmt::format("unknown kind '{}'", kind));
        }
        spec.entry_ms = seconds_to_ms(v.value("entry_s", 0.0));
        spec.target_speed_mps = v.value("target_speed_mps", spec.target_speed_mps);
        if (v.contains("route")) {
          for (const auto& r : v.at("route")) {
            RouteItem item;
            item.intersection_id = r.at("intersection").get<std::uint16_t>();
            item.lane_id = r.value("lane", std::uint8_t{0});
            item.movement = r.value("movement", std::string());
            if (item.movement.empty() && item.lane_id == 0) invalid(where + ".route", "needs a lane or movement");
            spec.route.push_back(std::move(item));
          }
        }
        if (spec.kind == VehicleKind::Twin) {
          where += ".replay";
          auto file = std::filesystem::path(v.at("replay").get<std::string>());
          if (file.is_relative()) file = base_dir / file;
          std::ifstream in(file);
          if (!in) invalid(where, fmt::format("cannot open {}", file.string()));
          std::string line;
          std::size_t n = 0;
          while (std::getline(in, line)) {
            ++n;
            if (line.empty()) continue;
            try {
              auto rec = json::parse(line).get<IntegratedRecord>();
              if (rec.temp_id == spec.temp_id) spec.replay.push_back(std::move(rec));
            } catch (const json::exception& e) {
              invalid(fmt::format("{}:{}", file.string(), n), e.what());
            }
          }
          if (!spec.replay.empty()) {
            const std::int64_t shift = s.start_epoch_ms() + spec.entry_ms - spec.replay.front().timestamp_epoch_ms;
            for (auto& r : spec.replay) r.timestamp_epoch_ms += shift;
          }
        }
        s.vehicles.push_back(std::move(spec));
      }
    }
  } catch (const json::exception& e) {
    invalid(where, e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::ScenarioInvalid) throw;
    invalid(where, e.what());
  }
  check_scenario(s);
  return s;
}

Scenario load_scenario(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) invalid(file.string(), "cannot open");
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    invalid(file.string(), e.what());
  }
  return parse_scenario(j, file.parent_path());
}

// ---- tick loop ----

namespace {

struct PendingFrame {
  std::int64_t received_at_ms;
  std::uint64_t seq;
  FrameLogEntry entry;
  bool operator>(const PendingFrame& o) const {
    return std::tie(received_at_ms, seq) > std::tie(o.received_at_ms, o.seq);
  }
};

struct Downlink {
  std::int64_t arrival_ms;
  std::uint64_t seq;
  std::uint32_t vehicle;
  std::shared_ptr<const SpatMessage> spat;
  bool operator>(const Downlink& o) const { return std::tie(arrival_ms, seq) > std::tie(o.arrival_ms, o.seq); }
};

struct Heard {
  std::shared_ptr<const SpatMessage> spat;
  std::int64_t sent_epoch_ms = 0;
};

struct VehicleRun {
  const VehicleSpec* spec = nullptr;
  VirtualVehicle vv;
  std::optional<ObuTwin> twin;
  std::size_t replay_next = 0;
  bool active = false;
  bool done = false;
  std::map<std::uint16_t, Heard> heard;
  // stats
  std::int64_t spawned_at = -1;
  std::int64_t despawned_at = -1;
  double max_speed = 0.0;
  int stops = 0;
  int crossings = 0;
  int red_crossings = 0;
  std::uint64_t bsm_sent = 0;
  std::uint64_t spat_heard = 0;
};

constexpr std::int64_t kHeardValidityMs = 1000;

}  // namespace

SimulationResult simulate(const Scenario& scenario, const std::function<void(const FrameLogEntry&)>& tap) {
  check_scenario(scenario);
  const auto geometry = geometries_of(scenario.maps);
  const auto frame = scenario_frame(scenario.maps);
  const std::int64_t start = scenario.start_epoch_ms();
  const std::int64_t tick = scenario.tick_ms;
  const std::int64_t duration = seconds_to_ms(scenario.duration_s);

  std::map<std::uint16_t, SignalController> controllers;
  for (const auto& p : scenario.plans) controllers.emplace(p.intersection_id, SignalController(p, start));
  std::map<std::uint16_t, Vec2> rsu_xy;
  std::map<std::uint16_t, std::string> map_hex;
  for (const auto& m : scenario.maps) {
    rsu_xy[m.intersection_id] = frame.to_xy(m.ref_point.latitude_deg, m.ref_point.longitude_deg);
    map_hex[m.intersection_id] = encode_frame(m);
  }

  Channel channel(scenario.channel);
  std::vector<VehicleRun> runs(scenario.vehicles.size());
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& spec = scenario.vehicles[i];
    runs[i].spec = &spec;
    if (spec.kind == VehicleKind::Virtual) {
      runs[i].vv.temp_id = spec.temp_id;
      runs[i].vv.path = std::make_shared<const Path>(build_path(spec.route, geometry, frame));
      runs[i].vv.target_speed_mps = spec.target_speed_mps;
      runs[i].vv.speed_mps = spec.target_speed_mps;
    } else {
      runs[i].twin.emplace(spec.temp_id);
    }
  }

  std::priority_queue<PendingFrame, std::vector<PendingFrame>, std::greater<>> pending;
  std::priority_queue<Downlink, std::vector<Downlink>, std::greater<>> downlink;
  std::uint64_t seq = 0;
  SimulationResult result;
  std::uint64_t n_spat = 0, n_map = 0, n_bsm = 0, conflicts = 0, recommendations = 0, applied = 0;

  std::optional<StreamCaches> caches;
  std::optional<FeedbackEngine> feedback;
  if (scenario.apply_green_extension) {
    caches.emplace(scenario.year);
    feedback.emplace(scenario.feedback);
    for (const auto& m : scenario.maps) feedback->observe_map(m);
  }

  auto log = [&](const std::string& rsu, std::int64_t at, std::string hex) {
    pending.push({at, seq++, FrameLogEntry{rsu, at, std::move(hex)}});
  };

  for (std::int64_t t = 0; t < duration; t += tick) {
    const std::int64_t now = start + t;
    channel.begin_tick();

    std::map<std::uint16_t, SignalState> signals;
    for (const auto& [id, c] : controllers) {
      auto st = c.state(t);
      // Every group showing green must belong to one phase.
      std::set<std::size_t> phases;
      for (const auto& g : st.groups) {
        if (g.state != PhaseState::ProtectedMovementAllowed) continue;
        for (std::size_t k = 0; k < c.plan().phases.size(); ++k) {
          const auto& gg = c.plan().phases[k].green_groups;
          if (std::find(gg.begin(), gg.end(), g.signal_group_id) != gg.end()) phases.insert(k);
        }
      }
      if (phases.size() > 1) ++conflicts;
      signals.emplace(id, std::move(st));
    }

    for (auto& r : runs) {
      if (!r.active && !r.done && r.spec->entry_ms <= t) {
        r.active = true;
        r.spawned_at = t;
      }
    }

    auto vehicle_xy = [&](const VehicleRun& r) -> std::optional<Vec2> {
      if (r.twin) {
        if (!r.twin->state()) return std::nullopt;
        const auto& p = r.twin->state()->position;
        return frame.to_xy(p.latitude_deg, p.longitude_deg);
      }
      return r.vv.path->at(r.vv.s_m);
    };

    auto broadcast = [&](std::uint16_t id, const std::string& hex, std::shared_ptr<const SpatMessage> spat) {
      for (auto& r : runs) {
        if (!r.active) continue;
        const auto xy = vehicle_xy(r);
        if (!xy) continue;
        if (auto d = channel.transmit(hex, rsu_xy[id], *xy, now); d && spat) {
          downlink.push({d->arrival_time_ms, seq++, r.spec->temp_id, spat});
        }
      }
    };

    if (t % 100 < tick) {
      for (const auto& [id, st] : signals) {
        auto spat = std::make_shared<const SpatMessage>(to_spat(st, scenario.year));
        auto hex = encode_frame(*spat);
        log(rsu_id_for(id), now, hex);
        ++n_spat;
        broadcast(id, hex, spat);
      }
    }
    if (t % 1000 < tick) {
      for (const auto& [id, hex] : map_hex) {
        log(rsu_id_for(id), now, hex);
        ++n_map;
        broadcast(id, hex, nullptr);
      }
    }

    // Vehicles: report the state at t, then move to t + tick.
    for (auto& r : runs) {
      if (!r.active) continue;
      if (r.twin) {
        const auto& recs = r.spec->replay;
        while (r.replay_next < recs.size() && recs[r.replay_next].timestamp_epoch_ms <= now) {
          r.twin->apply(recs[r.replay_next++]);
        }
        const auto& st = r.twin->state();
        if (!st) continue;
        const auto bsm = vehicle_bsm(r.spec->temp_id, st->position, st->speed_mps.value_or(0.0),
                                     st->heading_deg.value_or(0.0), 0.0, now);
        const auto hex = encode_frame(bsm);
        const Vec2 xy = frame.to_xy(st->position.latitude_deg, st->position.longitude_deg);
        for (const auto& [id, rxy] : rsu_xy) {
          if (auto d = channel.transmit(hex, xy, rxy, now)) {
            log(rsu_id_for(id), d->arrival_time_ms, d->payload_hex);
            ++n_bsm;
          }
        }
        ++r.bsm_sent;
        r.max_speed = std::max(r.max_speed, st->speed_mps.value_or(0.0));
        if (r.replay_next >= recs.size() && now >= recs.back().timestamp_epoch_ms + 1000) {
          r.active = false;
          r.done = true;
          r.despawned_at = t;
        }
        continue;
      }

      auto& vv = r.vv;
      const auto& path = *vv.path;
      const Vec2 xy = path.at(vv.s_m);
      const auto bsm = vehicle_bsm(vv.temp_id, frame.to_geo(xy), vv.speed_mps, path.heading_at(vv.s_m),
                                   vv.accel_mps2, now);
      const auto hex = encode_frame(bsm);
      for (const auto& [id, rxy] : rsu_xy) {
        if (auto d = channel.transmit(hex, xy, rxy, now)) {
            log(rsu_id_for(id), d->arrival_time_ms, d->payload_hex);
            ++n_bsm;
          }
      }
      ++r.bsm_sent;

      Surroundings around;
      const auto* line = path.next_stop_line(vv.s_m);
      if (line) {
        auto h = r.heard.find(line->intersection_id);
        if (h != r.heard.end() && now - h->second.sent_epoch_ms <= kHeardValidityMs) {
          if (const auto* mv = h->second.spat->find_movement(line->signal_group_id)) around.signal = mv->event_state;
        }
        // Nearest stopped vehicle ahead in the same ingress lane.
        const double my_gap = line->arc_m - vv.s_m;
        std::optional<double> leader_gap;
        for (const auto& o : runs) {
          if (&o == &r || !o.active || o.twin) continue;
          const auto* oline = o.vv.path->next_stop_line(o.vv.s_m);
          if (!oline || oline->intersection_id != line->intersection_id || oline->lane_id != line->lane_id) continue;
          const auto* span = o.vv.path->span_at(o.vv.s_m);
          if (!span || !span->ingress || span->lane_id != line->lane_id) continue;
          const double og = oline->arc_m - o.vv.s_m;
          if (og >= my_gap || o.vv.speed_mps >= scenario.kinematics.stopped_speed_mps) continue;
          if (!leader_gap || og > *leader_gap) leader_gap = og;
        }
        if (leader_gap) {
          around.obstacle_m = std::max(vv.s_m, line->arc_m - *leader_gap - scenario.kinematics.standstill_gap_m);
        }
      }

      const double before = vv.s_m;
      const double v_before = vv.speed_mps;
      advance_vehicle(vv, around, tick, scenario.kinematics);
      for (const auto& l : path.stop_lines) {
        if (before <= l.arc_m && l.arc_m < vv.s_m) {
          ++r.crossings;
          const auto* g = signals.at(l.intersection_id).find(l.signal_group_id);
          if (g && g->state == PhaseState::StopAndRemain) ++r.red_crossings;
        }
      }
      if (v_before > 0 && vv.speed_mps == 0) ++r.stops;
      r.max_speed = std::max(r.max_speed, vv.speed_mps);
      if (vv.s_m >= path.length()) {
        // Route exhausted: the vehicle leaves the corridor.
        r.active = false;
        r.done = true;
        r.despawned_at = t + tick;
      }
    }

    // Deliveries that land before the next tick are known from then on.
    while (!downlink.empty() && downlink.top().arrival_ms < now + tick) {
      const auto d = downlink.top();
      downlink.pop();
      for (auto& r : runs) {
        if (r.spec->temp_id != d.vehicle) continue;
        const std::int64_t sent = spat_timestamp(d.spat->moy, d.spat->d_second_ms, scenario.year);
        auto& h = r.heard[d.spat->intersection_id];
        if (!h.spat || sent >= h.sent_epoch_ms) h = {d.spat, sent};
        ++r.spat_heard;
      }
    }

    while (!pending.empty() && pending.top().received_at_ms < now + tick) {
      auto f = pending.top().entry;
      pending.pop();
      if (tap) tap(f);
      if (caches) {
        const auto msg = decode_frame(f.payload_hex);
        if (auto rec = caches->ingest(msg, f.rsu_id, f.received_at_ms)) {
          for (const auto& fb : feedback->on_record(*rec)) {
            if (fb.type() != FeedbackType::SignalTimingAdjustment || !fb.signal_group_id) continue;
            ++recommendations;
            auto c = controllers.find(fb.intersection_id);
            if (c == controllers.end()) continue;
            const auto extra = seconds_to_ms(std::get<TimingPayload>(fb.payload).recommended_extension_s);
            applied += c->second.request_extension(*fb.signal_group_id, t + tick, extra);
          }
        }
      }
      result.frames.push_back(std::move(f));
    }
  }
  while (!pending.empty()) {
    auto f = pending.top().entry;
    pending.pop();
    if (tap) tap(f);
    result.frames.push_back(std::move(f));
  }

  json vehicles = json::array();
  std::uint64_t red_total = 0, stale = 0;
  for (const auto& r : runs) {
    red_total += r.red_crossings;
    if (r.twin) stale += r.twin->stale();
    vehicles.push_back({{"temp_id", r.spec->temp_id},
                        {"kind", r.twin ? "twin" : "virtual"},
                        {"spawned_at_ms", r.spawned_at < 0 ? json(nullptr) : json(r.spawned_at)},
                        {"despawned_at_ms", r.despawned_at < 0 ? json(nullptr) : json(r.despawned_at)},
                        {"distance_m", r.twin ? 0.0 : r.vv.s_m},
                        {"max_speed_mps", r.max_speed},
                        {"stops", r.stops},
                        {"stop_line_crossings", r.crossings},
                        {"red_crossings", r.red_crossings},
                        {"bsm_sent", r.bsm_sent},
                        {"spat_heard", r.spat_heard}});
  }
  result.summary = json{{"start", format_iso8601(start)},
                        {"tick_ms", tick},
                        {"ticks", (duration + tick - 1) / tick},
                        {"frames", {{"spat", n_spat}, {"map", n_map}, {"bsm_logged", n_bsm}}},
                        {"channel", channel.counters()},
                        {"vehicles", vehicles},
                        {"red_crossings", red_total},
                        {"signal_conflicts", conflicts},
                        {"stale_records", stale},
                        {"timing_recommendations", recommendations},
                        {"green_extensions_applied", applied}};
  return result;
}

}  // namespace corridor
