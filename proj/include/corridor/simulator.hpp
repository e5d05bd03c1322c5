#pragma once

// Discrete-time corridor simulation: fixed-time signal controllers, RSU twins
// broadcasting SPaT and MAP, virtual vehicles with a simple longitudinal
// model and twin vehicles driven by replayed records. Produces a frame log in
// the ingestion format.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "corridor/feedback.hpp"
#include "corridor/json_io.hpp"
#include "corridor/lanegeo.hpp"
#include "corridor/messages.hpp"
#include "corridor/netmodel.hpp"

namespace corridor {

// ---- signal control ----

struct Phase {
  std::vector<std::uint8_t> green_groups;
  std::int64_t green_ms = 30000;
  std::int64_t yellow_ms = 3000;
  std::int64_t all_red_ms = 2000;
  bool operator==(const Phase&) const = default;
};

struct PhasePlan {
  std::uint16_t intersection_id = 0;
  std::vector<Phase> phases;
  std::int64_t offset_ms = 0;  // plan time at simulation start

  std::int64_t cycle_ms() const;
  std::vector<std::uint8_t> groups() const;  // sorted, unique
  bool operator==(const PhasePlan&) const = default;
};

// Throws InvalidConfig: empty plan, non-positive or off-grid (100 ms)
// durations, a group green in two phases.
void check_plan(const PhasePlan& plan);

void to_json(json& j, const PhasePlan& p);
void from_json(const json& j, PhasePlan& p);

// Three phases built from the MAP's movement labels: north/south lefts,
// remaining north/south movements, then all east/west movements.
PhasePlan default_plan(const MapMessage& map);

struct GroupSignal {
  std::uint8_t signal_group_id = 0;
  PhaseState state = PhaseState::StopAndRemain;
  std::int64_t end_epoch_ms = 0;
  bool operator==(const GroupSignal&) const = default;
};

struct SignalState {
  std::uint16_t intersection_id = 0;
  std::int64_t epoch_ms = 0;
  std::vector<GroupSignal> groups;

  const GroupSignal* find(std::uint8_t signal_group_id) const;
  bool operator==(const SignalState&) const = default;
};

// Tenths of a second within the hour.
std::uint16_t time_mark(std::int64_t epoch_ms);

SpatMessage to_spat(const SignalState& state, int year);

// Fixed-time state of every group at sim_ms after start_epoch_ms.
SignalState controller_tick(const PhasePlan& plan, std::int64_t sim_ms, std::int64_t start_epoch_ms);

// Fixed-time controller with optional one-shot green extensions. An extension
// stretches the next green of a group; the rest of the plan slides back.
class SignalController {
 public:
  SignalController(PhasePlan plan, std::int64_t start_epoch_ms);

  SignalState state(std::int64_t sim_ms) const;
  // False when that green already carries an extension.
  bool request_extension(std::uint8_t signal_group_id, std::int64_t sim_ms, std::int64_t extra_ms);

  const PhasePlan& plan() const { return plan_; }
  std::size_t extensions() const { return extensions_.size(); }

 private:
  std::int64_t plan_time(std::int64_t sim_ms) const;
  std::int64_t sim_time(std::int64_t plan_ms) const;

  PhasePlan plan_;
  std::int64_t start_epoch_ms_;
  std::map<std::int64_t, std::int64_t> extensions_;  // plan-time green end -> extra
};

// ---- vehicles ----

struct StopLineMark {
  double arc_m = 0.0;
  std::uint16_t intersection_id = 0;
  std::uint8_t lane_id = 0;
  std::uint8_t signal_group_id = 0;
};

struct PathSpan {
  double start_m = 0.0;
  double end_m = 0.0;
  std::uint16_t intersection_id = 0;
  std::uint8_t lane_id = 0;
  bool ingress = false;
};

// Polyline in a planar frame, parameterised by arc length.
class Path {
 public:
  Path() = default;
  explicit Path(std::vector<Vec2> points);

  double length() const { return cumulative_.empty() ? 0.0 : cumulative_.back(); }
  Vec2 at(double s) const;
  double heading_at(double s) const;

  const std::vector<Vec2>& points() const { return points_; }
  std::vector<StopLineMark> stop_lines;
  std::vector<PathSpan> spans;
  const PathSpan* span_at(double s) const;
  const StopLineMark* next_stop_line(double s) const;  // first with arc >= s

 private:
  std::size_t segment_at(double s) const;

  std::vector<Vec2> points_;
  std::vector<double> cumulative_;
};

struct RouteItem {
  std::uint16_t intersection_id = 0;
  std::uint8_t lane_id = 0;  // either a lane
  std::string movement;      // or a movement: ingress lane plus its egress
};

// Ingress lanes run toward their stop line, egress lanes away from the
// intersection, with straight connectors in between. Throws ScenarioInvalid.
Path build_path(const std::vector<RouteItem>& route, const std::map<std::uint16_t, IntersectionGeometry>& geometry,
                const LocalFrame& frame);

struct KinematicParams {
  double max_accel_mps2 = 2.0;
  double comfort_decel_mps2 = 3.0;
  double standstill_gap_m = 7.0;  // from a stopped leader
  double stopped_speed_mps = 0.5;
};

struct VirtualVehicle {
  std::uint32_t temp_id = 0;
  std::shared_ptr<const Path> path;
  double s_m = 0.0;
  double speed_mps = 0.0;
  double accel_mps2 = 0.0;
  double target_speed_mps = 11.0;
  std::optional<double> committed_line_m;  // entered the dilemma zone on yellow
};

struct Surroundings {
  std::optional<PhaseState> signal;  // as last heard for the next stop line
  std::optional<double> obstacle_m;  // path position the vehicle must not pass
};

// One step of the longitudinal model. Stops exactly at the stop line or
// obstacle and never passes it.
void advance_vehicle(VirtualVehicle& vehicle, const Surroundings& around, std::int64_t dt_ms,
                     const KinematicParams& params = {});

// BSM for the current state, on the wire grid so a decode reproduces it.
BsmCore vehicle_bsm(std::uint32_t temp_id, GeoPoint position, double speed_mps, double heading_deg,
                    double accel_mps2, std::int64_t epoch_ms);

// Replay-driven vehicle: state is overwritten by records and held in between.
class ObuTwin {
 public:
  explicit ObuTwin(std::uint32_t temp_id) : temp_id_(temp_id) {}

  // False (and the stale counter grows) for records older than the held state.
  bool apply(const IntegratedRecord& record);
  bool apply(const BsmCore& bsm, std::int64_t epoch_ms);

  std::uint32_t temp_id() const { return temp_id_; }
  const std::optional<IntegratedRecord>& state() const { return state_; }
  std::uint64_t stale() const { return stale_; }

 private:
  std::uint32_t temp_id_;
  std::optional<IntegratedRecord> state_;
  std::uint64_t stale_ = 0;
};

// ---- scenario ----

enum class VehicleKind { Virtual, Twin };

struct VehicleSpec {
  std::uint32_t temp_id = 0;
  VehicleKind kind = VehicleKind::Virtual;
  std::int64_t entry_ms = 0;
  double target_speed_mps = 11.0;
  std::vector<RouteItem> route;
  std::vector<IntegratedRecord> replay;  // twins; shifted so the first record lands at entry_ms
};

struct Scenario {
  int year = 2023;
  std::uint32_t moy = 0;
  std::int64_t start_ms_in_minute = 0;
  std::int64_t tick_ms = 100;
  double duration_s = 60.0;
  std::vector<MapMessage> maps;
  std::vector<PhasePlan> plans;
  ChannelConfig channel;
  std::vector<VehicleSpec> vehicles;
  bool apply_green_extension = false;
  FeedbackConfig feedback;
  KinematicParams kinematics;

  std::int64_t start_epoch_ms() const;
};

// Throws ScenarioInvalid naming the offending field.
void check_scenario(const Scenario& scenario);
// Relative replay paths resolve against base_dir.
Scenario parse_scenario(const json& j, const std::filesystem::path& base_dir = {});
Scenario load_scenario(const std::filesystem::path& file);

std::string rsu_id_for(std::uint16_t intersection_id);

struct SimulationResult {
  std::vector<FrameLogEntry> frames;  // ordered by received_at
  json summary;
};

// Deterministic tick loop. The tap sees each frame once, in log order, as soon
// as no later tick can produce an earlier one.
SimulationResult simulate(const Scenario& scenario, const std::function<void(const FrameLogEntry&)>& tap = {});

}  // namespace corridor
