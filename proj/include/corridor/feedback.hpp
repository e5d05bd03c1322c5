#pragma once

// Feedback rules over integrated records: speed advisories, signal timing
// recommendations and incident notifications.

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "corridor/json_io.hpp"
#include "corridor/lanegeo.hpp"
#include "corridor/messages.hpp"
#include "corridor/timesync.hpp"

namespace corridor {

enum class FeedbackType { SignalTimingAdjustment, VehicleAdvisory, IncidentNotification };
enum class IncidentKind { Overspeed, HardBraking, ErraticSpeed, LaneDeviation, WrongWay };

const char* feedback_type_name(FeedbackType type) noexcept;
const char* incident_kind_name(IncidentKind kind) noexcept;

struct AdvisoryPayload {
  double current_speed_mps = 0.0;
  double advisory_speed_mps = 0.0;
  double distance_to_stop_line_m = 0.0;
  std::int64_t remaining_ms = 0;
  bool operator==(const AdvisoryPayload&) const = default;
};

struct TimingPayload {
  double queue_length_m = 0.0;
  double remaining_red_s = 0.0;
  double recommended_extension_s = 0.0;
  bool operator==(const TimingPayload&) const = default;
};

struct IncidentPayload {
  IncidentKind kind = IncidentKind::Overspeed;
  json details = json::object();
  bool operator==(const IncidentPayload&) const = default;
};

struct FeedbackMessage {
  std::int64_t timestamp_epoch_ms = 0;
  std::uint16_t intersection_id = 0;
  std::optional<std::uint8_t> signal_group_id;
  std::optional<std::uint32_t> vehicle_id;
  std::variant<TimingPayload, AdvisoryPayload, IncidentPayload> payload;

  FeedbackType type() const { return static_cast<FeedbackType>(payload.index()); }
  bool operator==(const FeedbackMessage&) const = default;
};

void to_json(json& j, const FeedbackMessage& m);
void from_json(const json& j, FeedbackMessage& m);

struct FeedbackConfig {
  double beta = 0.8;
  double speed_limit_mps = 11.2;
  std::map<std::uint16_t, double> speed_limits;  // per intersection override
  double stopped_speed_mps = 0.5;
  double queue_threshold_m = 40.0;
  double red_threshold_s = 60.0;
  double extension_s = 5.0;
  double hard_braking_mps2 = -4.0;
  double erratic_std_mps = 3.0;
  std::int64_t erratic_window_ms = 5000;
  double wrong_way_deg = 150.0;
  double lane_deviation_radius_m = 100.0;
  std::int64_t advisory_interval_ms = 1000;
  std::int64_t queue_staleness_ms = 1000;
  std::size_t history_size = 50;

  bool advisories = true;
  bool timing = true;
  bool overspeed = true;
  bool hard_braking = true;
  bool erratic_speed = true;
  bool lane_deviation = true;
  bool wrong_way = true;

  double limit_for(std::uint16_t intersection_id) const;
};

void to_json(json& j, const FeedbackConfig& c);
void from_json(const json& j, FeedbackConfig& c);  // missing keys keep defaults

std::optional<AdvisoryPayload> advisory_speed(const IntegratedRecord& record, const SyncedSignalState& signal,
                                              const FeedbackConfig& cfg);

double queue_estimate(const std::vector<IntegratedRecord>& records, const FeedbackConfig& cfg);

// Expects a red signal; returns none otherwise.
std::optional<TimingPayload> signal_timing_recommendation(double queue_m, const SyncedSignalState& signal,
                                                          const FeedbackConfig& cfg);

using VehicleHistory = std::deque<IntegratedRecord>;

// Rules evaluated on the newest record of the history. lanes may be null, in
// which case the geometric rules are skipped.
std::vector<IncidentPayload> detect_incidents(const VehicleHistory& history, const LaneIndex* lanes,
                                              const FeedbackConfig& cfg);

// Convex hull of all stop-line endpoints: the area vehicles cross between
// lanes. Empty when the intersection has fewer than 3 distinct endpoints.
std::vector<Vec2> intersection_box(const IntersectionGeometry& geometry);

// Stateful rule runner with rate limits. Feed records in time order.
class FeedbackEngine {
 public:
  explicit FeedbackEngine(FeedbackConfig cfg);

  void observe_map(const MapMessage& map);
  std::vector<FeedbackMessage> on_record(const IntegratedRecord& record);

  const FeedbackConfig& config() const { return cfg_; }
  const LaneIndex& lanes() const { return lanes_; }
  std::uint64_t emitted() const { return emitted_; }

 private:
  using GroupKey = std::pair<std::uint16_t, std::uint8_t>;

  FeedbackConfig cfg_;
  LaneIndex lanes_;
  std::map<std::uint32_t, VehicleHistory> history_;
  std::map<std::uint32_t, IntegratedRecord> current_;
  std::map<std::uint32_t, std::int64_t> last_advisory_;
  std::map<GroupKey, std::int64_t> timing_red_until_;
  std::set<std::pair<std::uint32_t, IncidentKind>> active_incidents_;
  std::uint64_t emitted_ = 0;
};

std::vector<FeedbackMessage> generate_feedback(const std::vector<MapMessage>& maps,
                                               const std::vector<IntegratedRecord>& records,
                                               const FeedbackConfig& cfg);

}  // namespace corridor
