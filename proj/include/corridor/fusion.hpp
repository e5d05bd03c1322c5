#pragma once

// Message extraction: fuses BSM, SPaT and MAP streams into integrated
// records, and reconciles duplicate copies of one message heard by several
// RSUs.

#include <compare>
#include <cstdint>
#include <map>
#include <set>
#include <optional>
#include <string>
#include <vector>

#include "corridor/json_io.hpp"
#include "corridor/lanegeo.hpp"
#include "corridor/messages.hpp"
#include "corridor/timesync.hpp"

namespace corridor {

struct FusionStats {
  std::uint64_t bsm_frames = 0;
  std::uint64_t spat_frames = 0;
  std::uint64_t map_frames = 0;
  std::uint64_t map_rebuilds = 0;
  std::uint64_t map_rejected = 0;   // lanes failed to build
  std::uint64_t no_spat_context = 0;  // BSM timestamped from receipt time
  std::uint64_t matched = 0;
};

class StreamCaches {
 public:
  explicit StreamCaches(int year, Containment mode = Containment::Hull);

  // SPaT and MAP only update caches. A BSM always yields a record.
  std::optional<IntegratedRecord> ingest(const Message& message, const std::string& rsu_id,
                                         std::int64_t received_at_ms);

  int year() const { return year_; }
  const FusionStats& stats() const { return stats_; }
  const LaneIndex& lanes() const { return lanes_; }
  const SpatMessage* latest_spat(std::uint16_t intersection_id) const;
  const SyncContext* sync_context(const std::string& rsu_id) const;
  const IntegratedRecord* last_record(std::uint32_t temp_id) const;

 private:
  IntegratedRecord fuse(const BsmCore& bsm, const std::string& rsu_id, std::int64_t received_at_ms);

  int year_;
  LaneIndex lanes_;
  std::map<std::string, SyncContext> sync_;
  std::map<std::uint16_t, SpatMessage> spat_;
  std::map<std::uint16_t, std::int64_t> spat_received_at_;
  std::map<std::uint32_t, IntegratedRecord> last_record_;
  FusionStats stats_;
};

// Identity of one over-the-air message regardless of which RSU heard it.
struct DedupKey {
  MsgType type = MsgType::Bsm;
  std::uint32_t id = 0;      // temp_id or intersection_id
  std::uint32_t minute = 0;  // moy for SPaT
  std::uint32_t sub = 0;     // sec_mark or d_second
  auto operator<=>(const DedupKey&) const = default;
};

DedupKey dedup_key(const Message& message);
std::string to_string(const DedupKey& key);

struct Copy {
  std::string rsu_id;
  std::int64_t received_at_ms = 0;
  Message message;
};

struct FieldDissent {
  std::string field;
  std::vector<std::string> dissenting_rsus;
};

struct IntegrityReport {
  DedupKey key;
  std::vector<FieldDissent> dissents;
  bool clean() const { return dissents.empty(); }
};

struct VoteResult {
  Message canonical;
  IntegrityReport report;
};

// Field-wise majority. Ties go to the value seen first in
// (received_at_ms, rsu_id) order. Throws EmptyCopySet.
VoteResult vote(std::vector<Copy> copies);

// One NDJSON object per dissenting field.
std::vector<json> integrity_lines(const IntegrityReport& report);

struct CopySet {
  DedupKey key;
  std::int64_t opened_at_ms = 0;
  std::vector<Copy> copies;
};

inline constexpr std::int64_t kDefaultDedupWindowMs = 100;

// Groups copies by key. The first copy opens a window; copies arriving before
// open + window_ms join it. Sets are emitted once, when time passes the
// deadline, ordered by (deadline, key).
class DedupWindow {
 public:
  explicit DedupWindow(std::int64_t window_ms = kDefaultDedupWindowMs);

  std::vector<CopySet> push(Copy copy);
  std::vector<CopySet> advance(std::int64_t now_ms);
  std::vector<CopySet> flush();
  // Closes one set ahead of its deadline.
  std::optional<CopySet> close(const DedupKey& key);
  const CopySet* find(const DedupKey& key) const;
  std::size_t open_sets() const { return open_.size(); }
  std::int64_t window_ms() const { return window_ms_; }

 private:
  std::int64_t window_ms_;
  std::map<DedupKey, CopySet> open_;
  std::set<std::pair<std::int64_t, DedupKey>> by_open_time_;
};

std::vector<CopySet> dedup_window(const std::vector<Copy>& stream, std::int64_t window_ms);

}  // namespace corridor
