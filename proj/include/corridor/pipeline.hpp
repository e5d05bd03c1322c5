#pragma once

// Ingestion topology: frame sources feed edge workers (decode, time sync,
// lane match) which hand records to a central stage (dedup, vote, archive,
// feedback). Workers talk to the central stage through bounded queues.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "corridor/feedback.hpp"
#include "corridor/fusion.hpp"
#include "corridor/json_io.hpp"

namespace corridor {

using Clock = std::chrono::steady_clock;

// ---- bounded queue ----

inline constexpr std::size_t kDefaultQueueCapacity = 100'000;

// Multi-producer, multi-consumer. A push beyond capacity evicts the oldest
// element and counts it.
template <class T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity = kDefaultQueueCapacity) : capacity_(capacity) {}

  void push(T value) {
    {
      std::lock_guard lock(mu_);
      if (items_.size() >= capacity_) {
        items_.pop_front();
        ++dropped_;
      }
      items_.push_back(std::move(value));
    }
    cv_.notify_one();
  }

  // Blocks until an element is available or the queue is closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    T v = std::move(items_.front());
    items_.pop_front();
    return v;
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  std::uint64_t dropped() const {
    std::lock_guard lock(mu_);
    return dropped_;
  }
  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> items_;
  bool closed_ = false;
  std::uint64_t dropped_ = 0;
};

// ---- topology ----

struct WorkerSpec {
  std::string worker_id;
  std::vector<std::string> rsu_ids;  // "*" takes any RSU nobody else claims
};

struct EdgeTopology {
  std::vector<WorkerSpec> workers;
  std::map<std::string, std::string> failover;  // worker -> backup

  // One worker taking every RSU.
  static EdgeTopology single();
};

// Throws InvalidConfig: duplicate worker ids, an RSU with two owners, more
// than one wildcard, a failover target that does not exist.
void check_topology(const EdgeTopology& topology);

void to_json(json& j, const EdgeTopology& t);
void from_json(const json& j, EdgeTopology& t);

// ---- sources ----

struct SourceStats {
  std::uint64_t lines = 0;
  std::uint64_t frames = 0;
  std::uint64_t malformed = 0;
  std::uint64_t reconnects = 0;
};

void to_json(json& j, const SourceStats& s);

// Parses one frame-log line; nullopt for anything that is not a frame.
std::optional<FrameLogEntry> parse_frame_line(std::string_view line);

class FrameSource {
 public:
  virtual ~FrameSource() = default;
  // nullopt at end of stream.
  virtual std::optional<FrameLogEntry> next() = 0;
  virtual const SourceStats& stats() const = 0;
};

// Frame-log file. With pacing, frames are released at their received_at
// spacing divided by speed.
class FileSource : public FrameSource {
 public:
  explicit FileSource(const std::filesystem::path& path, bool paced = false, double speed = 1.0);
  std::optional<FrameLogEntry> next() override;
  const SourceStats& stats() const override { return stats_; }

 private:
  std::ifstream in_;
  bool paced_;
  double speed_;
  std::optional<std::int64_t> first_ms_;
  Clock::time_point started_;
  SourceStats stats_;
};

std::vector<FrameLogEntry> read_frame_log(const std::filesystem::path& path, SourceStats* stats = nullptr);
void write_frame_log(const std::filesystem::path& path, const std::vector<FrameLogEntry>& frames);

struct Backoff {
  double initial_s = 0.1;
  double cap_s = 10.0;
  int max_attempts = 8;  // consecutive failed connects before giving up
};

// Delay before reconnect attempt n (0-based): initial doubling up to the cap.
double backoff_delay_s(const Backoff& policy, int attempt);

// NDJSON frames over TCP. Sends a subscribe line after connecting and
// reconnects with backoff when the stream drops before its end marker.
class SocketSource : public FrameSource {
 public:
  SocketSource(std::string host, std::uint16_t port, Backoff policy = {});
  ~SocketSource() override;
  SocketSource(const SocketSource&) = delete;
  SocketSource& operator=(const SocketSource&) = delete;

  std::optional<FrameLogEntry> next() override;
  const SourceStats& stats() const override { return stats_; }
  // A raised flag ends the stream at the next interrupted or completed read.
  void set_stop(const std::atomic<bool>* stop) { stop_ = stop; }

 private:
  bool connect_with_backoff();
  std::optional<std::string> read_line();

  std::string host_;
  std::uint16_t port_;
  Backoff policy_;
  int fd_ = -1;
  std::string buffer_;
  bool ended_ = false;
  bool connected_once_ = false;
  const std::atomic<bool>* stop_ = nullptr;
  SourceStats stats_;
};

// Serves frames to one subscriber at a time over loopback TCP.
class FrameServer {
 public:
  explicit FrameServer(std::uint16_t port = 0);  // 0: ephemeral
  ~FrameServer();
  FrameServer(const FrameServer&) = delete;
  FrameServer& operator=(const FrameServer&) = delete;

  std::uint16_t port() const { return port_; }
  // Waits for a client and its subscribe line. False on timeout.
  bool accept_subscriber(std::chrono::milliseconds timeout);
  // False when no subscriber is attached or the write failed.
  bool send(const FrameLogEntry& frame);
  void end();         // end marker, then close the client
  void drop_client();  // close without the end marker

 private:
  bool write_all(const std::string& data);

  int listen_fd_ = -1;
  int client_fd_ = -1;
  std::uint16_t port_ = 0;
};

// ---- archive ----

struct ArchiveQuery {
  std::int64_t from_ms = 0;  // inclusive
  std::int64_t to_ms = 0;    // exclusive
  std::optional<std::uint16_t> intersection_id;
  std::optional<std::uint32_t> vehicle_id;
  bool relevant_only = false;  // long-term store only
};

struct ArchiveCounters {
  std::uint64_t records = 0;
  std::uint64_t relevant = 0;
  std::uint64_t feedback = 0;
  std::uint64_t ring_evicted = 0;
};

// Append-only NDJSON segments per UTC hour under dir/records, dir/relevant
// and dir/feedback, plus an in-memory ring of the most recent records. The
// ring answers queries only when the store started empty.
class ArchiveStore {
 public:
  explicit ArchiveStore(std::filesystem::path dir, std::int64_t ring_ms = 3'600'000);
  ~ArchiveStore();

  void append(const IntegratedRecord& record, bool relevant);
  void append_feedback(const FeedbackMessage& message);
  void flush();

  // Timestamp order, ties by vehicle. Throws InvalidRange when from > to.
  std::vector<IntegratedRecord> query(const ArchiveQuery& q) const;
  std::vector<FeedbackMessage> feedback() const;

  const std::filesystem::path& dir() const { return dir_; }
  ArchiveCounters counters() const;
  std::size_t ring_size() const;

  static std::string segment_name(std::int64_t epoch_ms);

 private:
  std::ofstream& segment(const std::string& kind, std::int64_t epoch_ms);

  std::filesystem::path dir_;
  std::int64_t ring_ms_;
  bool ring_complete_ = true;  // false when the directory held older data
  mutable std::mutex mu_;
  mutable std::map<std::string, std::ofstream> open_;
  struct RingEntry {
    IntegratedRecord record;
    bool relevant = false;
  };
  std::multimap<std::int64_t, RingEntry> ring_;
  std::int64_t newest_ms_ = INT64_MIN;
  std::int64_t ring_floor_ms_ = INT64_MIN;  // ring holds everything at or above
  ArchiveCounters counters_;
};

// ---- workers and central stage ----

struct Frame {
  std::uint64_t seq = 0;
  FrameLogEntry entry;
  Clock::time_point ingested;
};

struct DeadLetter {
  std::string worker_id;
  FrameLogEntry frame;
  std::string reason;
};

void to_json(json& j, const DeadLetter& d);

struct WorkerItem {
  std::uint64_t seq = 0;
  std::string worker_id;
  Copy copy;
  std::optional<IntegratedRecord> record;
  Clock::time_point ingested;
};

struct WorkerCounters {
  std::uint64_t processed = 0;
  std::uint64_t dead_letters = 0;
};

class EdgeWorker {
 public:
  EdgeWorker(WorkerSpec spec, int year, Containment mode = Containment::Hull);

  bool owns(const std::string& rsu_id) const;
  void adopt(const std::vector<std::string>& rsu_ids);
  void preload_map(const MapMessage& map);

  // Throws MisroutedFrame for an RSU this worker does not serve. A frame that
  // fails to decode is dead-lettered and yields nothing.
  std::optional<WorkerItem> process(const Frame& frame);

  const WorkerSpec& spec() const { return spec_; }
  const WorkerCounters& counters() const { return counters_; }
  const FusionStats& fusion() const { return caches_.stats(); }
  std::vector<DeadLetter> take_dead_letters();

 private:
  WorkerSpec spec_;
  std::set<std::string> rsus_;
  bool wildcard_ = false;
  StreamCaches caches_;
  WorkerCounters counters_;
  std::vector<DeadLetter> dead_;
};

struct CentralConfig {
  std::int64_t dedup_window_ms = kDefaultDedupWindowMs;
  // A key already archived is refused for this long afterwards.
  std::int64_t duplicate_horizon_ms = 30'000;
  // RSUs count as active while they delivered within this span.
  std::int64_t active_rsu_span_ms = 1'000;
  int year = 2023;
  FeedbackConfig feedback;
};

struct CentralCounters {
  std::uint64_t items = 0;
  std::uint64_t sets = 0;
  std::uint64_t early_closed = 0;
  std::uint64_t records = 0;
  std::uint64_t duplicates_late = 0;
  std::uint64_t duplicates_same_rsu = 0;
  std::uint64_t dissenting_sets = 0;
  std::uint64_t fallback_records = 0;  // no worker record matched the vote
  std::map<std::string, std::uint64_t> feedback;
};

struct Sinks {
  std::function<void(const IntegratedRecord&)> record;
  std::function<void(const FeedbackMessage&)> feedback;
  std::function<void(const json&)> integrity;
  std::function<void(const DeadLetter&)> dead_letter;
};

class CentralStage {
 public:
  CentralStage(CentralConfig config, ArchiveStore* archive, Sinks sinks);

  void preload_map(const MapMessage& map);
  void push(WorkerItem item);
  void finish();

  const CentralCounters& counters() const { return counters_; }
  // Ingest-to-archive wall latency per record, in microseconds.
  const std::vector<double>& latencies_us() const { return latencies_us_; }

 private:
  struct Held {
    std::string rsu_id;
    std::int64_t received_at_ms;
    Message message;
    std::optional<IntegratedRecord> record;
    Clock::time_point ingested;
  };

  void close_sets(std::vector<CopySet> sets);
  void prune(std::int64_t now_ms);
  void emit(CopySet set);
  std::size_t active_rsus(std::int64_t now_ms);

  CentralConfig config_;
  ArchiveStore* archive_;
  Sinks sinks_;
  DedupWindow window_;
  std::map<DedupKey, std::vector<Held>> held_;
  std::map<DedupKey, std::int64_t> emitted_;
  std::deque<std::pair<std::int64_t, DedupKey>> emitted_order_;
  std::map<std::string, std::int64_t> rsu_last_seen_;
  StreamCaches caches_;
  FeedbackEngine engine_;
  CentralCounters counters_;
  std::vector<double> latencies_us_;
};

struct PipelineConfig {
  CentralConfig central;
  Containment mode = Containment::Hull;
  std::size_t ack_every = 64;  // frames a worker processes between acknowledgements
  std::size_t queue_capacity = kDefaultQueueCapacity;
};

// Synchronous driver: each frame runs router -> worker -> central before the
// call returns, so outputs are a pure function of the input order.
class Pipeline {
 public:
  Pipeline(EdgeTopology topology, PipelineConfig config, ArchiveStore* archive, Sinks sinks);

  void preload_map(const MapMessage& map);
  void ingest(const FrameLogEntry& frame);
  // Hands a frame to a named worker; a misrouted frame is forwarded to its
  // owner and counted.
  void submit_to(const std::string& worker_id, const FrameLogEntry& frame);
  // Cold standby: the backup adopts the worker's RSUs and re-processes every
  // frame the dead worker had not yet acknowledged.
  void fail_worker(const std::string& worker_id);
  void finish();

  json counters() const;
  const CentralStage& central() const { return central_; }
  std::uint64_t frames() const { return seq_; }

 private:
  EdgeWorker& owner_of(const std::string& rsu_id);
  void run_on(EdgeWorker& worker, const Frame& frame);
  void drain_dead_letters(EdgeWorker& worker);

  EdgeTopology topology_;
  PipelineConfig config_;
  Sinks sinks_;
  std::vector<EdgeWorker> workers_;
  std::set<std::string> dead_workers_;
  std::map<std::string, std::deque<Frame>> unacked_;
  std::map<std::string, std::size_t> since_ack_;
  CentralStage central_;
  std::uint64_t seq_ = 0;
  std::uint64_t misrouted_ = 0;
  std::uint64_t replayed_ = 0;
  std::uint64_t unroutable_ = 0;
};

// Threaded driver: the caller's thread routes, one thread per worker, one
// central thread. The central thread restores source order, so results match
// the synchronous driver whenever no queue overflows.
class ThreadedPipeline {
 public:
  ThreadedPipeline(EdgeTopology topology, PipelineConfig config, ArchiveStore* archive, Sinks sinks);

  void preload_map(const MapMessage& map);
  // Runs the source to its end. stop is polled between frames.
  void run(FrameSource& source, const std::atomic<bool>* stop = nullptr);

  json counters() const;
  const std::vector<double>& latencies_us() const { return central_.latencies_us(); }
  std::uint64_t frames() const { return frames_; }

 private:
  EdgeTopology topology_;
  PipelineConfig config_;
  Sinks sinks_;
  std::vector<EdgeWorker> workers_;
  CentralStage central_;
  std::uint64_t frames_ = 0;
  std::uint64_t queue_drops_ = 0;
  std::uint64_t unroutable_ = 0;
  std::uint64_t order_gaps_ = 0;
};

double percentile(std::vector<double> values, double p);

// ---- analysis ----

struct QueuePoint {
  std::int64_t second_epoch_ms = 0;
  std::uint16_t intersection_id = 0;
  std::uint8_t signal_group_id = 0;
  double queue_length_m = 0.0;
};

// Per-second maximum of queue_estimate over each group's fresh records, in
// record order.
std::vector<QueuePoint> queue_series(const std::vector<IntegratedRecord>& records, const FeedbackConfig& cfg);

json analyze_records(const std::vector<IntegratedRecord>& records, const std::vector<FeedbackMessage>& feedback,
                     const FeedbackConfig& cfg);

}  // namespace corridor
