#include "corridor/pipeline.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <thread>

#include <fmt/format.h>

#include "corridor/codec.hpp"
#include "corridor/error.hpp"

namespace corridor {

namespace fs = std::filesystem;

// ---- topology ----

EdgeTopology EdgeTopology::single() {
  EdgeTopology t;
  t.workers.push_back({"edge-1", {"*"}});
  return t;
}

void check_topology(const EdgeTopology& topology) {
  if (topology.workers.empty()) throw Error(Errc::InvalidConfig, "topology has no workers");
  std::set<std::string> ids;
  std::map<std::string, std::string> owner;
  for (const auto& w : topology.workers) {
    if (w.worker_id.empty()) throw Error(Errc::InvalidConfig, "worker with empty id");
    if (!ids.insert(w.worker_id).second) throw Error(Errc::InvalidConfig, "duplicate worker " + w.worker_id);
    for (const auto& rsu : w.rsu_ids) {
      auto [it, fresh] = owner.emplace(rsu, w.worker_id);
      if (!fresh) {
        throw Error(Errc::InvalidConfig,
                    fmt::format("rsu {} assigned to both {} and {}", rsu, it->second, w.worker_id));
      }
    }
  }
  for (const auto& [from, to] : topology.failover) {
    if (!ids.count(from)) throw Error(Errc::InvalidConfig, "failover from unknown worker " + from);
    if (!ids.count(to)) throw Error(Errc::InvalidConfig, "failover to unknown worker " + to);
    if (from == to) throw Error(Errc::InvalidConfig, "worker " + from + " fails over to itself");
  }
}

void to_json(json& j, const EdgeTopology& t) {
  j = json{{"workers", json::array()}, {"failover", t.failover}};
  for (const auto& w : t.workers) j["workers"].push_back({{"id", w.worker_id}, {"rsus", w.rsu_ids}});
}

void from_json(const json& j, EdgeTopology& t) {
  t = {};
  try {
    for (const auto& w : j.at("workers")) {
      t.workers.push_back({w.at("id").get<std::string>(), w.value("rsus", std::vector<std::string>{})});
    }
    t.failover = j.value("failover", std::map<std::string, std::string>{});
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("topology: ") + e.what());
  }
}

// ---- sources ----

void to_json(json& j, const SourceStats& s) {
  j = json{{"lines", s.lines}, {"frames", s.frames}, {"malformed", s.malformed}, {"reconnects", s.reconnects}};
}

std::optional<FrameLogEntry> parse_frame_line(std::string_view line) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  auto rsu = j.find("rsu_id");
  auto at = j.find("received_at_ms");
  auto hex = j.find("payload_hex");
  if (rsu == j.end() || !rsu->is_string() || at == j.end() || !at->is_number_integer() || hex == j.end() ||
      !hex->is_string()) {
    return std::nullopt;
  }
  return FrameLogEntry{rsu->get<std::string>(), at->get<std::int64_t>(), hex->get<std::string>()};
}

namespace {

bool blank(std::string_view line) {
  return line.find_first_not_of(" \t\r") == std::string_view::npos;
}

}  // namespace

FileSource::FileSource(const fs::path& path, bool paced, double speed)
    : in_(path), paced_(paced), speed_(speed > 0 ? speed : 1.0), started_(Clock::now()) {
  if (!in_) throw Error(Errc::SourceUnavailable, "cannot open " + path.string());
}

std::optional<FrameLogEntry> FileSource::next() {
  std::string line;
  while (std::getline(in_, line)) {
    if (blank(line)) continue;
    ++stats_.lines;
    auto frame = parse_frame_line(line);
    if (!frame) {
      ++stats_.malformed;
      continue;
    }
    ++stats_.frames;
    if (paced_) {
      if (!first_ms_) {
        first_ms_ = frame->received_at_ms;
        started_ = Clock::now();
      }
      auto offset = std::chrono::duration<double, std::milli>((frame->received_at_ms - *first_ms_) / speed_);
      std::this_thread::sleep_until(started_ + std::chrono::duration_cast<Clock::duration>(offset));
    }
    return frame;
  }
  return std::nullopt;
}

std::vector<FrameLogEntry> read_frame_log(const fs::path& path, SourceStats* stats) {
  FileSource source(path);
  std::vector<FrameLogEntry> out;
  while (auto f = source.next()) out.push_back(std::move(*f));
  if (stats) *stats = source.stats();
  return out;
}

void write_frame_log(const fs::path& path, const std::vector<FrameLogEntry>& frames) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::SourceUnavailable, "cannot write " + path.string());
  for (const auto& f : frames) out << to_ndjson_line(json(f));
}

double backoff_delay_s(const Backoff& policy, int attempt) {
  double d = policy.initial_s * std::ldexp(1.0, std::clamp(attempt, 0, 60));
  return std::min(d, policy.cap_s);
}

SocketSource::SocketSource(std::string host, std::uint16_t port, Backoff policy)
    : host_(std::move(host)), port_(port), policy_(policy) {}

SocketSource::~SocketSource() {
  if (fd_ >= 0) ::close(fd_);
}

namespace {

int connect_once(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0) return -1;
  int fd = -1;
  for (auto* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  return fd;
}

bool send_all(int fd, const std::string& data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

}  // namespace

bool SocketSource::connect_with_backoff() {
  for (int attempt = 0; attempt < policy_.max_attempts; ++attempt) {
    if (attempt > 0 || connected_once_) {
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff_delay_s(policy_, attempt)));
    }
    int fd = connect_once(host_, port_);
    if (fd < 0) continue;
    if (!send_all(fd, to_ndjson_line(json{{"cmd", "subscribe"}}))) {
      ::close(fd);
      continue;
    }
    if (connected_once_) ++stats_.reconnects;
    connected_once_ = true;
    fd_ = fd;
    buffer_.clear();
    return true;
  }
  return false;
}

std::optional<std::string> SocketSource::read_line() {
  for (;;) {
    auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return line;
    }
    char chunk[65536];
    if (stop_) {
      // Wake up regularly so a raised stop flag is noticed on a quiet feed.
      pollfd p{fd_, POLLIN, 0};
      int ready = ::poll(&p, 1, 200);
      if (stop_->load()) return std::nullopt;
      if (ready == 0 || (ready < 0 && errno == EINTR)) continue;
    }
    ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return std::nullopt;
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

std::optional<FrameLogEntry> SocketSource::next() {
  while (!ended_) {
    if (stop_ && stop_->load()) break;
    if (fd_ < 0 && !connect_with_backoff()) {
      throw Error(Errc::SourceUnavailable,
                  fmt::format("{}:{} unreachable after {} attempts", host_, port_, policy_.max_attempts));
    }
    auto line = read_line();
    if (!line) {
      ::close(fd_);
      fd_ = -1;
      continue;
    }
    if (blank(*line)) continue;
    ++stats_.lines;
    json j = json::parse(*line, nullptr, false);
    if (!j.is_discarded() && j.is_object() && j.value("end", false)) {
      ended_ = true;
      ::close(fd_);
      fd_ = -1;
      break;
    }
    auto frame = parse_frame_line(*line);
    if (!frame) {
      ++stats_.malformed;
      continue;
    }
    ++stats_.frames;
    return frame;
  }
  return std::nullopt;
}

FrameServer::FrameServer(std::uint16_t port) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw Error(Errc::SourceUnavailable, std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 4) != 0) {
    int err = errno;
    ::close(listen_fd_);
    throw Error(Errc::SourceUnavailable, fmt::format("bind 127.0.0.1:{}: {}", port, std::strerror(err)));
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

FrameServer::~FrameServer() {
  drop_client();
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

bool FrameServer::accept_subscriber(std::chrono::milliseconds timeout) {
  drop_client();
  auto deadline = Clock::now() + timeout;
  auto remaining = [&] {
    return static_cast<int>(
        std::max<std::int64_t>(0, std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count()));
  };
  pollfd p{listen_fd_, POLLIN, 0};
  if (::poll(&p, 1, remaining()) <= 0) return false;
  int fd = ::accept(listen_fd_, nullptr, nullptr);
  if (fd < 0) return false;
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  std::string line;
  while (line.find('\n') == std::string::npos) {
    pollfd c{fd, POLLIN, 0};
    char buf[256];
    ssize_t n = 0;
    if (::poll(&c, 1, remaining()) <= 0 || (n = ::recv(fd, buf, sizeof buf, 0)) <= 0) {
      ::close(fd);
      return false;
    }
    line.append(buf, static_cast<std::size_t>(n));
  }
  json j = json::parse(line.substr(0, line.find('\n')), nullptr, false);
  if (j.is_discarded() || !j.is_object() || j.value("cmd", "") != "subscribe") {
    ::close(fd);
    return false;
  }
  client_fd_ = fd;
  return true;
}

bool FrameServer::write_all(const std::string& data) {
  if (client_fd_ < 0) return false;
  if (!send_all(client_fd_, data)) {
    drop_client();
    return false;
  }
  return true;
}

bool FrameServer::send(const FrameLogEntry& frame) { return write_all(to_ndjson_line(json(frame))); }

void FrameServer::end() {
  write_all(to_ndjson_line(json{{"end", true}}));
  drop_client();
}

void FrameServer::drop_client() {
  if (client_fd_ >= 0) {
    ::shutdown(client_fd_, SHUT_RDWR);
    ::close(client_fd_);
    client_fd_ = -1;
  }
}

// ---- archive ----

std::string ArchiveStore::segment_name(std::int64_t epoch_ms) {
  using namespace std::chrono;
  sys_time<milliseconds> t{milliseconds{epoch_ms}};
  auto day = floor<days>(t);
  year_month_day ymd{day};
  auto hour = duration_cast<hours>(t - day).count();
  return fmt::format("seg-{:04}{:02}{:02}{:02}.ndjson", static_cast<int>(ymd.year()),
                     static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), hour);
}

namespace {

constexpr const char* kRecordsDir = "records";
constexpr const char* kRelevantDir = "relevant";
constexpr const char* kFeedbackDir = "feedback";

bool has_segments(const fs::path& dir) {
  if (!fs::exists(dir)) return false;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".ndjson") return true;
  }
  return false;
}

std::vector<fs::path> segments(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    auto name = e.path().filename().string();
    if (name.starts_with("seg-") && e.path().extension() == ".ndjson") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool matches(const IntegratedRecord& r, const ArchiveQuery& q) {
  if (r.timestamp_epoch_ms < q.from_ms || r.timestamp_epoch_ms >= q.to_ms) return false;
  if (q.vehicle_id && r.temp_id != *q.vehicle_id) return false;
  if (q.intersection_id && r.matched_intersection_id != q.intersection_id) return false;
  return true;
}

void sort_records(std::vector<IntegratedRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.timestamp_epoch_ms, a.temp_id) < std::tie(b.timestamp_epoch_ms, b.temp_id);
  });
}

}  // namespace

ArchiveStore::ArchiveStore(fs::path dir, std::int64_t ring_ms) : dir_(std::move(dir)), ring_ms_(ring_ms) {
  for (const char* kind : {kRecordsDir, kRelevantDir, kFeedbackDir}) {
    if (has_segments(dir_ / kind)) ring_complete_ = false;
    fs::create_directories(dir_ / kind);
  }
}

ArchiveStore::~ArchiveStore() { flush(); }

std::ofstream& ArchiveStore::segment(const std::string& kind, std::int64_t epoch_ms) {
  auto path = (dir_ / kind / segment_name(epoch_ms)).string();
  auto it = open_.find(path);
  if (it == open_.end()) {
    it = open_.emplace(path, std::ofstream(path, std::ios::binary | std::ios::app)).first;
    if (!it->second) throw Error(Errc::SourceUnavailable, "cannot append to " + path);
  }
  return it->second;
}

void ArchiveStore::append(const IntegratedRecord& record, bool relevant) {
  std::lock_guard lock(mu_);
  std::string line = to_ndjson_line(json(record));
  segment(kRecordsDir, record.timestamp_epoch_ms) << line;
  ++counters_.records;
  if (relevant) {
    segment(kRelevantDir, record.timestamp_epoch_ms) << line;
    ++counters_.relevant;
  }
  if (record.timestamp_epoch_ms < ring_floor_ms_) return;
  ring_.emplace(record.timestamp_epoch_ms, RingEntry{record, relevant});
  newest_ms_ = std::max(newest_ms_, record.timestamp_epoch_ms);
  while (!ring_.empty() && ring_.begin()->first < newest_ms_ - ring_ms_) {
    ring_floor_ms_ = std::max(ring_floor_ms_, ring_.begin()->first + 1);
    ring_.erase(ring_.begin());
    ++counters_.ring_evicted;
  }
}

void ArchiveStore::append_feedback(const FeedbackMessage& message) {
  std::lock_guard lock(mu_);
  segment(kFeedbackDir, message.timestamp_epoch_ms) << to_ndjson_line(json(message));
  ++counters_.feedback;
}

void ArchiveStore::flush() {
  std::lock_guard lock(mu_);
  for (auto& [_, out] : open_) out.flush();
}

std::vector<IntegratedRecord> ArchiveStore::query(const ArchiveQuery& q) const {
  if (q.from_ms > q.to_ms) {
    throw Error(Errc::InvalidRange, fmt::format("from {} is after to {}", q.from_ms, q.to_ms));
  }
  std::lock_guard lock(mu_);
  std::vector<IntegratedRecord> out;
  if (q.from_ms == q.to_ms) return out;

  if (ring_complete_ && q.from_ms >= ring_floor_ms_) {
    for (auto it = ring_.lower_bound(q.from_ms); it != ring_.end() && it->first < q.to_ms; ++it) {
      if ((!q.relevant_only || it->second.relevant) && matches(it->second.record, q)) {
        out.push_back(it->second.record);
      }
    }
    sort_records(out);
    return out;
  }

  for (auto& [_, stream] : open_) stream.flush();
  // Hour segments can only hold records of their own hour.
  constexpr std::int64_t kYear10000 = 253'402'300'800'000;
  const bool bounded = q.from_ms >= 0 && q.to_ms <= kYear10000;
  const auto lo = bounded ? segment_name(q.from_ms) : std::string();
  const auto hi = bounded ? segment_name(q.to_ms - 1) : std::string();
  for (const auto& path : segments(dir_ / (q.relevant_only ? kRelevantDir : kRecordsDir))) {
    auto name = path.filename().string();
    if (bounded && (name < lo || name > hi)) continue;
    std::ifstream in(path, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      if (blank(line)) continue;
      auto r = json::parse(line).get<IntegratedRecord>();
      if (matches(r, q)) out.push_back(std::move(r));
    }
  }
  sort_records(out);
  return out;
}

std::vector<FeedbackMessage> ArchiveStore::feedback() const {
  std::lock_guard lock(mu_);
  for (auto& [_, stream] : open_) stream.flush();
  std::vector<FeedbackMessage> out;
  for (const auto& path : segments(dir_ / kFeedbackDir)) {
    std::ifstream in(path, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      if (!blank(line)) out.push_back(json::parse(line).get<FeedbackMessage>());
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.timestamp_epoch_ms < b.timestamp_epoch_ms; });
  return out;
}

ArchiveCounters ArchiveStore::counters() const {
  std::lock_guard lock(mu_);
  return counters_;
}

std::size_t ArchiveStore::ring_size() const {
  std::lock_guard lock(mu_);
  return ring_.size();
}

// ---- edge worker ----

void to_json(json& j, const DeadLetter& d) {
  j = json{{"worker_id", d.worker_id}, {"frame", d.frame}, {"reason", d.reason}};
}

EdgeWorker::EdgeWorker(WorkerSpec spec, int year, Containment mode) : spec_(std::move(spec)), caches_(year, mode) {
  std::vector<std::string> initial;
  initial.swap(spec_.rsu_ids);
  adopt(initial);
}

bool EdgeWorker::owns(const std::string& rsu_id) const { return wildcard_ || rsus_.count(rsu_id) > 0; }

void EdgeWorker::adopt(const std::vector<std::string>& rsu_ids) {
  for (const auto& r : rsu_ids) {
    if (r == "*") {
      wildcard_ = true;
    } else {
      rsus_.insert(r);
    }
    if (std::find(spec_.rsu_ids.begin(), spec_.rsu_ids.end(), r) == spec_.rsu_ids.end()) spec_.rsu_ids.push_back(r);
  }
}

void EdgeWorker::preload_map(const MapMessage& map) { caches_.ingest(map, "", 0); }

std::optional<WorkerItem> EdgeWorker::process(const Frame& frame) {
  if (!owns(frame.entry.rsu_id)) {
    throw Error(Errc::MisroutedFrame, fmt::format("{} does not serve {}", spec_.worker_id, frame.entry.rsu_id));
  }
  ++counters_.processed;
  try {
    Message message = decode_frame(frame.entry.payload_hex);
    auto record = caches_.ingest(message, frame.entry.rsu_id, frame.entry.received_at_ms);
    return WorkerItem{frame.seq, spec_.worker_id, Copy{frame.entry.rsu_id, frame.entry.received_at_ms, std::move(message)},
                      std::move(record), frame.ingested};
  } catch (const Error& e) {
    ++counters_.dead_letters;
    dead_.push_back({spec_.worker_id, frame.entry, e.what()});
    return std::nullopt;
  }
}

std::vector<DeadLetter> EdgeWorker::take_dead_letters() {
  std::vector<DeadLetter> out;
  out.swap(dead_);
  return out;
}

// ---- central stage ----

CentralStage::CentralStage(CentralConfig config, ArchiveStore* archive, Sinks sinks)
    : config_(std::move(config)),
      archive_(archive),
      sinks_(std::move(sinks)),
      window_(config_.dedup_window_ms),
      caches_(config_.year),
      engine_(config_.feedback) {}

void CentralStage::preload_map(const MapMessage& map) {
  caches_.ingest(map, "", 0);
  engine_.observe_map(map);
}

std::size_t CentralStage::active_rsus(std::int64_t now_ms) {
  std::size_t n = 0;
  for (const auto& [_, seen] : rsu_last_seen_) {
    if (now_ms - seen <= config_.active_rsu_span_ms) ++n;
  }
  return std::max<std::size_t>(n, 1);
}

void CentralStage::prune(std::int64_t now_ms) {
  while (!emitted_order_.empty() && emitted_order_.front().first < now_ms - config_.duplicate_horizon_ms) {
    auto [at, key] = emitted_order_.front();
    emitted_order_.pop_front();
    auto it = emitted_.find(key);
    if (it != emitted_.end() && it->second == at) emitted_.erase(it);
  }
}

void CentralStage::push(WorkerItem item) {
  ++counters_.items;
  const std::int64_t now = item.copy.received_at_ms;
  const DedupKey key = dedup_key(item.copy.message);
  auto& seen = rsu_last_seen_[item.copy.rsu_id];
  seen = std::max(seen, now);

  close_sets(window_.advance(now));
  prune(now);

  // Maps repeat unchanged every second, so only BSM and SPaT keys are
  // unique enough to refuse repeats.
  if (key.type != MsgType::Map && emitted_.count(key)) {
    ++counters_.duplicates_late;
    return;
  }
  if (const CopySet* open = window_.find(key)) {
    for (const auto& c : open->copies) {
      if (c.rsu_id == item.copy.rsu_id) {
        ++counters_.duplicates_same_rsu;
        return;
      }
    }
  }

  held_[key].push_back(Held{item.copy.rsu_id, item.copy.received_at_ms, item.copy.message, std::move(item.record),
                            item.ingested});
  close_sets(window_.push(std::move(item.copy)));

  if (const CopySet* open = window_.find(key)) {
    std::set<std::string> rsus;
    for (const auto& c : open->copies) rsus.insert(c.rsu_id);
    if (rsus.size() >= active_rsus(now)) {
      if (auto set = window_.close(key)) {
        ++counters_.early_closed;
        emit(std::move(*set));
      }
    }
  }
}

void CentralStage::finish() { close_sets(window_.flush()); }

void CentralStage::close_sets(std::vector<CopySet> sets) {
  for (auto& s : sets) emit(std::move(s));
}

void CentralStage::emit(CopySet set) {
  ++counters_.sets;
  auto held_it = held_.find(set.key);
  std::vector<Held> held;
  if (held_it != held_.end()) {
    held = std::move(held_it->second);
    held_.erase(held_it);
  }
  std::sort(held.begin(), held.end(), [](const Held& a, const Held& b) {
    return std::tie(a.received_at_ms, a.rsu_id) < std::tie(b.received_at_ms, b.rsu_id);
  });

  std::set<std::string> rsus;
  for (const auto& c : set.copies) rsus.insert(c.rsu_id);
  const std::int64_t first_at = set.copies.empty() ? 0 : set.opened_at_ms;

  VoteResult result = vote(std::move(set.copies));
  if (!result.report.clean()) {
    ++counters_.dissenting_sets;
    if (sinks_.integrity) {
      for (const auto& line : integrity_lines(result.report)) sinks_.integrity(line);
    }
  }
  emitted_[set.key] = first_at;
  emitted_order_.emplace_back(first_at, set.key);

  if (message_type(result.canonical) != MsgType::Bsm) {
    for (const auto& rsu : rsus) {
      // Sorted RSU order keeps the fallback caches deterministic.
      std::int64_t at = first_at;
      for (const auto& h : held) {
        if (h.rsu_id == rsu) {
          at = h.received_at_ms;
          break;
        }
      }
      caches_.ingest(result.canonical, rsu, at);
    }
    if (const auto* map = std::get_if<MapMessage>(&result.canonical)) engine_.observe_map(*map);
    return;
  }

  std::optional<IntegratedRecord> record;
  for (const auto& h : held) {
    if (h.record && h.message == result.canonical) {
      record = h.record;
      break;
    }
  }
  if (!record) {
    ++counters_.fallback_records;
    const Held* first = held.empty() ? nullptr : &held.front();
    record = caches_.ingest(result.canonical, first ? first->rsu_id : *rsus.begin(), first ? first->received_at_ms : first_at);
  }
  if (!record) return;
  record->source_rsu_ids.assign(rsus.begin(), rsus.end());

  auto feedback = engine_.on_record(*record);
  bool relevant = record->matched_lane_id.has_value() || !feedback.empty();
  if (archive_) archive_->append(*record, relevant);
  ++counters_.records;
  if (!held.empty()) {
    auto earliest = std::min_element(held.begin(), held.end(),
                                     [](const Held& a, const Held& b) { return a.ingested < b.ingested; })
                        ->ingested;
    latencies_us_.push_back(std::chrono::duration<double, std::micro>(Clock::now() - earliest).count());
  }
  if (sinks_.record) sinks_.record(*record);
  for (const auto& f : feedback) {
    ++counters_.feedback[feedback_type_name(f.type())];
    if (archive_) archive_->append_feedback(f);
    if (sinks_.feedback) sinks_.feedback(f);
  }
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(std::clamp(p, 0.0, 100.0) / 100.0 * values.size()));
  return values[rank == 0 ? 0 : rank - 1];
}

namespace {

json central_json(const CentralStage& c) {
  const auto& k = c.counters();
  return json{{"items", k.items},
              {"sets", k.sets},
              {"early_closed", k.early_closed},
              {"records", k.records},
              {"duplicates_late", k.duplicates_late},
              {"duplicates_same_rsu", k.duplicates_same_rsu},
              {"dissenting_sets", k.dissenting_sets},
              {"fallback_records", k.fallback_records},
              {"feedback", k.feedback},
              {"latency_ms",
               {{"p50", percentile(c.latencies_us(), 50) / 1000.0}, {"p99", percentile(c.latencies_us(), 99) / 1000.0}}}};
}

json worker_json(const EdgeWorker& w, bool alive) {
  const auto& f = w.fusion();
  return json{{"id", w.spec().worker_id},
              {"alive", alive},
              {"rsus", w.spec().rsu_ids},
              {"processed", w.counters().processed},
              {"dead_letters", w.counters().dead_letters},
              {"bsm", f.bsm_frames},
              {"spat", f.spat_frames},
              {"map", f.map_frames},
              {"matched", f.matched},
              {"no_spat_context", f.no_spat_context}};
}

std::vector<EdgeWorker> make_workers(const EdgeTopology& topology, const PipelineConfig& config) {
  check_topology(topology);
  std::vector<EdgeWorker> workers;
  for (const auto& spec : topology.workers) workers.emplace_back(spec, config.central.year, config.mode);
  return workers;
}

// Explicit assignment wins over a wildcard.
template <class Workers, class Alive>
auto* find_owner(Workers& workers, const std::string& rsu_id, Alive alive) {
  decltype(&workers.front()) wildcard = nullptr;
  for (auto& w : workers) {
    if (!alive(w)) continue;
    const auto& ids = w.spec().rsu_ids;
    if (std::find(ids.begin(), ids.end(), rsu_id) != ids.end()) return &w;
    if (!wildcard && w.owns(rsu_id)) wildcard = &w;
  }
  return wildcard;
}

}  // namespace

// ---- synchronous pipeline ----

Pipeline::Pipeline(EdgeTopology topology, PipelineConfig config, ArchiveStore* archive, Sinks sinks)
    : topology_(std::move(topology)),
      config_(std::move(config)),
      sinks_(sinks),
      workers_(make_workers(topology_, config_)),
      central_(config_.central, archive, std::move(sinks)) {}

void Pipeline::preload_map(const MapMessage& map) {
  for (auto& w : workers_) w.preload_map(map);
  central_.preload_map(map);
}

EdgeWorker& Pipeline::owner_of(const std::string& rsu_id) {
  auto* w = find_owner(workers_, rsu_id, [&](const EdgeWorker& x) { return !dead_workers_.count(x.spec().worker_id); });
  if (!w) throw Error(Errc::MisroutedFrame, "no live worker serves " + rsu_id);
  return *w;
}

void Pipeline::drain_dead_letters(EdgeWorker& worker) {
  for (auto& d : worker.take_dead_letters()) {
    if (sinks_.dead_letter) sinks_.dead_letter(d);
  }
}

void Pipeline::run_on(EdgeWorker& worker, const Frame& frame) {
  auto item = worker.process(frame);
  const auto& id = worker.spec().worker_id;
  unacked_[id].push_back(frame);
  drain_dead_letters(worker);
  if (item) central_.push(std::move(*item));
  if (++since_ack_[id] >= config_.ack_every) {
    unacked_[id].clear();
    since_ack_[id] = 0;
  }
}

void Pipeline::ingest(const FrameLogEntry& entry) {
  Frame frame{++seq_, entry, Clock::now()};
  EdgeWorker* owner = nullptr;
  try {
    owner = &owner_of(entry.rsu_id);
  } catch (const Error& e) {
    ++unroutable_;
    if (sinks_.dead_letter) sinks_.dead_letter({"", entry, e.what()});
    return;
  }
  run_on(*owner, frame);
}

void Pipeline::submit_to(const std::string& worker_id, const FrameLogEntry& entry) {
  auto it = std::find_if(workers_.begin(), workers_.end(),
                         [&](const EdgeWorker& w) { return w.spec().worker_id == worker_id; });
  if (it == workers_.end() || dead_workers_.count(worker_id)) {
    throw Error(Errc::InvalidConfig, "no live worker " + worker_id);
  }
  Frame frame{++seq_, entry, Clock::now()};
  try {
    run_on(*it, frame);
  } catch (const Error& e) {
    if (e.code() != Errc::MisroutedFrame) throw;
    ++misrouted_;
    EdgeWorker* owner = nullptr;
    try {
      owner = &owner_of(entry.rsu_id);
    } catch (const Error& none) {
      ++unroutable_;
      if (sinks_.dead_letter) sinks_.dead_letter({worker_id, entry, none.what()});
      return;
    }
    run_on(*owner, frame);
  }
}

void Pipeline::fail_worker(const std::string& worker_id) {
  auto failed = std::find_if(workers_.begin(), workers_.end(),
                             [&](const EdgeWorker& w) { return w.spec().worker_id == worker_id; });
  if (failed == workers_.end() || dead_workers_.count(worker_id)) {
    throw Error(Errc::InvalidConfig, "no live worker " + worker_id);
  }
  // Follow the chain past backups that are already down.
  std::string backup_id = worker_id;
  for (std::size_t hops = 0; hops <= workers_.size(); ++hops) {
    auto f = topology_.failover.find(backup_id);
    if (f == topology_.failover.end()) break;
    backup_id = f->second;
    if (!dead_workers_.count(backup_id) && backup_id != worker_id) break;
  }
  auto backup = std::find_if(workers_.begin(), workers_.end(),
                             [&](const EdgeWorker& w) { return w.spec().worker_id == backup_id; });
  if (backup_id == worker_id || backup == workers_.end() || dead_workers_.count(backup_id)) {
    throw Error(Errc::InvalidConfig, "no live backup for " + worker_id);
  }
  dead_workers_.insert(worker_id);
  backup->adopt(failed->spec().rsu_ids);
  auto pending = std::move(unacked_[worker_id]);
  unacked_.erase(worker_id);
  since_ack_.erase(worker_id);
  for (const auto& frame : pending) {
    ++replayed_;
    run_on(*backup, frame);
  }
}

void Pipeline::finish() { central_.finish(); }

json Pipeline::counters() const {
  json workers = json::array();
  for (const auto& w : workers_) workers.push_back(worker_json(w, !dead_workers_.count(w.spec().worker_id)));
  return json{{"mode", "sync"},
              {"frames", seq_},
              {"misrouted", misrouted_},
              {"replayed", replayed_},
              {"unroutable", unroutable_},
              {"queue_drops", 0},
              {"workers", workers},
              {"central", central_json(central_)}};
}

// ---- threaded pipeline ----

ThreadedPipeline::ThreadedPipeline(EdgeTopology topology, PipelineConfig config, ArchiveStore* archive, Sinks sinks)
    : topology_(std::move(topology)),
      config_(std::move(config)),
      sinks_(sinks),
      workers_(make_workers(topology_, config_)),
      central_(config_.central, archive, std::move(sinks)) {}

void ThreadedPipeline::preload_map(const MapMessage& map) {
  for (auto& w : workers_) w.preload_map(map);
  central_.preload_map(map);
}

namespace {

struct WorkerOutput {
  std::uint64_t seq = 0;
  std::optional<WorkerItem> item;
  std::vector<DeadLetter> dead;
};

}  // namespace

void ThreadedPipeline::run(FrameSource& source, const std::atomic<bool>* stop) {
  const std::size_t n = workers_.size();
  std::vector<std::unique_ptr<BoundedQueue<Frame>>> inbox;
  std::vector<std::unique_ptr<BoundedQueue<WorkerOutput>>> outbox;
  for (std::size_t i = 0; i < n; ++i) {
    inbox.push_back(std::make_unique<BoundedQueue<Frame>>(config_.queue_capacity));
    outbox.push_back(std::make_unique<BoundedQueue<WorkerOutput>>(config_.queue_capacity));
  }
  BoundedQueue<std::pair<std::uint64_t, std::size_t>> order(config_.queue_capacity);

  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < n; ++i) {
    threads.emplace_back([&, i] {
      auto& worker = workers_[i];
      while (auto frame = inbox[i]->pop()) {
        WorkerOutput out{frame->seq, worker.process(*frame), worker.take_dead_letters()};
        outbox[i]->push(std::move(out));
      }
      outbox[i]->close();
    });
  }

  std::thread central([&] {
    std::vector<std::deque<WorkerOutput>> pending(n);
    std::vector<bool> exhausted(n, false);
    while (auto next = order.pop()) {
      auto [seq, w] = *next;
      auto& q = pending[w];
      for (;;) {
        while (!q.empty() && q.front().seq < seq) {
          q.pop_front();
          ++order_gaps_;
        }
        if (!q.empty() || exhausted[w]) break;
        if (auto out = outbox[w]->pop()) {
          q.push_back(std::move(*out));
        } else {
          exhausted[w] = true;
        }
      }
      if (q.empty() || q.front().seq != seq) {
        ++order_gaps_;  // the frame was dropped on the way in
        continue;
      }
      auto out = std::move(q.front());
      q.pop_front();
      for (const auto& d : out.dead) {
        if (sinks_.dead_letter) sinks_.dead_letter(d);
      }
      if (out.item) central_.push(std::move(*out.item));
    }
    central_.finish();
  });

  std::uint64_t seq = 0;
  while (!(stop && stop->load())) {
    auto entry = source.next();
    if (!entry) break;
    ++frames_;
    auto* owner = find_owner(workers_, entry->rsu_id, [](const EdgeWorker&) { return true; });
    if (!owner) {
      ++unroutable_;
      continue;
    }
    auto w = static_cast<std::size_t>(owner - workers_.data());
    Frame frame{++seq, std::move(*entry), Clock::now()};
    order.push({frame.seq, w});
    inbox[w]->push(std::move(frame));
  }
  for (auto& q : inbox) q->close();
  order.close();
  for (auto& t : threads) t.join();
  central.join();

  queue_drops_ = order.dropped();
  for (std::size_t i = 0; i < n; ++i) queue_drops_ += inbox[i]->dropped() + outbox[i]->dropped();
}

json ThreadedPipeline::counters() const {
  json workers = json::array();
  for (const auto& w : workers_) workers.push_back(worker_json(w, true));
  return json{{"mode", "threaded"},
              {"frames", frames_},
              {"misrouted", 0},
              {"replayed", 0},
              {"unroutable", unroutable_},
              {"queue_drops", queue_drops_},
              {"order_gaps", order_gaps_},
              {"workers", workers},
              {"central", central_json(central_)}};
}

// ---- analysis ----

std::vector<QueuePoint> queue_series(const std::vector<IntegratedRecord>& records, const FeedbackConfig& cfg) {
  using GroupKey = std::tuple<std::int64_t, std::uint16_t, std::uint8_t>;
  std::map<std::uint32_t, IntegratedRecord> current;
  std::map<GroupKey, double> points;
  for (const auto& rec : records) {
    auto& slot = current[rec.temp_id];
    if (slot.temp_id == rec.temp_id && slot.timestamp_epoch_ms > rec.timestamp_epoch_ms) continue;
    slot = rec;
    if (!rec.matched_intersection_id || !rec.signal_group_id) continue;
    std::vector<IntegratedRecord> group;
    for (const auto& [_, r] : current) {
      if (r.matched_intersection_id == rec.matched_intersection_id && r.signal_group_id == rec.signal_group_id &&
          rec.timestamp_epoch_ms - r.timestamp_epoch_ms <= cfg.queue_staleness_ms) {
        group.push_back(r);
      }
    }
    std::int64_t second = rec.timestamp_epoch_ms - ((rec.timestamp_epoch_ms % 1000) + 1000) % 1000;
    auto& q = points[{second, *rec.matched_intersection_id, *rec.signal_group_id}];
    q = std::max(q, queue_estimate(group, cfg));
  }
  std::vector<QueuePoint> out;
  for (const auto& [k, q] : points) out.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k), q});
  return out;
}

namespace {

json speed_stats(const std::vector<double>& speeds) {
  return json{{"count", speeds.size()},
              {"p50", percentile(speeds, 50)},
              {"p85", percentile(speeds, 85)},
              {"p95", percentile(speeds, 95)},
              {"max", speeds.empty() ? 0.0 : *std::max_element(speeds.begin(), speeds.end())}};
}

}  // namespace

json analyze_records(const std::vector<IntegratedRecord>& records, const std::vector<FeedbackMessage>& feedback,
                     const FeedbackConfig& cfg) {
  std::set<std::uint32_t> vehicles;
  std::vector<double> speeds;
  struct PerIntersection {
    std::uint64_t records = 0;
    std::set<std::uint32_t> vehicles;
    std::vector<double> speeds;
  };
  std::map<std::uint16_t, PerIntersection> per;
  std::optional<std::int64_t> first, last;
  for (const auto& r : records) {
    vehicles.insert(r.temp_id);
    if (r.speed_mps) speeds.push_back(*r.speed_mps);
    first = std::min(first.value_or(r.timestamp_epoch_ms), r.timestamp_epoch_ms);
    last = std::max(last.value_or(r.timestamp_epoch_ms), r.timestamp_epoch_ms);
    if (r.matched_intersection_id) {
      auto& p = per[*r.matched_intersection_id];
      ++p.records;
      p.vehicles.insert(r.temp_id);
      if (r.speed_mps) p.speeds.push_back(*r.speed_mps);
    }
  }
  json intersections = json::array();
  for (const auto& [id, p] : per) {
    intersections.push_back({{"intersection_id", id},
                             {"records", p.records},
                             {"vehicles", p.vehicles.size()},
                             {"speed_mps", speed_stats(p.speeds)}});
  }

  auto series = queue_series(records, cfg);
  json queue = json::array();
  double max_queue = 0.0;
  for (const auto& q : series) {
    queue.push_back({{"t", q.second_epoch_ms},
                     {"intersection_id", q.intersection_id},
                     {"signal_group", q.signal_group_id},
                     {"queue_length_m", q.queue_length_m}});
    max_queue = std::max(max_queue, q.queue_length_m);
  }

  std::map<std::string, std::uint64_t> by_type{
      {"SignalTimingAdjustment", 0}, {"VehicleAdvisory", 0}, {"IncidentNotification", 0}};
  std::map<std::string, std::uint64_t> by_incident;
  for (const auto& f : feedback) {
    ++by_type[feedback_type_name(f.type())];
    if (const auto* inc = std::get_if<IncidentPayload>(&f.payload)) ++by_incident[incident_kind_name(inc->kind)];
  }

  return json{{"records", records.size()},
              {"vehicles", vehicles.size()},
              {"from_ms", first ? json(*first) : json(nullptr)},
              {"to_ms", last ? json(*last) : json(nullptr)},
              {"speed_mps", speed_stats(speeds)},
              {"intersections", intersections},
              {"max_queue_length_m", max_queue},
              {"queue_series", queue},
              {"feedback", {{"total", feedback.size()}, {"by_type", by_type}, {"by_incident", by_incident}}}};
}

}  // namespace corridor
