#include "corridor/fusion.hpp"

#include <algorithm>
#include <tuple>

#include <fmt/format.h>

#include "corridor/error.hpp"

namespace corridor {

StreamCaches::StreamCaches(int year, Containment mode) : year_(year), lanes_(mode) {}

const SpatMessage* StreamCaches::latest_spat(std::uint16_t intersection_id) const {
  auto it = spat_.find(intersection_id);
  return it == spat_.end() ? nullptr : &it->second;
}

const SyncContext* StreamCaches::sync_context(const std::string& rsu_id) const {
  auto it = sync_.find(rsu_id);
  return it == sync_.end() ? nullptr : &it->second;
}

const IntegratedRecord* StreamCaches::last_record(std::uint32_t temp_id) const {
  auto it = last_record_.find(temp_id);
  return it == last_record_.end() ? nullptr : &it->second;
}

std::optional<IntegratedRecord> StreamCaches::ingest(const Message& message, const std::string& rsu_id,
                                                     std::int64_t received_at_ms) {
  if (const auto* spat = std::get_if<SpatMessage>(&message)) {
    ++stats_.spat_frames;
    auto& ctx = sync_[rsu_id];
    ctx.year = year_;
    ctx.observe_spat(*spat, received_at_ms);
    auto seen = spat_received_at_.find(spat->intersection_id);
    if (seen == spat_received_at_.end() || received_at_ms >= seen->second) {
      spat_[spat->intersection_id] = *spat;
      spat_received_at_[spat->intersection_id] = received_at_ms;
    }
    return std::nullopt;
  }
  if (const auto* map = std::get_if<MapMessage>(&message)) {
    ++stats_.map_frames;
    try {
      if (lanes_.update(*map)) ++stats_.map_rebuilds;
    } catch (const Error&) {
      ++stats_.map_rejected;
    }
    return std::nullopt;
  }
  ++stats_.bsm_frames;
  auto record = fuse(std::get<BsmCore>(message), rsu_id, received_at_ms);
  last_record_[record.temp_id] = record;
  return record;
}

IntegratedRecord StreamCaches::fuse(const BsmCore& bsm, const std::string& rsu_id, std::int64_t received_at_ms) {
  IntegratedRecord rec;
  rec.temp_id = bsm.temp_id;
  rec.position = {bsm.latitude_deg, bsm.longitude_deg, bsm.elevation_cm};
  rec.speed_mps = bsm.speed_mps;
  rec.heading_deg = bsm.heading_deg;
  rec.source_rsu_ids = {rsu_id};

  rec.timestamp_epoch_ms = received_at_ms;
  const SyncContext* ctx = sync_context(rsu_id);
  try {
    if (!ctx || !bsm.sec_mark_ms) throw Error(Errc::NoSpatContext, "no time reference");
    rec.timestamp_epoch_ms = bsm_timestamp(*bsm.sec_mark_ms, *ctx);
  } catch (const Error&) {
    // Cold start or a SPaT minute outside the configured year: fall back to
    // receipt time rather than dropping the vehicle.
    ++stats_.no_spat_context;
  }

  const auto match = lanes_.match(bsm.latitude_deg, bsm.longitude_deg);
  if (!match) return rec;
  ++stats_.matched;
  rec.matched_intersection_id = match->intersection_id;
  rec.matched_lane_id = match->lane_id;
  rec.distance_to_stop_line_m = match->distance_to_stop_line_m;

  const SpatMessage* spat = latest_spat(match->intersection_id);
  const MovementState* mv = spat ? spat->find_movement(match->signal_group_id) : nullptr;
  if (!mv) return rec;
  rec.signal_group_id = match->signal_group_id;
  rec.event_state = mv->event_state;
  if (mv->min_end_time_mark < kTimeMarkUndefined) {
    try {
      rec.residual_phase_ms = phase_residual(mv->min_end_time_mark, spat->moy, spat->d_second_ms, year_).residual_ms;
    } catch (const Error&) {
    }
  }
  return rec;
}

DedupKey dedup_key(const Message& message) {
  DedupKey key;
  key.type = message_type(message);
  if (const auto* bsm = std::get_if<BsmCore>(&message)) {
    key.id = bsm->temp_id;
    key.sub = bsm->sec_mark_ms.value_or(kSecMarkUnavailable);
  } else if (const auto* spat = std::get_if<SpatMessage>(&message)) {
    key.id = spat->intersection_id;
    key.minute = spat->moy;
    key.sub = spat->d_second_ms;
  } else {
    key.id = std::get<MapMessage>(message).intersection_id;
  }
  return key;
}

std::string to_string(const DedupKey& key) {
  switch (key.type) {
    case MsgType::Bsm:
      return fmt::format("bsm:{}:{}", key.id, key.sub);
    case MsgType::Spat:
      return fmt::format("spat:{}:{}:{}", key.id, key.minute, key.sub);
    case MsgType::Map:
      break;
  }
  return fmt::format("map:{}", key.id);
}

namespace {

template <class T>
class FieldVoter {
 public:
  FieldVoter(const std::vector<const Copy*>& copies, IntegrityReport& report) : report_(report) {
    for (const auto* c : copies) {
      values_.push_back(&std::get<T>(c->message));
      rsus_.push_back(&c->rsu_id);
    }
    out_ = *values_.front();
  }

  template <class F>
  void field(const char* name, F T::*member) {
    const F* winner = nullptr;
    std::size_t best = 0;
    for (const T* v : values_) {
      const auto count = static_cast<std::size_t>(
          std::count_if(values_.begin(), values_.end(), [&](const T* o) { return o->*member == v->*member; }));
      if (count > best) {
        best = count;
        winner = &(v->*member);
      }
    }
    out_.*member = *winner;
    FieldDissent dissent{name, {}};
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!(values_[i]->*member == *winner)) dissent.dissenting_rsus.push_back(*rsus_[i]);
    }
    if (!dissent.dissenting_rsus.empty()) report_.dissents.push_back(std::move(dissent));
  }

  T result() const { return out_; }

 private:
  std::vector<const T*> values_;
  std::vector<const std::string*> rsus_;
  T out_;
  IntegrityReport& report_;
};

Message vote_bsm(const std::vector<const Copy*>& copies, IntegrityReport& report) {
  FieldVoter<BsmCore> v(copies, report);
  v.field("temp_id", &BsmCore::temp_id);
  v.field("sec_mark_ms", &BsmCore::sec_mark_ms);
  v.field("latitude_deg", &BsmCore::latitude_deg);
  v.field("longitude_deg", &BsmCore::longitude_deg);
  v.field("elevation_cm", &BsmCore::elevation_cm);
  v.field("speed_mps", &BsmCore::speed_mps);
  v.field("heading_deg", &BsmCore::heading_deg);
  v.field("steering_angle_deg", &BsmCore::steering_angle_deg);
  v.field("accel_long_mps2", &BsmCore::accel_long_mps2);
  v.field("accel_lat_mps2", &BsmCore::accel_lat_mps2);
  v.field("accel_vert_g", &BsmCore::accel_vert_g);
  v.field("brake_status", &BsmCore::brake_status);
  v.field("transmission", &BsmCore::transmission);
  v.field("width_cm", &BsmCore::width_cm);
  v.field("length_cm", &BsmCore::length_cm);
  v.field("accuracy_raw", &BsmCore::accuracy_raw);
  v.field("path_hist", &BsmCore::path_hist);
  v.field("path_pred", &BsmCore::path_pred);
  return v.result();
}

Message vote_spat(const std::vector<const Copy*>& copies, IntegrityReport& report) {
  FieldVoter<SpatMessage> v(copies, report);
  v.field("intersection_id", &SpatMessage::intersection_id);
  v.field("moy", &SpatMessage::moy);
  v.field("d_second_ms", &SpatMessage::d_second_ms);
  v.field("movements", &SpatMessage::movements);
  return v.result();
}

Message vote_map(const std::vector<const Copy*>& copies, IntegrityReport& report) {
  FieldVoter<MapMessage> v(copies, report);
  v.field("intersection_id", &MapMessage::intersection_id);
  v.field("ref_point", &MapMessage::ref_point);
  v.field("lane_width_cm", &MapMessage::lane_width_cm);
  v.field("lanes", &MapMessage::lanes);
  return v.result();
}

}  // namespace

VoteResult vote(std::vector<Copy> copies) {
  if (copies.empty()) throw Error(Errc::EmptyCopySet, "vote over zero copies");
  std::vector<const Copy*> order;
  for (const auto& c : copies) order.push_back(&c);
  std::stable_sort(order.begin(), order.end(), [](const Copy* a, const Copy* b) {
    return std::tie(a->received_at_ms, a->rsu_id) < std::tie(b->received_at_ms, b->rsu_id);
  });
  const auto type = message_type(order.front()->message);
  for (const auto* c : order) {
    if (message_type(c->message) != type) throw Error(Errc::InvalidMessage, "copies of different message types");
  }

  VoteResult result{order.front()->message, {}};
  switch (type) {
    case MsgType::Bsm:
      result.canonical = vote_bsm(order, result.report);
      break;
    case MsgType::Spat:
      result.canonical = vote_spat(order, result.report);
      break;
    case MsgType::Map:
      result.canonical = vote_map(order, result.report);
      break;
  }
  result.report.key = dedup_key(result.canonical);
  return result;
}

std::vector<json> integrity_lines(const IntegrityReport& report) {
  std::vector<json> out;
  for (const auto& d : report.dissents) {
    out.push_back({{"key", to_string(report.key)}, {"field", d.field}, {"dissenting_rsus", d.dissenting_rsus}});
  }
  return out;
}

DedupWindow::DedupWindow(std::int64_t window_ms) : window_ms_(window_ms) {
  if (window_ms <= 0) throw Error(Errc::InvalidConfig, fmt::format("dedup window {} ms", window_ms));
}

std::vector<CopySet> DedupWindow::push(Copy copy) {
  auto closed = advance(copy.received_at_ms);
  const auto key = dedup_key(copy.message);
  auto it = open_.find(key);
  if (it == open_.end()) {
    it = open_.emplace(key, CopySet{key, copy.received_at_ms, {}}).first;
    by_open_time_.emplace(copy.received_at_ms, key);
  }
  it->second.copies.push_back(std::move(copy));
  return closed;
}

std::vector<CopySet> DedupWindow::advance(std::int64_t now_ms) {
  // Sets leave in (opened_at, key) order, which is the index order.
  std::vector<CopySet> closed;
  while (!by_open_time_.empty() && by_open_time_.begin()->first + window_ms_ <= now_ms) {
    const auto key = by_open_time_.begin()->second;
    by_open_time_.erase(by_open_time_.begin());
    auto it = open_.find(key);
    closed.push_back(std::move(it->second));
    open_.erase(it);
  }
  return closed;
}

std::vector<CopySet> DedupWindow::flush() {
  std::vector<CopySet> out;
  for (const auto& [opened, key] : by_open_time_) out.push_back(std::move(open_.at(key)));
  open_.clear();
  by_open_time_.clear();
  return out;
}

std::optional<CopySet> DedupWindow::close(const DedupKey& key) {
  auto it = open_.find(key);
  if (it == open_.end()) return std::nullopt;
  by_open_time_.erase({it->second.opened_at_ms, key});
  CopySet out = std::move(it->second);
  open_.erase(it);
  return out;
}

const CopySet* DedupWindow::find(const DedupKey& key) const {
  auto it = open_.find(key);
  return it == open_.end() ? nullptr : &it->second;
}

std::vector<CopySet> dedup_window(const std::vector<Copy>& stream, std::int64_t window_ms) {
  DedupWindow window(window_ms);
  std::vector<CopySet> out;
  for (const auto& copy : stream) {
    for (auto& set : window.push(copy)) out.push_back(std::move(set));
  }
  for (auto& set : window.flush()) out.push_back(std::move(set));
  return out;
}

}  // namespace corridor
