#include "corridor/timesync.hpp"

#include <chrono>

#include <fmt/format.h>

#include "corridor/error.hpp"

namespace corridor {

namespace chr = std::chrono;

std::int64_t year_start_epoch_ms(int year) {
  const chr::sys_days day{chr::year{year} / chr::January / 1};
  return chr::duration_cast<chr::milliseconds>(day.time_since_epoch()).count();
}

std::uint32_t minutes_in_year(int year) { return chr::year{year}.is_leap() ? 527040U : 525600U; }

std::int64_t spat_timestamp(std::uint32_t moy, std::uint16_t d_second_ms, int year) {
  if (moy > minutes_in_year(year)) {
    throw Error(Errc::MoyOutOfRange, fmt::format("moy {} exceeds {} minutes in {}", moy, minutes_in_year(year), year));
  }
  if (d_second_ms > kMaxDSecond) throw Error(Errc::FieldOutOfRange, fmt::format("d_second {}", d_second_ms));
  return year_start_epoch_ms(year) + static_cast<std::int64_t>(moy) * kMsPerMinute + d_second_ms;
}

std::int64_t ms_in_hour(std::uint32_t moy, std::uint16_t d_second_ms) {
  return static_cast<std::int64_t>(moy % 60) * kMsPerMinute + d_second_ms;
}

PhaseResidual phase_residual(std::uint16_t time_mark_tenths, std::uint32_t moy, std::uint16_t d_second_ms,
                             int year) {
  if (time_mark_tenths == kTimeMarkUndefined) throw Error(Errc::UndefinedTimeMark, "time mark 36001");
  if (time_mark_tenths > kTimeMarkUndefined) {
    throw Error(Errc::FieldOutOfRange, fmt::format("time mark {}", time_mark_tenths));
  }
  const std::int64_t now = spat_timestamp(moy, d_second_ms, year);
  const std::int64_t end_in_hour = static_cast<std::int64_t>(time_mark_tenths) * kTimeMarkQuantumMs;
  std::int64_t residual = end_in_hour - ms_in_hour(moy, d_second_ms);
  if (residual < -kMsPerHour / 2) {
    residual += kMsPerHour;
  } else if (residual < 0) {
    residual = 0;
  }
  return {residual, now + residual};
}

void SyncContext::observe_spat(const SpatMessage& spat, std::int64_t received_at_ms) {
  if (latest_spat_moy && received_at_ms < latest_spat_received_at_ms) return;
  latest_spat_moy = spat.moy;
  latest_spat_d_second_ms = spat.d_second_ms;
  latest_spat_received_at_ms = received_at_ms;
}

std::int64_t bsm_timestamp(std::uint16_t sec_mark_ms, const SyncContext& ctx) {
  if (!ctx.latest_spat_moy) throw Error(Errc::NoSpatContext, "no SPaT observed yet");
  if (sec_mark_ms > 59999) throw Error(Errc::FieldOutOfRange, fmt::format("sec_mark {}", sec_mark_ms));
  std::int64_t minute_start = spat_timestamp(*ctx.latest_spat_moy, 0, ctx.year);
  const std::int64_t drift = static_cast<std::int64_t>(sec_mark_ms) - ctx.latest_spat_d_second_ms;
  // The BSM and the SPaT straddle a minute boundary when their in-minute
  // offsets are more than half a minute apart.
  if (drift < -kMsPerMinute / 2) {
    minute_start += kMsPerMinute;
  } else if (drift > kMsPerMinute / 2) {
    minute_start -= kMsPerMinute;
  }
  return minute_start + sec_mark_ms;
}

std::vector<SyncedSignalState> synchronize(const SpatMessage& spat, int year) {
  const std::int64_t ts = spat_timestamp(spat.moy, spat.d_second_ms, year);
  std::vector<SyncedSignalState> out;
  out.reserve(spat.movements.size());
  for (const auto& mv : spat.movements) {
    SyncedSignalState s;
    s.intersection_id = spat.intersection_id;
    s.signal_group_id = mv.signal_group_id;
    s.event_state = mv.event_state;
    s.timestamp_epoch_ms = ts;
    if (mv.min_end_time_mark < kTimeMarkUndefined) {
      const auto r = phase_residual(mv.min_end_time_mark, spat.moy, spat.d_second_ms, year);
      s.residual_phase_ms = r.residual_ms;
      s.phase_change_epoch_ms = r.phase_change_epoch_ms;
    }
    out.push_back(s);
  }
  return out;
}

namespace {

struct Civil {
  int year;
  unsigned month, day, hour, minute, second, milli;
};

Civil to_civil(std::int64_t epoch_ms) {
  const chr::sys_time<chr::milliseconds> tp{chr::milliseconds{epoch_ms}};
  const auto day = chr::floor<chr::days>(tp);
  const chr::year_month_day ymd{day};
  const chr::hh_mm_ss hms{tp - day};
  return {static_cast<int>(ymd.year()),
          static_cast<unsigned>(ymd.month()),
          static_cast<unsigned>(ymd.day()),
          static_cast<unsigned>(hms.hours().count()),
          static_cast<unsigned>(hms.minutes().count()),
          static_cast<unsigned>(hms.seconds().count()),
          static_cast<unsigned>(hms.subseconds().count())};
}

}  // namespace

std::string format_timestamp(std::int64_t epoch_ms) {
  const auto c = to_civil(epoch_ms);
  return fmt::format("{:04}-{:02}-{:02} {:02}:{:02}:{:02}.{:03}", c.year, c.month, c.day, c.hour, c.minute, c.second,
                     c.milli);
}

std::string format_iso8601(std::int64_t epoch_ms) {
  const auto c = to_civil(epoch_ms);
  return fmt::format("{:04}-{:02}-{:02}T{:02}:{:02}:{:02}.{:03}Z", c.year, c.month, c.day, c.hour, c.minute,
                     c.second, c.milli);
}

}  // namespace corridor
