#pragma once

// Absolute timestamps for SPaT and BSM messages and residual phase time.
//
// A SPaT carries minute-of-year plus milliseconds-in-minute; its phase end
// times are TimeMarks (tenths of a second within the hour). A BSM carries only
// milliseconds-in-minute and borrows the minute from the most recent SPaT.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "corridor/messages.hpp"

namespace corridor {

inline constexpr std::int64_t kMsPerMinute = 60'000;
inline constexpr std::int64_t kMsPerHour = 3'600'000;
inline constexpr std::int64_t kTimeMarkQuantumMs = 100;

std::int64_t year_start_epoch_ms(int year);
std::uint32_t minutes_in_year(int year);

// Epoch ms of year-start + moy minutes + d_second_ms. moy may equal
// minutes_in_year(year) (the instant the year ends); anything larger throws
// Error{MoyOutOfRange}. d_second_ms above 60999 throws Error{FieldOutOfRange}.
std::int64_t spat_timestamp(std::uint32_t moy, std::uint16_t d_second_ms, int year);

// Milliseconds elapsed in the current hour at (moy, d_second_ms).
std::int64_t ms_in_hour(std::uint32_t moy, std::uint16_t d_second_ms);

struct PhaseResidual {
  std::int64_t residual_ms = 0;
  std::int64_t phase_change_epoch_ms = 0;
};

// Reduces the TimeMark and the SPaT time to ms-within-hour. A difference below
// -30 min means the TimeMark lies in the next hour; smaller negatives clamp to
// zero. Throws Error{UndefinedTimeMark} for 36001.
PhaseResidual phase_residual(std::uint16_t time_mark_tenths, std::uint32_t moy, std::uint16_t d_second_ms,
                             int year);

// Per-RSU clock anchor built from the SPaT stream.
struct SyncContext {
  int year = 1970;
  std::optional<std::uint32_t> latest_spat_moy;
  std::uint16_t latest_spat_d_second_ms = 0;
  std::int64_t latest_spat_received_at_ms = 0;

  // Ignores SPaTs received earlier than the one already held.
  void observe_spat(const SpatMessage& spat, std::int64_t received_at_ms);
};

// Throws Error{NoSpatContext} when no SPaT has been observed.
std::int64_t bsm_timestamp(std::uint16_t sec_mark_ms, const SyncContext& ctx);

struct SyncedSignalState {
  std::uint16_t intersection_id = 0;
  std::uint8_t signal_group_id = 0;
  PhaseState event_state = PhaseState::Unavailable;
  std::int64_t timestamp_epoch_ms = 0;
  std::optional<std::int64_t> residual_phase_ms;
  std::optional<std::int64_t> phase_change_epoch_ms;
};

// One state per movement; residual is absent when min_end_time_mark is undefined.
std::vector<SyncedSignalState> synchronize(const SpatMessage& spat, int year);

// "YYYY-MM-DD hh:mm:ss.mmm" in UTC.
std::string format_timestamp(std::int64_t epoch_ms);
// "YYYY-MM-DDThh:mm:ss.mmmZ".
std::string format_iso8601(std::int64_t epoch_ms);

}  // namespace corridor
