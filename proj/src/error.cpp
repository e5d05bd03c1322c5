#include "corridor/error.hpp"

namespace corridor {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::MalformedHex: return "MalformedHex";
    case Errc::UnknownMsgType: return "UnknownMsgType";
    case Errc::Truncated: return "Truncated";
    case Errc::NonZeroPadding: return "NonZeroPadding";
    case Errc::FieldOutOfRange: return "FieldOutOfRange";
    case Errc::InvalidMessage: return "InvalidMessage";
    case Errc::MoyOutOfRange: return "MoyOutOfRange";
    case Errc::UndefinedTimeMark: return "UndefinedTimeMark";
    case Errc::NoSpatContext: return "NoSpatContext";
    case Errc::DegenerateLane: return "DegenerateLane";
    case Errc::CollinearInput: return "CollinearInput";
    case Errc::EmptyCopySet: return "EmptyCopySet";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::RouteExhausted: return "RouteExhausted";
    case Errc::StaleRecord: return "StaleRecord";
    case Errc::ScenarioInvalid: return "ScenarioInvalid";
    case Errc::SourceUnavailable: return "SourceUnavailable";
    case Errc::MisroutedFrame: return "MisroutedFrame";
    case Errc::InvalidRange: return "InvalidRange";
  }
  return "Unknown";
}

}  // namespace corridor
