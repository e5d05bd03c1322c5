#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace corridor {

enum class Errc {
  // codec
  MalformedHex,
  UnknownMsgType,
  Truncated,
  NonZeroPadding,
  FieldOutOfRange,
  InvalidMessage,
  // timesync
  MoyOutOfRange,
  UndefinedTimeMark,
  NoSpatContext,
  // lanegeo
  DegenerateLane,
  CollinearInput,
  // fusion
  EmptyCopySet,
  // netmodel
  InvalidConfig,
  // simulator
  RouteExhausted,
  StaleRecord,
  ScenarioInvalid,
  // pipeline
  SourceUnavailable,
  MisroutedFrame,
  InvalidRange,
};

std::string_view errc_name(Errc code) noexcept;

// Every module reports failures through this one exception type; the code
// tells callers (and the CLI exit-code policy) which contract was broken.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace corridor
