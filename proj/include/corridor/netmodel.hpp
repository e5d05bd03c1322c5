#pragma once

// Simulated V2X channel: fixed latency with uniform integer jitter, packet
// error drops and a linear distance falloff between r0 and rmax.

#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "corridor/json_io.hpp"
#include "corridor/lanegeo.hpp"

namespace corridor {

struct ChannelConfig {
  std::int64_t base_latency_ms = 20;
  std::int64_t jitter_ms = 10;  // half-width
  double per = 0.02;
  double r0_m = 300.0;
  double rmax_m = 600.0;
  std::uint64_t seed = 42;

  bool operator==(const ChannelConfig&) const = default;
};

// Throws InvalidConfig listing the first broken invariant.
void check_config(const ChannelConfig& config);

void to_json(json& j, const ChannelConfig& c);
void from_json(const json& j, ChannelConfig& c);  // missing keys keep defaults

struct ChannelCounters {
  std::uint64_t sent = 0;
  std::uint64_t delivered = 0;
  std::uint64_t dropped_per = 0;
  std::uint64_t dropped_range = 0;
  std::int64_t total_delay_ms = 0;

  double mean_delay_ms() const { return delivered ? static_cast<double>(total_delay_ms) / delivered : 0.0; }
};

void to_json(json& j, const ChannelCounters& c);

struct Delivery {
  std::string payload_hex;
  std::int64_t arrival_time_ms = 0;
};

double delivery_probability(double distance_m, const ChannelConfig& config);

class Channel {
 public:
  explicit Channel(const ChannelConfig& config);

  // Draws exactly three uniforms per call whatever the outcome, so the
  // stream position depends only on the number of transmissions.
  std::optional<Delivery> transmit(const std::string& payload_hex, Vec2 sender, Vec2 receiver,
                                   std::int64_t send_time_ms);

  // Takes effect at the next begin_tick(). The RNG stream continues.
  void reconfigure(const ChannelConfig& config);
  void begin_tick();

  const ChannelConfig& config() const { return config_; }
  const ChannelCounters& counters() const { return counters_; }

 private:
  double uniform();

  ChannelConfig config_;
  std::optional<ChannelConfig> pending_;
  std::mt19937_64 rng_;
  ChannelCounters counters_;
};

Channel set_network_delay(const ChannelConfig& config);

}  // namespace corridor
