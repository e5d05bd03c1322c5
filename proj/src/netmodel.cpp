#include "corridor/netmodel.hpp"

#include <cmath>

#include "corridor/error.hpp"

namespace corridor {

void check_config(const ChannelConfig& c) {
  if (!(c.per >= 0.0 && c.per <= 1.0)) throw Error(Errc::InvalidConfig, "per must lie in [0, 1]");
  if (!(c.r0_m > 0.0 && c.r0_m <= c.rmax_m)) throw Error(Errc::InvalidConfig, "need 0 < r0_m <= rmax_m");
  if (c.jitter_ms < 0 || c.jitter_ms > c.base_latency_ms) {
    throw Error(Errc::InvalidConfig, "need 0 <= jitter_ms <= base_latency_ms");
  }
}

void to_json(json& j, const ChannelConfig& c) {
  j = json{{"base_latency_ms", c.base_latency_ms}, {"jitter_ms", c.jitter_ms}, {"per", c.per},
           {"r0_m", c.r0_m},                       {"rmax_m", c.rmax_m},       {"seed", c.seed}};
}

void from_json(const json& j, ChannelConfig& c) {
  c.base_latency_ms = j.value("base_latency_ms", c.base_latency_ms);
  c.jitter_ms = j.value("jitter_ms", c.jitter_ms);
  c.per = j.value("per", c.per);
  c.r0_m = j.value("r0_m", c.r0_m);
  c.rmax_m = j.value("rmax_m", c.rmax_m);
  c.seed = j.value("seed", c.seed);
}

void to_json(json& j, const ChannelCounters& c) {
  j = json{{"sent", c.sent},
           {"delivered", c.delivered},
           {"dropped_per", c.dropped_per},
           {"dropped_range", c.dropped_range},
           {"mean_delay_ms", c.mean_delay_ms()}};
}

double delivery_probability(double distance_m, const ChannelConfig& config) {
  if (distance_m <= config.r0_m) return 1.0;
  if (distance_m >= config.rmax_m) return 0.0;
  return (config.rmax_m - distance_m) / (config.rmax_m - config.r0_m);
}

Channel::Channel(const ChannelConfig& config) : config_(config), rng_(config.seed) { check_config(config); }

double Channel::uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

std::optional<Delivery> Channel::transmit(const std::string& payload_hex, Vec2 sender, Vec2 receiver,
                                          std::int64_t send_time_ms) {
  ++counters_.sent;
  const double u_range = uniform();
  const double u_per = uniform();
  const double u_jitter = uniform();
  if (u_range >= delivery_probability(norm(receiver - sender), config_)) {
    ++counters_.dropped_range;
    return std::nullopt;
  }
  if (u_per < config_.per) {
    ++counters_.dropped_per;
    return std::nullopt;
  }
  const std::int64_t span = 2 * config_.jitter_ms + 1;
  const std::int64_t jitter = static_cast<std::int64_t>(std::floor(u_jitter * static_cast<double>(span))) - config_.jitter_ms;
  const std::int64_t delay = config_.base_latency_ms + jitter;
  ++counters_.delivered;
  counters_.total_delay_ms += delay;
  return Delivery{payload_hex, send_time_ms + delay};
}

void Channel::reconfigure(const ChannelConfig& config) {
  check_config(config);
  pending_ = config;
}

void Channel::begin_tick() {
  if (pending_) {
    config_ = *pending_;
    pending_.reset();
  }
}

Channel set_network_delay(const ChannelConfig& config) { return Channel(config); }

}  // namespace corridor
