#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "corridor/error.hpp"
#include "corridor/netmodel.hpp"

using namespace corridor;

namespace {

const std::string kGolden = std::string(CORRIDOR_SOURCE_DIR) + "/tests/golden/channel_seed42.ndjson";

std::string golden_trace() {
  Channel ch(ChannelConfig{});
  std::string out;
  for (int i = 0; i < 400; ++i) {
    const double d = (i * 37) % 700;
    const auto r = ch.transmit("00", {0, 0}, {d, 0}, i * 100);
    json line{{"i", i}, {"distance_m", d}, {"delivered", r.has_value()}};
    line["arrival_time_ms"] = r ? json(r->arrival_time_ms) : json(nullptr);
    out += to_ndjson_line(line);
  }
  return out;
}

}  // namespace

TEST_CASE("degenerate distributions") {
  ChannelConfig cfg;
  cfg.per = 0;
  cfg.jitter_ms = 0;
  cfg.base_latency_ms = 20;
  Channel ch(cfg);
  for (int i = 0; i < 1000; ++i) {
    const auto r = ch.transmit("abcd", {0, 0}, {100, 0}, i);
    REQUIRE(r.has_value());
    CHECK(r->arrival_time_ms == i + 20);
    CHECK(r->payload_hex == "abcd");
  }
  cfg.per = 1;
  Channel none(cfg);
  for (int i = 0; i < 1000; ++i) CHECK_FALSE(none.transmit("ab", {0, 0}, {1, 0}, i).has_value());
  CHECK(none.counters().dropped_per == 1000);
}

TEST_CASE("delivery probability falls off linearly") {
  const ChannelConfig cfg;
  CHECK(delivery_probability(100, cfg) == 1.0);
  CHECK(delivery_probability(300, cfg) == 1.0);
  CHECK(delivery_probability(450, cfg) == 0.5);
  CHECK(delivery_probability(700, cfg) == 0.0);
  Channel ch(cfg);
  for (int i = 0; i < 1000; ++i) CHECK_FALSE(ch.transmit("ab", {0, 0}, {0, 700}, i).has_value());
  CHECK(ch.counters().dropped_range == 1000);
}

TEST_CASE("decisions follow the documented draw order") {
  // Oracle: replay the raw engine by hand.
  ChannelConfig cfg;
  cfg.seed = 7;
  Channel ch(cfg);
  std::mt19937_64 rng(7);
  auto u = [&] { return static_cast<double>(rng() >> 11) / 9007199254740992.0; };
  for (int i = 0; i < 5000; ++i) {
    const double d = (i * 13) % 650;
    const double ur = u(), up = u(), uj = u();
    const double p = d <= 300 ? 1.0 : d >= 600 ? 0.0 : (600 - d) / 300;
    std::optional<std::int64_t> expect;
    if (ur < p && up >= 0.02) expect = i + 20 + static_cast<std::int64_t>(uj * 21) - 10;
    const auto got = ch.transmit("00", {0, 0}, {0, d}, i);
    REQUIRE(got.has_value() == expect.has_value());
    if (got) REQUIRE(got->arrival_time_ms == *expect);
  }
}

TEST_CASE("empirical drop rate and mean delay") {
  Channel ch(ChannelConfig{});
  for (int i = 0; i < 100000; ++i) {
    const auto r = ch.transmit("00", {0, 0}, {150, 0}, 1000);
    if (r) REQUIRE(r->arrival_time_ms >= 1000);
  }
  const auto& c = ch.counters();
  CHECK(c.dropped_range == 0);
  CHECK(std::abs(static_cast<double>(c.dropped_per) / 100000.0 - 0.02) <= 0.002);
  CHECK(std::abs(c.mean_delay_ms() - 20.0) <= 0.5);
}

TEST_CASE("same seed, same decisions") {
  Channel a(ChannelConfig{}), b(ChannelConfig{});
  for (int i = 0; i < 10000; ++i) {
    const auto ra = a.transmit("00", {0, 0}, {static_cast<double>(i % 620), 0}, i);
    const auto rb = b.transmit("00", {0, 0}, {static_cast<double>(i % 620), 0}, i);
    REQUIRE(ra.has_value() == rb.has_value());
    if (ra) REQUIRE(ra->arrival_time_ms == rb->arrival_time_ms);
  }
}

TEST_CASE("reconfiguration waits for the tick boundary") {
  ChannelConfig cfg;
  cfg.per = 0;
  cfg.jitter_ms = 0;
  Channel ch(cfg);
  auto next = cfg;
  next.base_latency_ms = 50;
  ch.reconfigure(next);
  CHECK(ch.transmit("00", {0, 0}, {1, 0}, 0)->arrival_time_ms == 20);
  ch.begin_tick();
  CHECK(ch.transmit("00", {0, 0}, {1, 0}, 0)->arrival_time_ms == 50);
}

TEST_CASE("invalid configs are rejected") {
  ChannelConfig c;
  c.per = 1.5;
  CHECK_THROWS_AS(set_network_delay(c), Error);
  c = {};
  c.r0_m = 700;
  CHECK_THROWS_AS(set_network_delay(c), Error);
  c = {};
  c.jitter_ms = 30;
  CHECK_THROWS_AS(set_network_delay(c), Error);
  c = {};
  c.r0_m = 0;
  CHECK_THROWS_AS(Channel{c}, Error);
}

TEST_CASE("config json keeps defaults for missing keys") {
  const auto c = json::parse(R"({"per": 0.1, "seed": 9})").get<ChannelConfig>();
  CHECK(c.per == 0.1);
  CHECK(c.seed == 9);
  CHECK(c.base_latency_ms == 20);
  CHECK(json(c).get<ChannelConfig>() == c);
}

TEST_CASE("seed 42 reproduces the golden delivery trace") {
  const auto trace = golden_trace();
  if (std::getenv("CORRIDOR_UPDATE_GOLDEN")) {
    std::ofstream(kGolden, std::ios::binary) << trace;
  }
  std::ifstream in(kGolden, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == trace);
}
