#include "doctest.h"

#include <cmath>

#include "bit_oracle.hpp"
#include "corridor/codec.hpp"
#include "corridor/error.hpp"
#include "generators.hpp"

using namespace corridor;
using corridor::testing::BitString;

namespace {

Errc decode_error(const std::string& hex) {
  try {
    decode_frame(hex);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("decode unexpectedly succeeded");
  return Errc::InvalidRange;
}

// Oracle packing of a BSM straight from its engineering values.
BitString pack_bsm(const BsmCore& m) {
  BitString b;
  b.put(1, 3).put(m.temp_id, 32).put(m.sec_mark_ms.value_or(65535), 16);
  b.put(static_cast<std::uint64_t>(std::llround(m.latitude_deg * 1e7) + 900000000), 31);
  b.put(static_cast<std::uint64_t>(std::llround(m.longitude_deg * 1e7) + 1799999999), 32);
  b.put(static_cast<std::uint64_t>(std::llround(m.elevation_cm / 10.0) + 4096), 16);
  b.put(m.speed_mps ? static_cast<std::uint64_t>(std::llround(*m.speed_mps / 0.02)) : 8191, 13);
  b.put(m.heading_deg ? static_cast<std::uint64_t>(std::llround(*m.heading_deg / 0.0125)) : 28800, 15);
  b.put(static_cast<std::uint64_t>(std::llround(m.steering_angle_deg / 1.5) + 126), 8);
  b.put(static_cast<std::uint64_t>(std::llround(m.accel_long_mps2 / 0.01) + 2000), 12);
  b.put(static_cast<std::uint64_t>(std::llround(m.accel_lat_mps2 / 0.01) + 2000), 12);
  b.put(static_cast<std::uint64_t>(std::llround(m.accel_vert_g / 0.02) + 127), 8);
  b.put(m.brake_status, 8).put(static_cast<std::uint64_t>(m.transmission), 3);
  b.put(m.width_cm, 10).put(m.length_cm, 12).put(m.accuracy_raw, 8);
  b.put(m.path_hist.size(), 4);
  for (const auto& p : m.path_hist) b.put_signed(p.dlat, 16).put_signed(p.dlon, 16);
  b.put(m.path_pred ? 1 : 0, 1);
  if (m.path_pred) b.put_signed(m.path_pred->dlat, 16).put_signed(m.path_pred->dlon, 16);
  return b;
}

BitString pack_spat(const SpatMessage& m) {
  BitString b;
  b.put(2, 3).put(m.intersection_id, 16).put(m.moy, 20).put(m.d_second_ms, 16).put(m.movements.size(), 4);
  for (const auto& mv : m.movements) {
    b.put(mv.signal_group_id, 8).put(static_cast<std::uint64_t>(mv.event_state), 4);
    b.put(mv.min_end_time_mark, 16).put(mv.max_end_time_mark, 16);
  }
  return b;
}

}  // namespace

TEST_CASE("minimal BSM is 244 bits, 31 bytes") {
  BsmCore bsm;
  bsm.sec_mark_ms = 0;
  bsm.speed_mps = 0.0;
  bsm.heading_deg = 0.0;
  const auto oracle = pack_bsm(bsm);
  CHECK(oracle.size() == 244);
  const auto hex = encode_frame(bsm);
  CHECK(hex.size() == 62);
  CHECK(hex == oracle.hex());
  CHECK(std::get<BsmCore>(decode_frame(hex)) == bsm);
}

TEST_CASE("minimal SPaT with one movement is 103 bits, 13 bytes") {
  SpatMessage spat;
  spat.movements.push_back({1, PhaseState::Unavailable, 0, 0});
  const auto oracle = pack_spat(spat);
  CHECK(oracle.size() == 103);
  const auto hex = encode_frame(spat);
  CHECK(hex.size() == 26);
  CHECK(hex == oracle.hex());
}

TEST_CASE("unknown msg_type is rejected") {
  BitString b;
  b.put(7, 3);
  CHECK(decode_error(b.hex()) == Errc::UnknownMsgType);
  CHECK(decode_error("00") == Errc::UnknownMsgType);
}

TEST_CASE("speed field holds raw 135 for 2.70 m/s") {
  BsmCore bsm;
  bsm.speed_mps = 2.70;
  const auto bytes = encode_bytes(bsm);
  BitReader r(bytes);
  r.read(3 + 32 + 16 + 31 + 32 + 16);
  CHECK(r.read(13) == 135);
}

TEST_CASE("SPaT with moy 265608 round trips") {
  SpatMessage spat;
  spat.intersection_id = 1;
  spat.moy = 265608;
  spat.d_second_ms = 13120;
  spat.movements = {{8, PhaseState::StopAndRemain, 28932, 28932}, {2, PhaseState::ProtectedMovementAllowed, 29000, 29100}};
  CHECK(std::get<SpatMessage>(decode_frame(encode_frame(spat))) == spat);
}

TEST_CASE("MAP with zero lanes") {
  MapMessage map;
  map.intersection_id = 9;
  map.ref_point = {43.0716, -89.4009, 26500};
  map.lane_width_cm = 350;
  const auto decoded = std::get<MapMessage>(decode_frame(encode_frame(map)));
  CHECK(decoded.lanes.empty());
  CHECK(decoded == map);
}

TEST_CASE("encoded BSMs match the oracle packer") {
  testing::Gen gen(99);
  for (int i = 0; i < 500; ++i) {
    const auto bsm = gen.bsm();
    CHECK(encode_frame(bsm) == pack_bsm(bsm).hex());
  }
  for (int i = 0; i < 500; ++i) {
    const auto spat = gen.spat();
    CHECK(encode_frame(spat) == pack_spat(spat).hex());
  }
}

TEST_CASE("round trip, canonicity and prefix safety") {
  testing::Gen gen(1234);
  int failures = 0;
  int unsafe_prefix = 0;
  for (int i = 0; i < 2000; ++i) {
    const Message msgs[] = {gen.bsm(), gen.spat(), gen.map()};
    for (const auto& m : msgs) {
      const auto hex = encode_frame(m);
      const auto back = decode_frame(hex);
      if (!(back == m) || encode_frame(back) != hex) ++failures;
      try {
        decode_frame(hex.substr(0, hex.size() - 2));
        ++unsafe_prefix;
      } catch (const Error& e) {
        if (e.code() != Errc::Truncated && e.code() != Errc::NonZeroPadding) ++unsafe_prefix;
      }
    }
  }
  CHECK(failures == 0);
  CHECK(unsafe_prefix == 0);
}

TEST_CASE("decoder rejects bad padding, trailing bytes and hex") {
  BsmCore bsm;
  auto bytes = encode_bytes(bsm);
  bytes.back() |= 0x01;  // last 4 bits are padding
  CHECK(decode_error(to_hex(bytes)) == Errc::NonZeroPadding);

  const auto hex = encode_frame(bsm);
  CHECK(decode_error(hex + "00") == Errc::NonZeroPadding);
  CHECK(decode_error(hex.substr(0, 5)) == Errc::MalformedHex);
  CHECK(decode_error("zz") == Errc::MalformedHex);
  CHECK(decode_error("") == Errc::Truncated);
  // Uppercase input is accepted.
  std::string upper = hex;
  for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  CHECK(std::get<BsmCore>(decode_frame(upper)) == bsm);
}

TEST_CASE("decoder rejects out-of-range fields instead of clamping") {
  BsmCore bsm;
  bsm.heading_deg = 0.0;
  BitString b = pack_bsm(bsm);
  std::string bits = b.bits();
  // heading starts after header+temp_id+sec_mark+lat+lon+elev+speed
  const std::size_t heading_at = 3 + 32 + 16 + 31 + 32 + 16 + 13;
  BitString h;
  h.put(30000, 15);
  bits.replace(heading_at, 15, h.bits());
  BitString corrupted;
  for (char c : bits) corrupted.put(c == '1', 1);
  CHECK(decode_error(corrupted.hex()) == Errc::FieldOutOfRange);

  SpatMessage spat;
  spat.movements.push_back({1, PhaseState::Dark, 10, 20});
  BitString s = pack_spat(spat);
  std::string sb = s.bits();
  BitString moy;
  moy.put(600000, 20);
  sb.replace(3 + 16, 20, moy.bits());
  BitString bad;
  for (char c : sb) bad.put(c == '1', 1);
  CHECK(decode_error(bad.hex()) == Errc::FieldOutOfRange);
}

TEST_CASE("sentinels surface as absent values") {
  BsmCore bsm;
  const auto back = std::get<BsmCore>(decode_frame(encode_frame(bsm)));
  CHECK_FALSE(back.sec_mark_ms.has_value());
  CHECK_FALSE(back.speed_mps.has_value());
  CHECK_FALSE(back.heading_deg.has_value());
}

TEST_CASE("encoder refuses invalid messages") {
  BsmCore bsm;
  bsm.latitude_deg = 95.0;
  CHECK_THROWS_AS(encode_frame(bsm), Error);
  try {
    encode_frame(bsm);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::InvalidMessage);
  }
}
