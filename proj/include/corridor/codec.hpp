#pragma once

// Bit-exact frame codec. Layout is MSB-first and unaligned:
//
//   header   msg_type:3 (1 BSM, 2 SPaT, 3 MAP)
//   BSM      temp_id:32 sec_mark:16 lat:31 lon:32 elev:16 speed:13 heading:15
//            steering:8 accel_long:12 accel_lat:12 accel_vert:8 brake:8
//            transmission:3 width:10 length:12 accuracy:8
//            path_hist_count:4 {dlat:16 dlon:16}* path_pred_present:1 {dlat:16 dlon:16}?
//   SPaT     intersection_id:16 moy:20 d_second:16 movement_count:4
//            {signal_group:8 event_state:4 min_end:16 max_end:16}*
//   MAP      intersection_id:16 ref_lat:31 ref_lon:32 ref_elev:16 lane_width:15
//            lane_count:6 {lane_id:8 signal_group:8 connecting_lane:8 node_count:6
//            {dx:16 dy:16}*}*
//
// followed by zero bits up to the next byte boundary. Offset-binary fields
// use the offsets in codec.cpp; path and node offsets are two's complement.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "corridor/messages.hpp"

namespace corridor {

class BitWriter {
 public:
  void write(std::uint64_t value, unsigned bits);
  void write_signed(std::int64_t value, unsigned bits);
  // Pads with zero bits to the next byte boundary and returns the buffer.
  std::vector<std::uint8_t> finish();
  std::size_t bit_count() const noexcept { return bits_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t bits_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  // Throws Error{Truncated} when fewer than `bits` remain.
  std::uint64_t read(unsigned bits);
  std::int64_t read_signed(unsigned bits);
  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() * 8 - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::string to_hex(std::span<const std::uint8_t> bytes);
// Accepts upper- or lowercase digits; throws Error{MalformedHex}.
std::vector<std::uint8_t> from_hex(std::string_view hex);

std::vector<std::uint8_t> encode_bytes(const Message& message);
Message decode_bytes(std::span<const std::uint8_t> bytes);

// Lowercase hex, no separators. Throws Error{InvalidMessage} when the message
// fails validate().
std::string encode_frame(const Message& message);

// Throws Error with UnknownMsgType, Truncated, NonZeroPadding,
// FieldOutOfRange or MalformedHex.
Message decode_frame(std::string_view payload_hex);

}  // namespace corridor
