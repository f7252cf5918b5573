#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include "privpart/common.hpp"
#include "privpart/tensor.hpp"

namespace privpart {

// Length-prefixed binary protocol between the local and remote partitions.
// Every frame is: magic "PPW1", one type byte, u32 little-endian payload
// length, then the payload.
enum class MsgType : uint8_t {
  infer_req = 0x01,
  infer_resp = 0x02,
  error = 0x03,
  ping = 0x04,
  pong = 0x05,
};

// Reason code carried in the first byte of an ERROR payload; the rest of
// the payload is a human-readable message.
enum class WireFault : uint8_t {
  bad_magic = 1,
  bad_type = 2,
  oversized = 3,
  truncated = 4,
  bad_tensor = 5,
  shape_mismatch = 6,
  internal = 7,
};

inline const char* fault_name(WireFault f) {
  switch (f) {
    case WireFault::bad_magic: return "bad_magic";
    case WireFault::bad_type: return "bad_type";
    case WireFault::oversized: return "oversized";
    case WireFault::truncated: return "truncated";
    case WireFault::bad_tensor: return "bad_tensor";
    case WireFault::shape_mismatch: return "shape_mismatch";
    case WireFault::internal: return "internal";
  }
  return "unknown";
}

struct WireError : NetError {
  WireFault fault;
  WireError(WireFault f, const std::string& msg) : NetError(msg), fault(f) {}
};

inline constexpr uint8_t wire_magic[4] = {'P', 'P', 'W', '1'};
inline constexpr size_t wire_header_bytes = 9;
inline constexpr size_t default_payload_cap = 64ull << 20;
inline constexpr size_t max_wire_rank = 8;

struct Frame {
  MsgType type = MsgType::ping;
  std::vector<uint8_t> payload;
};

namespace detail {

inline void push_u32_le(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 24));
}

inline uint32_t read_u32_le(const uint8_t* b) {
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

}  // namespace detail

inline std::vector<uint8_t> encode_frame(MsgType type,
                                         const std::vector<uint8_t>& payload) {
  if (payload.size() > 0xFFFFFFFFull)
    throw WireError(WireFault::oversized,
                    "payload does not fit a u32 length field");
  std::vector<uint8_t> out(wire_header_bytes + payload.size());
  std::copy(wire_magic, wire_magic + 4, out.begin());
  out[4] = static_cast<uint8_t>(type);
  const uint32_t len = static_cast<uint32_t>(payload.size());
  out[5] = uint8_t(len);
  out[6] = uint8_t(len >> 8);
  out[7] = uint8_t(len >> 16);
  out[8] = uint8_t(len >> 24);
  std::copy(payload.begin(), payload.end(),
            out.begin() + wire_header_bytes);
  return out;
}

// Parsed header with the type byte kept raw, so a server can still skip the
// declared payload of a frame whose type it does not recognize.
struct FrameHeader {
  uint8_t raw_type = 0;
  uint32_t length = 0;

  bool known() const { return raw_type >= 0x01 && raw_type <= 0x05; }
  MsgType type() const { return static_cast<MsgType>(raw_type); }
};

// Requires wire_header_bytes readable bytes at b.
inline FrameHeader parse_frame_header(const uint8_t* b) {
  for (size_t i = 0; i < 4; ++i)
    if (b[i] != wire_magic[i])
      throw WireError(WireFault::bad_magic, "frame does not start with PPW1");
  return FrameHeader{b[4], detail::read_u32_le(b + 5)};
}

inline Frame decode_frame(const uint8_t* data, size_t n,
                          size_t payload_cap = default_payload_cap,
                          size_t* consumed = nullptr) {
  if (n < wire_header_bytes)
    throw WireError(WireFault::truncated, "frame header truncated");
  const FrameHeader h = parse_frame_header(data);
  if (!h.known())
    throw WireError(WireFault::bad_type,
                    "unknown message type " + std::to_string(h.raw_type));
  if (h.length > payload_cap)
    throw WireError(WireFault::oversized,
                    "declared payload of " + std::to_string(h.length) +
                        " bytes exceeds the " + std::to_string(payload_cap) +
                        " byte cap");
  if (n < wire_header_bytes + size_t(h.length))
    throw WireError(WireFault::truncated, "frame payload truncated");
  Frame f;
  f.type = h.type();
  f.payload.assign(data + wire_header_bytes,
                   data + wire_header_bytes + h.length);
  if (consumed) *consumed = wire_header_bytes + h.length;
  return f;
}

inline Frame decode_frame(const std::vector<uint8_t>& bytes,
                          size_t payload_cap = default_payload_cap,
                          size_t* consumed = nullptr) {
  return decode_frame(bytes.data(), bytes.size(), payload_cap, consumed);
}

// Tensor payload: u8 dtype tag (1 = f32), u8 rank, rank little-endian u32
// dims, then the elements as little-endian f32 words in row-major order.
inline std::vector<uint8_t> encode_tensor(const Tensor<float>& t) {
  const Shape& shape = t.shape();
  if (shape.empty() || shape.size() > max_wire_rank)
    throw WireError(WireFault::bad_tensor,
                    "rank " + std::to_string(shape.size()) +
                        " tensor not encodable (want 1.." +
                        std::to_string(max_wire_rank) + ")");
  for (size_t d : shape)
    if (d == 0 || d > 0xFFFFFFFFull)
      throw WireError(WireFault::bad_tensor,
                      "dimension " + std::to_string(d) + " not encodable");
  std::vector<uint8_t> out;
  out.reserve(2 + 4 * shape.size() + 4 * t.size());
  out.push_back(1);
  out.push_back(static_cast<uint8_t>(shape.size()));
  for (size_t d : shape) detail::push_u32_le(out, static_cast<uint32_t>(d));
  for (size_t i = 0; i < t.size(); ++i)
    detail::push_u32_le(out, std::bit_cast<uint32_t>(t[i]));
  return out;
}

// Validates the declared geometry against the actual byte count before any
// allocation, so a hostile length cannot trigger a huge reserve.
inline Tensor<float> decode_tensor(const uint8_t* data, size_t n) {
  if (n < 2) throw WireError(WireFault::truncated, "tensor header truncated");
  if (data[0] != 1)
    throw WireError(WireFault::bad_tensor,
                    "unknown dtype tag " + std::to_string(data[0]));
  const size_t rank = data[1];
  if (rank == 0 || rank > max_wire_rank)
    throw WireError(WireFault::bad_tensor,
                    "rank " + std::to_string(rank) + " outside 1.." +
                        std::to_string(max_wire_rank));
  if (n < 2 + 4 * rank)
    throw WireError(WireFault::truncated, "tensor dims truncated");
  Shape shape(rank);
  uint64_t numel = 1;
  for (size_t i = 0; i < rank; ++i) {
    const uint32_t d = detail::read_u32_le(data + 2 + 4 * i);
    if (d == 0) throw WireError(WireFault::bad_tensor, "zero dimension");
    if (numel > UINT64_MAX / d)
      throw WireError(WireFault::bad_tensor, "dimension product overflows");
    numel *= d;
    shape[i] = d;
  }
  const uint64_t body = n - 2 - 4 * rank;
  if (numel > UINT64_MAX / 4)
    throw WireError(WireFault::bad_tensor, "dimension product overflows");
  if (4 * numel != body)
    throw WireError(WireFault::bad_tensor,
                    "payload holds " + std::to_string(body) +
                        " data bytes, dims need " + std::to_string(4 * numel));
  Tensor<float> t(std::move(shape));
  const uint8_t* p = data + 2 + 4 * rank;
  for (size_t i = 0; i < static_cast<size_t>(numel); ++i)
    t[i] = std::bit_cast<float>(detail::read_u32_le(p + 4 * i));
  return t;
}

inline Tensor<float> decode_tensor(const std::vector<uint8_t>& payload) {
  return decode_tensor(payload.data(), payload.size());
}

inline std::vector<uint8_t> encode_error_payload(WireFault fault,
                                                 const std::string& msg) {
  std::vector<uint8_t> out;
  out.reserve(1 + msg.size());
  out.push_back(static_cast<uint8_t>(fault));
  out.insert(out.end(), msg.begin(), msg.end());
  return out;
}

struct ErrorInfo {
  WireFault fault = WireFault::internal;
  std::string message;
};

inline ErrorInfo decode_error_payload(const std::vector<uint8_t>& payload) {
  if (payload.empty()) return {WireFault::internal, "unspecified"};
  return {static_cast<WireFault>(payload[0]),
          std::string(payload.begin() + 1, payload.end())};
}

}  // namespace privpart
