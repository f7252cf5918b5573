#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "privpart/nn.hpp"
#include "privpart/tensor.hpp"

namespace privpart {

// A network split into the partition that stays with the data owner (local,
// input -> hidden) and the partition that runs remotely (hidden -> output).
// cut is the index of the first remote layer in the original stack.
template <typename T>
struct BipartiteNetwork {
  Network<T> local;
  Network<T> remote;
  size_t cut = 0;
  Shape hidden_shape;
  bool local_locked = false;

  Tensor<T> local_forward(const Tensor<T>& x) const { return local.forward(x); }
  Tensor<T> remote_forward(const Tensor<T>& h) const { return remote.forward(h); }
  Tensor<T> forward(const Tensor<T>& x) const {
    return remote.forward(local.forward(x));
  }

  void lock_local() { local_locked = true; }
};

// Splits after layer cut-1: local owns layers [0,cut), remote owns [cut,n).
// Parameters are copied over with remote layer indices rebased to zero.
template <typename T>
BipartiteNetwork<T> split(const Network<T>& net, size_t cut) {
  const size_t n = net.layer_count();
  if (cut < 1 || cut >= n)
    throw Error("split: cut must satisfy 1 <= cut < " + std::to_string(n) +
                ", got " + std::to_string(cut));
  const std::vector<LayerSpec>& specs = net.specs();
  std::vector<LayerSpec> local_specs(specs.begin(), specs.begin() + cut);
  std::vector<LayerSpec> remote_specs(specs.begin() + cut, specs.end());

  BipartiteNetwork<T> bp;
  bp.cut = cut;
  bp.hidden_shape = net.layer_shapes()[cut - 1];
  bp.local = Network<T>(net.input_shape(), std::move(local_specs));
  bp.remote = Network<T>(bp.hidden_shape, std::move(remote_specs));

  for (size_t i = 0; i < n; ++i) {
    for (const char* piece : {"W", "b"}) {
      const std::string src = "L" + std::to_string(i) + "." + piece;
      if (!net.params().contains(src)) continue;
      if (i < cut)
        bp.local.params().add(src, net.params().at(src).clone());
      else
        bp.remote.params().add(
            "L" + std::to_string(i - cut) + "." + piece,
            net.params().at(src).clone());
    }
  }
  return bp;
}

// Rejoins the two partitions into one stack (inverse of split, for
// whole-model evaluation after remote-side updates).
template <typename T>
Network<T> merge(const BipartiteNetwork<T>& bp) {
  std::vector<LayerSpec> specs = bp.local.specs();
  specs.insert(specs.end(), bp.remote.specs().begin(), bp.remote.specs().end());
  Network<T> net(bp.local.input_shape(), std::move(specs));
  for (size_t i = 0; i < bp.local.layer_count(); ++i)
    for (const char* piece : {"W", "b"}) {
      const std::string name = "L" + std::to_string(i) + "." + piece;
      if (bp.local.params().contains(name))
        net.params().add(name, bp.local.params().at(name).clone());
    }
  for (size_t j = 0; j < bp.remote.layer_count(); ++j)
    for (const char* piece : {"W", "b"}) {
      const std::string src = "L" + std::to_string(j) + "." + piece;
      if (bp.remote.params().contains(src))
        net.params().add(
            "L" + std::to_string(j + bp.cut) + "." + piece,
            bp.remote.params().at(src).clone());
    }
  return net;
}

// Named collection of trained partitions (one per configured cut).
template <typename T>
struct PartitionSuite {
  std::vector<BipartiteNetwork<T>> members;

  const BipartiteNetwork<T>& at_cut(size_t cut) const {
    for (const auto& m : members)
      if (m.cut == cut) return m;
    throw Error("no partition trained at cut " + std::to_string(cut));
  }
};

// ---- on-disk format ----
//
// "PPRT" | u32 version | u32 cut | u8 locked | u8 input rank | u32 dims...
// | u32 layer count | layers | u32 param count | params | u32 crc32
//
// Layer: u8 kind | u8 act | u32 units | u32 channels | u32 kernel
// | u32 stride | u32 pad | f64 rate.
// Param: u16 name length | name | u8 rank | u32 dims... | f32 data (LE).
// The trailing crc32 (IEEE, as in zlib) covers everything before it.

namespace detail {

constexpr uint32_t kPartitionVersion = 1;

struct ByteWriter {
  std::vector<uint8_t> bytes;

  void u8(uint8_t v) { bytes.push_back(v); }
  void u16(uint16_t v) {
    bytes.push_back(uint8_t(v));
    bytes.push_back(uint8_t(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(uint8_t(v >> (8 * i)));
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) bytes.push_back(uint8_t(bits >> (8 * i)));
  }
  void raw(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
};

struct ByteReader {
  const std::vector<uint8_t>& bytes;
  size_t pos = 0;
  std::string path;

  void need(size_t n) const {
    if (pos + n > bytes.size())
      throw IoError("truncated partition file " + path);
  }
  uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(bytes[pos]) | uint16_t(bytes[pos + 1]) << 8;
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    need(8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= uint64_t(bytes[pos + i]) << (8 * i);
    pos += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
};

template <typename T>
void write_network_params(ByteWriter& w, const Network<T>& net,
                          size_t layer_offset) {
  for (const std::string& name : net.params().names()) {
    // Rebase "L<j>.x" to the merged layer index.
    const size_t dot = name.find('.');
    const size_t j = std::stoul(name.substr(1, dot - 1));
    const std::string out_name =
        "L" + std::to_string(j + layer_offset) + name.substr(dot);
    w.u16(static_cast<uint16_t>(out_name.size()));
    w.raw(out_name.data(), out_name.size());
    const Tensor<T>& t = net.params().at(name);
    w.u8(static_cast<uint8_t>(t.rank()));
    for (size_t d = 0; d < t.rank(); ++d)
      w.u32(static_cast<uint32_t>(t.dim(d)));
    for (size_t i = 0; i < t.size(); ++i)
      w.f32(static_cast<float>(t[i]));
  }
}

}  // namespace detail

template <typename T>
void save_partition(const BipartiteNetwork<T>& bp, const std::string& path) {
  detail::ByteWriter w;
  w.raw("PPRT", 4);
  w.u32(detail::kPartitionVersion);
  w.u32(static_cast<uint32_t>(bp.cut));
  w.u8(bp.local_locked ? 1 : 0);

  const Shape& in = bp.local.input_shape();
  w.u8(static_cast<uint8_t>(in.size()));
  for (size_t d : in) w.u32(static_cast<uint32_t>(d));

  std::vector<LayerSpec> specs = bp.local.specs();
  specs.insert(specs.end(), bp.remote.specs().begin(),
               bp.remote.specs().end());
  w.u32(static_cast<uint32_t>(specs.size()));
  for (const LayerSpec& l : specs) {
    w.u8(static_cast<uint8_t>(l.kind));
    w.u8(static_cast<uint8_t>(l.act));
    w.u32(static_cast<uint32_t>(l.units));
    w.u32(static_cast<uint32_t>(l.channels));
    w.u32(static_cast<uint32_t>(l.kernel));
    w.u32(static_cast<uint32_t>(l.stride));
    w.u32(static_cast<uint32_t>(l.pad));
    w.f64(l.rate);
  }

  w.u32(static_cast<uint32_t>(bp.local.params().count() +
                              bp.remote.params().count()));
  detail::write_network_params(w, bp.local, 0);
  detail::write_network_params(w, bp.remote, bp.cut);

  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, w.bytes.data(), static_cast<uInt>(w.bytes.size())));
  w.u32(crc);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(w.bytes.data()),
            static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

template <typename T>
BipartiteNetwork<T> load_partition(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "PPRT", 4) != 0)
    throw IoError(path + " is not a partition file (bad magic)");
  const uint32_t stored_crc = uint32_t(bytes[bytes.size() - 4]) |
                              uint32_t(bytes[bytes.size() - 3]) << 8 |
                              uint32_t(bytes[bytes.size() - 2]) << 16 |
                              uint32_t(bytes[bytes.size() - 1]) << 24;
  const uint32_t actual_crc = static_cast<uint32_t>(
      crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
  if (stored_crc != actual_crc)
    throw IoError(path + " failed its checksum: stored " +
                  std::to_string(stored_crc) + ", computed " +
                  std::to_string(actual_crc));

  detail::ByteReader r{bytes, 4, path};
  const uint32_t version = r.u32();
  if (version != detail::kPartitionVersion)
    throw IoError(path + " has unsupported version " +
                  std::to_string(version));
  const uint32_t cut = r.u32();
  const bool locked = r.u8() != 0;

  Shape input(r.u8());
  for (size_t& d : input) d = r.u32();

  std::vector<LayerSpec> specs(r.u32());
  for (LayerSpec& l : specs) {
    const uint8_t kind = r.u8();
    if (kind > static_cast<uint8_t>(LayerSpec::Kind::flatten))
      throw IoError(path + " names an unknown layer kind " +
                    std::to_string(kind));
    l.kind = static_cast<LayerSpec::Kind>(kind);
    const uint8_t act = r.u8();
    if (act > static_cast<uint8_t>(Activation::tanh))
      throw IoError(path + " names an unknown activation " +
                    std::to_string(act));
    l.act = static_cast<Activation>(act);
    l.units = r.u32();
    l.channels = r.u32();
    l.kernel = r.u32();
    l.stride = r.u32();
    l.pad = r.u32();
    l.rate = r.f64();
  }

  Network<T> net(input, specs);
  const uint32_t param_count = r.u32();
  for (uint32_t p = 0; p < param_count; ++p) {
    const uint16_t name_len = r.u16();
    r.need(name_len);
    std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos),
                     name_len);
    r.pos += name_len;
    Shape shape(r.u8());
    for (size_t& d : shape) d = r.u32();
    Tensor<T> t(shape);
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(r.f32());
    net.params().add(name, std::move(t));
  }
  if (r.pos != bytes.size() - 4)
    throw IoError(path + " has trailing bytes after the parameter table");
  try {
    net.validate_params();
  } catch (const Error& e) {
    throw IoError(path + ": " + e.what());
  }

  BipartiteNetwork<T> bp = split(net, cut);
  bp.local_locked = locked;
  return bp;
}

}  // namespace privpart
