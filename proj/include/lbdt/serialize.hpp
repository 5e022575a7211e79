/*
 * Copyright 2026 The lbdt authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef LBDT_SERIALIZE_HPP
#define LBDT_SERIALIZE_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "lbdt/tensor.hpp"

namespace lbdt {

// Tensor files: "LBDT" magic, format version, dtype code (0 = f32, 1 = f64),
// rank, u32 dims, then raw values. All integers and values little-endian,
// values row-major.
namespace wire {

constexpr char kTensorMagic[4] = {'L', 'B', 'D', 'T'};
constexpr uint8_t kTensorVersion = 1;

inline void put_u8(std::string& out, uint8_t v) { out.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& out, uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& buf, std::string source) : buf_(buf), src_(std::move(source)) {}

  uint8_t u8() { return take(1)[0]; }
  uint16_t u16() {
    const unsigned char* p = take(2);
    return static_cast<uint16_t>(p[0] | (p[1] << 8));
  }
  uint32_t u32() {
    const unsigned char* p = take(4);
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
  }
  uint64_t u64() {
    uint64_t lo = u32();
    uint64_t hi = u32();
    return lo | (hi << 32);
  }
  std::string bytes(size_t n) {
    const unsigned char* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  const unsigned char* take(size_t n) {
    if (pos_ + n > buf_.size())
      throw std::runtime_error(src_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                               std::to_string(pos_) + ", have " + std::to_string(buf_.size() - pos_) + ")");
    const unsigned char* p = reinterpret_cast<const unsigned char*>(buf_.data()) + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == buf_.size(); }
  size_t pos() const { return pos_; }
  const std::string& source() const { return src_; }

 private:
  const std::string& buf_;
  std::string src_;
  size_t pos_ = 0;
};

}  // namespace wire

template <typename T>
constexpr uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "f32/f64 only");
  return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
void append_tensor(std::string& out, const Tensor<T>& t) {
  out.append(wire::kTensorMagic, 4);
  wire::put_u8(out, wire::kTensorVersion);
  wire::put_u8(out, dtype_code<T>());
  wire::put_u8(out, static_cast<uint8_t>(t.rank()));
  for (int64_t d : t.shape) wire::put_u32(out, static_cast<uint32_t>(d));
  for (T v : t.data) {
    if constexpr (std::is_same_v<T, float>) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      wire::put_u32(out, bits);
    } else {
      uint64_t bits;
      std::memcpy(&bits, &v, 8);
      wire::put_u64(out, bits);
    }
  }
}

template <typename T>
Tensor<T> read_tensor(wire::Reader& r) {
  std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), wire::kTensorMagic, 4) != 0)
    throw std::runtime_error(r.source() + ": bad tensor magic");
  uint8_t version = r.u8();
  if (version != wire::kTensorVersion)
    throw std::runtime_error(r.source() + ": unsupported tensor version " + std::to_string(version));
  uint8_t dtype = r.u8();
  if (dtype != dtype_code<T>())
    throw std::runtime_error(r.source() + ": dtype code " + std::to_string(dtype) +
                             " does not match requested element type");
  uint8_t rank = r.u8();
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<int64_t>(r.u32());
  Tensor<T> t(shape);
  for (auto& v : t.data) {
    if constexpr (std::is_same_v<T, float>) {
      uint32_t bits = r.u32();
      std::memcpy(&v, &bits, 4);
    } else {
      uint64_t bits = r.u64();
      std::memcpy(&v, &bits, 8);
    }
  }
  return t;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file_bytes(const std::string& path, const std::string& buf) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("short write to " + path);
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::string buf;
  append_tensor(buf, t);
  write_file_bytes(path, buf);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::string buf = read_file_bytes(path);
  wire::Reader r(buf, path);
  Tensor<T> t = read_tensor<T>(r);
  if (!r.done())
    throw std::runtime_error(path + ": trailing bytes after tensor payload");
  return t;
}

// Checkpoint container: run settings snapshot, epoch and optimizer step,
// generator state, then an ordered named-tensor section. Saving a freshly
// loaded checkpoint reproduces the file byte for byte.
struct Checkpoint {
  std::string config_text;
  uint32_t epoch = 0;
  uint64_t opt_step = 0;
  std::string rng_state;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace wire {
constexpr char kCkptMagic[8] = {'L', 'B', 'D', 'T', 'C', 'K', 'P', 'T'};
constexpr uint8_t kCkptVersion = 1;
}  // namespace wire

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out;
  out.append(wire::kCkptMagic, 8);
  wire::put_u8(out, wire::kCkptVersion);
  wire::put_u32(out, static_cast<uint32_t>(ck.config_text.size()));
  out.append(ck.config_text);
  wire::put_u32(out, ck.epoch);
  wire::put_u64(out, ck.opt_step);
  wire::put_u32(out, static_cast<uint32_t>(ck.rng_state.size()));
  out.append(ck.rng_state);
  wire::put_u32(out, static_cast<uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    wire::put_u16(out, static_cast<uint16_t>(name.size()));
    out.append(name);
    append_tensor(out, t);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& buf, const std::string& source) {
  wire::Reader r(buf, source);
  std::string magic = r.bytes(8);
  if (std::memcmp(magic.data(), wire::kCkptMagic, 8) != 0)
    throw std::runtime_error(source + ": bad checkpoint magic");
  uint8_t version = r.u8();
  if (version != wire::kCkptVersion)
    throw std::runtime_error(source + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config_text = r.bytes(r.u32());
  ck.epoch = r.u32();
  ck.opt_step = r.u64();
  ck.rng_state = r.bytes(r.u32());
  uint32_t count = r.u32();
  ck.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u16());
    ck.tensors.emplace_back(std::move(name), read_tensor<float>(r));
  }
  if (!r.done()) throw std::runtime_error(source + ": trailing bytes after checkpoint payload");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file_bytes(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file_bytes(path), path);
}

}  // namespace lbdt

#endif  // LBDT_SERIALIZE_HPP
