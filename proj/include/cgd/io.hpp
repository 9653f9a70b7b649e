#pragma once

// Little-endian binary formats:
//   TNS1  "TNS1" | u32 ndim | ndim x u32 extents | float32 payload
//   CKPT1 "CKPT1" | u32 count | count x (u16 name length | UTF-8 name | TNS1 tensor)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "cgd/errors.hpp"
#include "cgd/tensor.hpp"

namespace cgd {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::array<char, 4> kTensorMagic{'T', 'N', 'S', '1'};
inline constexpr std::array<char, 5> kCheckpointMagic{'C', 'K', 'P', 'T', '1'};

namespace io {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_integral_v<T>);
  std::array<char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
  os.write(bytes.data(), bytes.size());
}

template <typename T>
T read_le(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(T)> bytes{};
  auto offset = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw DataError(std::string("truncated ") + what + " at byte offset " + std::to_string(offset));
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return static_cast<T>(v);
}

inline void write_f32(std::ostream& os, float value) { write_le(os, std::bit_cast<std::uint32_t>(value)); }

inline float read_f32(std::istream& is, const char* what) { return std::bit_cast<float>(read_le<std::uint32_t>(is, what)); }

template <std::size_t N>
void expect_magic(std::istream& is, const std::array<char, N>& magic, const char* format) {
  std::array<char, N> got{};
  if (!is.read(got.data(), N) || got != magic) throw DataError(std::string("not a ") + format + " stream (bad magic)");
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return is;
}

}  // namespace io

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), 4);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
  for (auto e : t.shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  for (double v : t.data()) io::write_f32(os, static_cast<float>(v));
}

inline Tensor read_tensor(std::istream& is) {
  io::expect_magic(is, kTensorMagic, "TNS1");
  auto ndim = io::read_le<std::uint32_t>(is, "TNS1 rank");
  if (ndim > 8) throw DataError("TNS1 rank " + std::to_string(ndim) + " is implausible");
  Shape shape(ndim);
  for (auto& e : shape) {
    e = io::read_le<std::uint32_t>(is, "TNS1 extent");
    if (e == 0) throw DataError("TNS1 extent of zero");
  }
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = io::read_f32(is, "TNS1 payload");
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  auto os = io::open_out(path);
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
  auto is = io::open_in(path);
  return read_tensor(is);
}

inline void write_checkpoint(std::ostream& os, const NamedTensors& entries) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    if (name.size() > 0xFFFF) throw std::invalid_argument("checkpoint entry name too long");
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, tensor);
  }
}

inline NamedTensors read_checkpoint(std::istream& is) {
  io::expect_magic(is, kCheckpointMagic, "CKPT1");
  auto count = io::read_le<std::uint32_t>(is, "CKPT1 entry count");
  NamedTensors entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto len = io::read_le<std::uint16_t>(is, "CKPT1 name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw DataError("truncated CKPT1 entry name");
    entries.emplace_back(std::move(name), read_tensor(is));
  }
  return entries;
}

inline void save_checkpoint(const std::string& path, const NamedTensors& entries) {
  auto os = io::open_out(path);
  write_checkpoint(os, entries);
  if (!os) throw DataError("failed writing checkpoint " + path);
}

inline NamedTensors load_checkpoint(const std::string& path) {
  auto is = io::open_in(path);
  return read_checkpoint(is);
}

}  // namespace cgd
