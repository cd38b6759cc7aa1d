#pragma once

// Flat binary checkpoint:
//   "MVCK" | u32 version | record*
//   record = u32 name_len | name (utf-8) | u32 rank | u64 extent[rank] | f32 payload (little-endian)
// Records run to end of file.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mv3d/core/error.hpp"
#include "mv3d/core/tensor.hpp"

namespace mv3d {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

using Checkpoint = std::vector<NamedTensor>;

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw IoError("checkpoint truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out = "MVCK";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& rec : ck) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.name.size()));
    out += rec.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.value.rank()));
    for (std::size_t e : rec.value.shape()) detail::put_le<std::uint64_t>(out, e);
    for (float f : rec.value.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 4, "MVCK") != 0) throw IoError("not an MVCK checkpoint");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  while (pos < bytes.size()) {
    NamedTensor rec;
    const auto name_len = detail::get_le<std::uint32_t>(bytes, pos);
    if (pos + name_len > bytes.size()) throw IoError("checkpoint truncated in record name");
    rec.name = bytes.substr(pos, name_len);
    pos += name_len;
    const auto rank = detail::get_le<std::uint32_t>(bytes, pos);
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(detail::get_le<std::uint64_t>(bytes, pos));
    std::vector<float> data(shape_size(shape));
    for (auto& f : data) f = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos));
    rec.value = Tensor(std::move(shape), std::move(data));
    ck.push_back(std::move(rec));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_checkpoint(ck);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

inline const Tensor* find_tensor(const Checkpoint& ck, const std::string& name) {
  for (const auto& rec : ck)
    if (rec.name == name) return &rec.value;
  return nullptr;
}

}  // namespace mv3d
