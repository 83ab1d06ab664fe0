#pragma once

// Checkpoint layout (all integers little-endian):
//
//   offset  size  field
//   0       8     magic "FAVORCKP"
//   8       4     format version (1)
//   12      4     reserved, zero
//   16      8     vocab size
//   24      8     feature_dim
//   32      8     hidden_dim
//   40      8     parameter count N
//   48      8*N   IEEE-754 binary64 values in PolicyParams flat order
//
// Values are written bit-for-bit, so a round-trip is exact.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "favor/error.hpp"
#include "favor/policy.hpp"

namespace favor {

inline constexpr std::array<char, 8> kCheckpointMagic = {'F', 'A', 'V', 'O', 'R', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_le(std::ostream& out, std::uint64_t value, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((value >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_le(std::istream& in, int bytes) {
  std::uint64_t value = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw DataError("checkpoint: unexpected end of data");
    value |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return value;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const PolicyParams& params) {
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le(out, kCheckpointVersion, 4);
  detail::put_le(out, 0, 4);
  detail::put_le(out, params.shape().vocab_size, 8);
  detail::put_le(out, params.shape().feature_dim, 8);
  detail::put_le(out, params.shape().hidden_dim, 8);
  detail::put_le(out, params.size(), 8);
  for (double v : params.values()) detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
}

inline std::string checkpoint_bytes(const PolicyParams& params) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(out, params);
  return out.str();
}

inline PolicyParams read_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 8 || magic != kCheckpointMagic) throw DataError("checkpoint: bad magic");
  const auto version = detail::get_le(in, 4);
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  detail::get_le(in, 4);
  PolicyShape shape;
  shape.vocab_size = detail::get_le(in, 8);
  shape.feature_dim = detail::get_le(in, 8);
  shape.hidden_dim = detail::get_le(in, 8);
  const auto count = detail::get_le(in, 8);
  if (shape.vocab_size == 0 || shape.feature_dim == 0 || shape.hidden_dim == 0)
    throw DataError("checkpoint: zero dimension in header");
  if (count != shape.parameter_count())
    throw DataError("checkpoint: parameter count " + std::to_string(count) + " does not match header dimensions");
  std::vector<double> values(count);
  for (auto& v : values) v = std::bit_cast<double>(detail::get_le(in, 8));
  if (in.peek() != std::char_traits<char>::eof()) throw DataError("checkpoint: trailing bytes");
  PolicyParams params(shape, std::move(values));
  if (!params.all_finite()) throw DataError("checkpoint: non-finite parameter");
  return params;
}

inline PolicyParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace favor
