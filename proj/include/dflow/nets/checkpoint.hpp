#pragma once

// Checkpoint layout (all integers and floats little-endian):
//   "DFLOW1"                        6 bytes magic
//   u32 slice_count
//   slice_count x { u32 name_len, name bytes, u64 offset, u64 length }
//   u64 value_count
//   value_count x f64

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dflow/engine/errors.hpp"
#include "dflow/engine/param_store.hpp"

namespace dflow {

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(std::istream& is) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == EOF) throw Error("truncated checkpoint");
    v |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "DFLOW1";

inline void write_checkpoint(const std::string& path, const ParamStore& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint '" + path + "'");
  os.write(kCheckpointMagic, 6);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.layout().size()));
  for (const auto& s : params.layout()) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.name.size()));
    os.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    detail::put_le<std::uint64_t>(os, s.offset);
    detail::put_le<std::uint64_t>(os, s.length);
  }
  detail::put_le<std::uint64_t>(os, params.size());
  for (double v : params.values()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw Error("failed writing checkpoint '" + path + "'");
}

inline ParamStore read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint '" + path + "'");
  char magic[6];
  is.read(magic, 6);
  if (!is || std::string(magic, 6) != kCheckpointMagic) throw Error("'" + path + "' is not a DFLOW1 checkpoint");
  const auto count = detail::get_le<std::uint32_t>(is);
  std::vector<ParamSlice> layout;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw Error("truncated checkpoint");
    const auto offset = detail::get_le<std::uint64_t>(is);
    const auto length = detail::get_le<std::uint64_t>(is);
    layout.push_back({std::move(name), offset, length});
  }
  const auto n = detail::get_le<std::uint64_t>(is);
  std::vector<double> values(n);
  for (auto& v : values) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
  return ParamStore::from_parts(std::move(layout), std::move(values));
}

}  // namespace dflow
