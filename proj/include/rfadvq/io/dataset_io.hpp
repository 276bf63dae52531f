#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <vector>

#include "rfadvq/io/binary.hpp"
#include "rfadvq/waveforms.hpp"

namespace rfadvq::io {

// "RFDS" dataset file: {magic, version u32, count u32, n u32 = 1024} then per
// record {label u8, n float32 I, n float32 Q}, all little-endian.
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_datapoints(std::ostream& os, std::span<const IQDatapoint> xs) {
  BinaryWriter w(os);
  w.magic("RFDS");
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(xs.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(kWindow));
  for (const auto& x : xs) {
    w.put<std::uint8_t>(x.label);
    w.array<float>(x.i);
    w.array<float>(x.q);
  }
  w.check("dataset");
}

inline Datapoints read_datapoints(std::istream& is, const std::string& what = "dataset") {
  BinaryReader r(is, what);
  r.expect_magic("RFDS");
  r.expect_version(kDatasetVersion);
  const auto count = r.get<std::uint32_t>();
  const auto n = r.get<std::uint32_t>();
  if (n != kWindow) {
    throw FormatError(what + ": window length " + std::to_string(n) + " is not " +
                      std::to_string(kWindow));
  }
  Datapoints xs(count);
  for (auto& x : xs) {
    x.label = r.get<std::uint8_t>();
    if (x.label >= kNumClasses) throw FormatError(what + ": label out of range");
    r.array<float>(x.i);
    r.array<float>(x.q);
  }
  return xs;
}

inline void save_datapoints(const std::filesystem::path& path, std::span<const IQDatapoint> xs) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_datapoints(os, xs);
}

inline Datapoints load_datapoints(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_datapoints(is, path.string());
}

// Token dumps are raw u8 indices, kTokens per datapoint, no header.
inline void save_tokens(const std::filesystem::path& path, std::span<const std::uint8_t> tokens) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  BinaryWriter w(os);
  w.array<std::uint8_t>(tokens);
  w.check("tokens");
}

inline std::vector<std::uint8_t> load_tokens(const std::filesystem::path& path,
                                             std::size_t per_datapoint) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (out.size() % per_datapoint != 0) throw FormatError(path.string() + ": truncated token dump");
  return out;
}

}  // namespace rfadvq::io
