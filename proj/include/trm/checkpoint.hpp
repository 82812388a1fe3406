#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "trm/common.hpp"
#include "trm/unet.hpp"

namespace trm {

// RMTC checkpoint format, version 1. Little-endian throughout:
//   "RMTC" | u32 version | config (6 x i64) | u32 param count |
//   per param: u32 name length | name bytes | u8 trainable |
//              u32 ndim | ndim x i64 dims | numel x f64 raw data
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) fail(Errc::truncated, "file ended mid-record");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Errc::missing_file, "cannot open " + path.string() + " for writing");
  os.write("RMTC", 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  const UNetConfig& c = params.config();
  for (std::int64_t v : {c.in_channels, c.num_classes, c.depth, c.base_channels, c.height, c.width})
    detail::write_le<std::int64_t>(os, v);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& e : params.entries()) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::write_le<std::uint8_t>(os, e.trainable ? 1 : 0);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.tensor.ndim()));
    for (std::int64_t d : e.tensor.shape()) detail::write_le<std::int64_t>(os, d);
    for (double v : e.tensor.data()) detail::write_le<double>(os, v);
  }
  if (!os) fail(Errc::runtime, "write failed for " + path.string());
}

inline ModelParams load_checkpoint(const std::filesystem::path& path,
                                   const UNetConfig* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Errc::missing_file, "cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RMTC", 4) != 0) {
    fail(Errc::bad_magic, path.string() + " is not an RMTC checkpoint");
  }
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    fail(Errc::bad_version, "unsupported checkpoint version " + std::to_string(version));
  }
  UNetConfig cfg;
  cfg.in_channels = detail::read_le<std::int64_t>(is);
  cfg.num_classes = detail::read_le<std::int64_t>(is);
  cfg.depth = detail::read_le<std::int64_t>(is);
  cfg.base_channels = detail::read_le<std::int64_t>(is);
  cfg.height = detail::read_le<std::int64_t>(is);
  cfg.width = detail::read_le<std::int64_t>(is);
  cfg.validate();
  const auto count = detail::read_le<std::uint32_t>(is);
  std::vector<ParamEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_le<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) fail(Errc::truncated, "file ended inside a parameter name");
    const bool trainable = detail::read_le<std::uint8_t>(is) != 0;
    const auto ndim = detail::read_le<std::uint32_t>(is);
    Shape shape(ndim);
    for (auto& d : shape) d = detail::read_le<std::int64_t>(is);
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = detail::read_le<double>(is);
    entries.push_back({std::move(name), Tensor::from(std::move(shape), std::move(data)), trainable, false});
  }

  // The stored name sequence must match what the embedded config implies.
  const auto table = unet_param_table(cfg);
  if (table.size() != entries.size()) {
    fail(Errc::config_mismatch, path.string() + ": parameter count " +
                                    std::to_string(entries.size()) + " does not match config (" +
                                    std::to_string(table.size()) + " expected)");
  }
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table[i].name != entries[i].name || table[i].shape != entries[i].tensor.shape()) {
      fail(Errc::config_mismatch, path.string() + ": parameter '" + entries[i].name +
                                      "' does not match the config-derived table entry '" +
                                      table[i].name + "'");
    }
    entries[i].encoder = table[i].encoder;
  }
  if (expected && !(cfg == *expected)) {
    fail(Errc::config_mismatch, path.string() + ": checkpoint config differs from the expected config");
  }
  return ModelParams(cfg, std::move(entries));
}

}  // namespace trm
