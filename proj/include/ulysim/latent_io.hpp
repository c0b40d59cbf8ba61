#pragma once

/* Binary dump format for a latent matrix.
 *
 * Layout (all integers little-endian):
 *   bytes 0..3    magic "ULAT"
 *   bytes 4..7    u32 format version (currently 1)
 *   bytes 8..15   i64 rows
 *   bytes 16..23  i64 cols
 *   bytes 24..27  u32 dtype code (0 = float32)
 *   bytes 28..    payload, rows*cols float32 values in row-major order
 *
 * Serialization is fully deterministic: equal matrices produce byte-equal
 * dumps.
 */

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace ulysim {

static_assert(std::endian::native == std::endian::little,
              "latent dumps are written by memcpy on little-endian hosts");

inline constexpr char kLatentMagic[4] = {'U', 'L', 'A', 'T'};
inline constexpr std::uint32_t kLatentVersion = 1;
inline constexpr std::uint32_t kLatentDtypeFloat32 = 0;
inline constexpr std::size_t kLatentHeaderBytes = 28;

inline std::string serialize_latent(const Eigen::MatrixXf& m) {
  const std::int64_t rows = m.rows(), cols = m.cols();
  std::string out;
  out.resize(kLatentHeaderBytes +
             static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) *
                 sizeof(float));
  char* p = out.data();
  std::memcpy(p, kLatentMagic, 4);
  p += 4;
  std::memcpy(p, &kLatentVersion, 4);
  p += 4;
  std::memcpy(p, &rows, 8);
  p += 8;
  std::memcpy(p, &cols, 8);
  p += 8;
  std::memcpy(p, &kLatentDtypeFloat32, 4);
  p += 4;
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) {
      const float v = m(i, j);
      std::memcpy(p, &v, sizeof(float));
      p += sizeof(float);
    }
  return out;
}

inline Eigen::MatrixXf parse_latent(std::string_view bytes) {
  if (bytes.size() < kLatentHeaderBytes)
    throw std::runtime_error(
        fmt::format("[latent] file too short for header: {} bytes",
                    bytes.size()));
  const char* p = bytes.data();
  if (std::memcmp(p, kLatentMagic, 4) != 0)
    throw std::runtime_error("[latent] bad magic");
  p += 4;
  std::uint32_t version = 0, dtype = 0;
  std::int64_t rows = 0, cols = 0;
  std::memcpy(&version, p, 4);
  p += 4;
  std::memcpy(&rows, p, 8);
  p += 8;
  std::memcpy(&cols, p, 8);
  p += 8;
  std::memcpy(&dtype, p, 4);
  p += 4;
  if (version != kLatentVersion)
    throw std::runtime_error(
        fmt::format("[latent] unsupported version {}", version));
  if (dtype != kLatentDtypeFloat32)
    throw std::runtime_error(
        fmt::format("[latent] unsupported dtype code {}", dtype));
  if (rows < 0 || cols < 0 || (rows > 0 && cols > (1LL << 40) / rows))
    throw std::runtime_error(
        fmt::format("[latent] invalid dims {}x{}", rows, cols));
  const std::size_t expect =
      static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) *
      sizeof(float);
  if (bytes.size() - kLatentHeaderBytes != expect)
    throw std::runtime_error(fmt::format(
        "[latent] payload size mismatch: expected {} bytes, found {}", expect,
        bytes.size() - kLatentHeaderBytes));
  Eigen::MatrixXf m(rows, cols);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) {
      float v = 0.0f;
      std::memcpy(&v, p, sizeof(float));
      p += sizeof(float);
      m(i, j) = v;
    }
  return m;
}

inline void write_latent(const std::filesystem::path& path,
                         const Eigen::MatrixXf& m) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f)
    throw std::runtime_error(
        fmt::format("[latent] cannot open '{}' for writing", path.string()));
  const std::string bytes = serialize_latent(m);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f)
    throw std::runtime_error(
        fmt::format("[latent] write to '{}' failed", path.string()));
}

inline Eigen::MatrixXf read_latent(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error(
        fmt::format("[latent] cannot open '{}' for reading", path.string()));
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  return parse_latent(bytes);
}

}  // namespace ulysim
