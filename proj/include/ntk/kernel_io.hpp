#pragma once

// Binary kernel files: 8-byte magic "NTKERN01", little-endian u64 dims
// (n, n, P, P), then the float64 payload in row-major [i][j][p][q] order.
// A sidecar "<file>.meta" text file records the spec hash.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "ntk/error.hpp"
#include "ntk/kernel.hpp"

namespace ntk {

static_assert(std::endian::native == std::endian::little,
              "kernel file IO assumes a little-endian host");

inline constexpr char kKernelMagic[8] = {'N', 'T', 'K', 'E', 'R', 'N', '0', '1'};

struct KernelFile {
  Matrix data;  // (n·P) x (n·P), same layout as KernelState
  std::size_t num_points = 0;
  std::size_t spatial = 1;
};

inline void write_kernel(const std::string& path, const Matrix& kernel, std::size_t num_points,
                         std::size_t spatial) {
  const auto n = static_cast<Eigen::Index>(num_points);
  const auto P = static_cast<Eigen::Index>(spatial);
  if (kernel.rows() != n * P || kernel.cols() != n * P)
    throw ShapeError("write_kernel: matrix shape does not match (n, P)");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(kKernelMagic, sizeof kKernelMagic);
  const std::array<std::uint64_t, 4> dims = {num_points, num_points, spatial, spatial};
  out.write(reinterpret_cast<const char*>(dims.data()), sizeof(dims));
  std::vector<double> row(static_cast<std::size_t>(P));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index p = 0; p < P; ++p) {
        for (Eigen::Index q = 0; q < P; ++q) row[q] = kernel(i * P + p, j * P + q);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(double)));
      }
  if (!out) throw IoError("short write to " + path);
}

inline KernelFile read_kernel(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kKernelMagic, sizeof magic) != 0)
    throw IoError(path + ": bad kernel file magic");
  std::array<std::uint64_t, 4> dims{};
  in.read(reinterpret_cast<char*>(dims.data()), sizeof(dims));
  if (!in || dims[0] != dims[1] || dims[2] != dims[3] || dims[2] == 0)
    throw IoError(path + ": bad kernel dimensions");
  KernelFile f;
  f.num_points = dims[0];
  f.spatial = dims[2];
  const auto n = static_cast<Eigen::Index>(f.num_points);
  const auto P = static_cast<Eigen::Index>(f.spatial);
  f.data.resize(n * P, n * P);
  std::vector<double> row(static_cast<std::size_t>(P));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index p = 0; p < P; ++p) {
        in.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(double)));
        if (!in) throw IoError(path + ": truncated payload");
        for (Eigen::Index q = 0; q < P; ++q) f.data(i * P + p, j * P + q) = row[q];
      }
  return f;
}

inline void write_kernel_meta(const std::string& kernel_path,
                              const std::map<std::string, std::string>& fields) {
  std::ofstream out(kernel_path + ".meta", std::ios::trunc);
  if (!out) throw IoError("cannot write " + kernel_path + ".meta");
  for (const auto& [k, v] : fields) out << k << '=' << v << '\n';
}

inline std::map<std::string, std::string> read_kernel_meta(const std::string& kernel_path) {
  std::ifstream in(kernel_path + ".meta");
  if (!in) throw IoError("cannot open " + kernel_path + ".meta");
  std::map<std::string, std::string> fields;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) fields[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return fields;
}

}  // namespace ntk
