#pragma once

// Flat binary volumes with a short text header:
//
//   dbs-volume 1
//   dims 100 100 100
//   spacing 0.5 0.5 0.5
//   origin -24.75 -24.75 -14.75
//   units V
//   type float64
//   endianness little
//   end_header
//   <nx*ny*nz values, x fastest>

#include "dbs/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dbs {

struct VolumeHeader {
  Eigen::Array3i dims = Eigen::Array3i::Zero();
  double spacing = 1.0;
  Vec3 origin = Vec3::Zero();
  std::string units;
  std::string type = "float64";  // float64 or uint8
};

VolumeHeader volume_header(const VoxelGrid& grid, std::string units, std::string type = "float64");

void write_volume(const std::filesystem::path& path, const VolumeHeader& header, const std::vector<double>& values);
void write_volume(const std::filesystem::path& path, const VolumeHeader& header, const std::vector<std::uint8_t>& values);

struct Volume {
  VolumeHeader header;
  std::vector<double> values;  // uint8 payloads are widened
};

Volume read_volume(const std::filesystem::path& path);

}  // namespace dbs
