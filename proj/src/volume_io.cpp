#include "dbs/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dbs {

static_assert(std::endian::native == std::endian::little, "volume files are written little-endian");

VolumeHeader volume_header(const VoxelGrid& grid, std::string units, std::string type) {
  VolumeHeader h;
  h.dims = grid.dims();
  h.spacing = grid.spacing();
  h.origin = grid.origin();
  h.units = std::move(units);
  h.type = std::move(type);
  return h;
}

namespace {

std::size_t count(const VolumeHeader& h) {
  return static_cast<std::size_t>(h.dims[0]) * static_cast<std::size_t>(h.dims[1]) * static_cast<std::size_t>(h.dims[2]);
}

std::ofstream open_with_header(const std::filesystem::path& path, const VolumeHeader& h, std::size_t n) {
  if (n != count(h)) throw InvalidInput("volume payload does not match its dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out.precision(17);
  out << "dbs-volume 1\n"
      << "dims " << h.dims[0] << ' ' << h.dims[1] << ' ' << h.dims[2] << '\n'
      << "spacing " << h.spacing << ' ' << h.spacing << ' ' << h.spacing << '\n'
      << "origin " << h.origin.x() << ' ' << h.origin.y() << ' ' << h.origin.z() << '\n'
      << "units " << (h.units.empty() ? "1" : h.units) << '\n'
      << "type " << h.type << '\n'
      << "endianness little\n"
      << "end_header\n";
  return out;
}

}  // namespace

void write_volume(const std::filesystem::path& path, const VolumeHeader& header, const std::vector<double>& values) {
  if (header.type != "float64") throw InvalidInput("double payload needs type float64");
  auto out = open_with_header(path, header, values.size());
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

void write_volume(const std::filesystem::path& path, const VolumeHeader& header,
                  const std::vector<std::uint8_t>& values) {
  if (header.type != "uint8") throw InvalidInput("byte payload needs type uint8");
  auto out = open_with_header(path, header, values.size());
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size()));
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  Volume v;
  std::string line;
  std::getline(in, line);
  if (line != "dbs-volume 1") throw InvalidInput(path.string() + " is not a volume file");
  bool done = false;
  while (!done && std::getline(in, line)) {
    std::istringstream s(line);
    std::string key;
    s >> key;
    if (key == "dims") s >> v.header.dims[0] >> v.header.dims[1] >> v.header.dims[2];
    else if (key == "spacing") s >> v.header.spacing;
    else if (key == "origin") s >> v.header.origin.x() >> v.header.origin.y() >> v.header.origin.z();
    else if (key == "units") s >> v.header.units;
    else if (key == "type") s >> v.header.type;
    else if (key == "endianness") {
      std::string e;
      s >> e;
      if (e != "little") throw InvalidInput("unsupported endianness " + e);
    } else if (key == "end_header") done = true;
    else throw InvalidInput("unknown volume header key '" + key + "'");
  }
  if (!done || (v.header.dims <= 0).any()) throw InvalidInput("malformed volume header in " + path.string());
  const std::size_t n = count(v.header);
  v.values.resize(n);
  if (v.header.type == "float64") {
    in.read(reinterpret_cast<char*>(v.values.data()), static_cast<std::streamsize>(n * sizeof(double)));
  } else if (v.header.type == "uint8") {
    std::vector<std::uint8_t> bytes(n);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
    for (std::size_t i = 0; i < n; ++i) v.values[i] = bytes[i];
  } else {
    throw InvalidInput("unsupported volume type " + v.header.type);
  }
  if (!in) throw InvalidInput("truncated volume payload in " + path.string());
  return v;
}

}  // namespace dbs
