#include "cdpm/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "cdpm/io.hpp"
#include "cdpm/rng.hpp"

namespace cdpm {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Volume::Volume(Dims dims, float fill) : dims_(dims), voxels_(dims.voxels(), fill) {}

Volume::Volume(Dims dims, std::vector<float> voxels, std::string meta)
    : dims_(dims), voxels_(std::move(voxels)), meta_(std::move(meta)) {
  if (voxels_.size() != dims_.voxels())
    throw std::invalid_argument("Volume: voxel count does not match dims");
}

bool Volume::operator==(const Volume& other) const {
  return dims_ == other.dims_ &&
         std::memcmp(voxels_.data(), other.voxels_.data(), voxels_.size() * sizeof(float)) == 0;
}

std::string to_string(Axis axis) {
  switch (axis) {
    case Axis::Axial: return "axial";
    case Axis::Coronal: return "coronal";
    case Axis::Sagittal: return "sagittal";
  }
  return "axial";
}

Axis axis_from_string(const std::string& name) {
  if (name == "axial") return Axis::Axial;
  if (name == "coronal") return Axis::Coronal;
  if (name == "sagittal") return Axis::Sagittal;
  throw std::invalid_argument("unknown axis '" + name + "' (expected axial, coronal or sagittal)");
}

Volume reorient(const Volume& v, Axis axis) {
  const Dims d = v.dims();
  switch (axis) {
    case Axis::Axial: return v;
    case Axis::Coronal: {
      Volume out(Dims{d.height, d.depth, d.width});
      for (std::size_t z = 0; z < d.depth; ++z)
        for (std::size_t y = 0; y < d.height; ++y)
          for (std::size_t x = 0; x < d.width; ++x) out.at(y, z, x) = v.at(z, y, x);
      return out;
    }
    case Axis::Sagittal: {
      Volume out(Dims{d.width, d.depth, d.height});
      for (std::size_t z = 0; z < d.depth; ++z)
        for (std::size_t y = 0; y < d.height; ++y)
          for (std::size_t x = 0; x < d.width; ++x) out.at(x, z, y) = v.at(z, y, x);
      return out;
    }
  }
  return v;
}

Volume restore_orientation(const Volume& v, Axis axis) {
  const Dims d = v.dims();
  switch (axis) {
    case Axis::Axial: return v;
    case Axis::Coronal: {
      Volume out(Dims{d.height, d.depth, d.width});
      for (std::size_t y = 0; y < d.depth; ++y)
        for (std::size_t z = 0; z < d.height; ++z)
          for (std::size_t x = 0; x < d.width; ++x) out.at(z, y, x) = v.at(y, z, x);
      return out;
    }
    case Axis::Sagittal: {
      Volume out(Dims{d.height, d.width, d.depth});
      for (std::size_t x = 0; x < d.depth; ++x)
        for (std::size_t z = 0; z < d.height; ++z)
          for (std::size_t y = 0; y < d.width; ++y) out.at(z, y, x) = v.at(x, z, y);
      return out;
    }
  }
  return v;
}

SliceStack to_slices(const Volume& volume) {
  const Dims d = volume.dims();
  SliceStack s(d.depth, d.height, d.width);
  std::copy(volume.voxels().begin(), volume.voxels().end(), s.data.begin());
  return s;
}

Volume from_slices(const SliceStack& slices) {
  std::vector<float> vox(slices.data.size());
  std::transform(slices.data.begin(), slices.data.end(), vox.begin(),
                 [](double x) { return static_cast<float>(x); });
  return Volume(Dims{slices.count, slices.height, slices.width}, std::move(vox));
}

namespace {
constexpr char kVolumeMagic[4] = {'V', 'O', 'L', '1'};
}

std::vector<unsigned char> encode_volume(const Volume& volume) {
  ByteWriter w;
  w.bytes(kVolumeMagic, 4);
  w.u64(volume.dims().depth);
  w.u64(volume.dims().height);
  w.u64(volume.dims().width);
  for (float v : volume.voxels()) w.f32(v);
  return w.take();
}

Volume decode_volume(const std::vector<unsigned char>& bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kVolumeMagic, 4) != 0) throw FormatError("bad magic (expected VOL1)");
  Dims dims;
  dims.depth = r.u64();
  dims.height = r.u64();
  dims.width = r.u64();
  if (dims.depth == 0 || dims.height == 0 || dims.width == 0)
    throw FormatError("zero-sized dimension");
  if (r.remaining() / 4 < dims.voxels()) throw FormatError("truncated payload");
  if (r.remaining() != dims.voxels() * 4) throw FormatError("trailing bytes after payload");
  std::vector<float> vox(dims.voxels());
  for (auto& v : vox) {
    v = r.f32();
    if (!std::isfinite(v)) throw FormatError("non-finite voxel");
  }
  return Volume(dims, std::move(vox));
}

void save_volume(const Volume& volume, const std::filesystem::path& path) {
  write_file_atomic(path, encode_volume(volume));
}

Volume load_volume(const std::filesystem::path& path) {
  try {
    Volume v = decode_volume(read_file(path));
    v.set_meta(path.filename().string());
    return v;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<Volume> load_volume_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw std::runtime_error("'" + dir.string() + "' is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".vol") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<Volume> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(load_volume(f));
  return out;
}

Volume normalize_intensity(const Volume& volume) {
  if (volume.size() == 0) throw std::invalid_argument("normalize_intensity: empty volume");
  const auto [lo_it, hi_it] = std::minmax_element(volume.voxels().begin(), volume.voxels().end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo))
    throw std::invalid_argument("normalize_intensity: constant volume (zero intensity range)");
  Volume out = volume;
  for (auto& v : out.voxels()) v = static_cast<float>((static_cast<double>(v) - lo) / (hi - lo));
  return out;
}

std::uint64_t volume_digest(const Volume& volume) {
  const auto bytes = encode_volume(volume);
  return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace cdpm
