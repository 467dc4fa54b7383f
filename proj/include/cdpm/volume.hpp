#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "cdpm/slices.hpp"

namespace cdpm {

struct Dims {
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t voxels() const { return depth * height * width; }
  bool operator==(const Dims&) const = default;
};

/// D x H x W scalar grid stored as 32-bit floats, depth-major then
/// height then width.
class Volume {
 public:
  Volume() = default;
  explicit Volume(Dims dims, float fill = 0.0f);
  Volume(Dims dims, std::vector<float> voxels, std::string meta = {});

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return voxels_.size(); }
  float& at(std::size_t d, std::size_t h, std::size_t w) {
    return voxels_[(d * dims_.height + h) * dims_.width + w];
  }
  float at(std::size_t d, std::size_t h, std::size_t w) const {
    return voxels_[(d * dims_.height + h) * dims_.width + w];
  }
  std::vector<float>& voxels() { return voxels_; }
  const std::vector<float>& voxels() const { return voxels_; }
  const std::string& meta() const { return meta_; }
  void set_meta(std::string meta) { meta_ = std::move(meta); }

  /// Equality of dims and voxel bits; meta is ignored.
  bool operator==(const Volume& other) const;

 private:
  Dims dims_;
  std::vector<float> voxels_;
  std::string meta_;
};

enum class Axis { Axial, Coronal, Sagittal };

std::string to_string(Axis axis);
Axis axis_from_string(const std::string& name);

/// Permutes the volume so that `axis` becomes the leading (slice) axis.
/// Axial is the identity; coronal slices along H; sagittal along W.
Volume reorient(const Volume& volume, Axis axis);
/// Inverse of reorient.
Volume restore_orientation(const Volume& volume, Axis axis);

/// All slices along the leading axis, promoted to double.
SliceStack to_slices(const Volume& volume);
Volume from_slices(const SliceStack& slices);

/// VOL1 container: "VOL1", D, H, W as little-endian u64, then D*H*W
/// little-endian f32 voxels. Load rejects bad magic, truncated or
/// oversized payloads, and non-finite voxels.
std::vector<unsigned char> encode_volume(const Volume& volume);
Volume decode_volume(const std::vector<unsigned char>& bytes);
void save_volume(const Volume& volume, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);

/// Loads every *.vol file in a directory in lexicographic filename order.
std::vector<Volume> load_volume_dir(const std::filesystem::path& dir);

/// Min-max rescale to [0, 1]. Throws on a constant volume.
Volume normalize_intensity(const Volume& volume);

/// Content digest over dims and voxel bits.
std::uint64_t volume_digest(const Volume& volume);

}  // namespace cdpm
