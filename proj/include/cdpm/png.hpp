#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cdpm/volume.hpp"

namespace cdpm {

/// 8-bit grayscale PNG with stored (uncompressed) deflate blocks, so the
/// bytes depend only on the pixels.
std::vector<unsigned char> encode_png_gray8(std::size_t width, std::size_t height,
                                            const std::vector<std::uint8_t>& pixels);

/// Quantizes [0, 1] to 0..255 as lround(clamp(v, 0, 1) * 255); 0.5 maps to 128.
std::uint8_t quantize_unit(double v);

struct Montage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t tiles = 0;
  std::size_t columns = 0;
  std::vector<std::uint8_t> pixels;
};

/// Grid of every `every`-th slice along `axis` (slices 0, k, 2k, ...).
/// columns = ceil(sqrt(tiles)); unused grid cells are black.
Montage make_slice_montage(const Volume& volume, Axis axis, std::size_t every);

void export_slice_montage(const Volume& volume, Axis axis, const std::filesystem::path& path,
                          std::size_t every = 1);

}  // namespace cdpm
