#include "cdpm/png.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "cdpm/io.hpp"

namespace cdpm {

namespace {

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<unsigned char>(v >> s));
}

void chunk(std::vector<unsigned char>& out, const char type[4],
           const std::vector<unsigned char>& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t type_at = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uLong crc = crc32(0L, out.data() + type_at, static_cast<uInt>(4 + data.size()));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

std::vector<unsigned char> encode_png_gray8(std::size_t width, std::size_t height,
                                            const std::vector<std::uint8_t>& pixels) {
  if (width == 0 || height == 0 || pixels.size() != width * height)
    throw std::invalid_argument("encode_png_gray8: pixel buffer does not match size");

  // Raw scanlines with filter byte 0.
  std::vector<unsigned char> raw;
  raw.reserve(height * (width + 1));
  for (std::size_t y = 0; y < height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), pixels.begin() + static_cast<long>(y * width),
               pixels.begin() + static_cast<long>((y + 1) * width));
  }

  std::vector<unsigned char> z = {0x78, 0x01};
  constexpr std::size_t kMaxStored = 65535;
  std::size_t pos = 0;
  do {
    const std::size_t n = std::min(kMaxStored, raw.size() - pos);
    const bool last = pos + n == raw.size();
    z.push_back(last ? 1 : 0);
    z.push_back(static_cast<unsigned char>(n & 0xff));
    z.push_back(static_cast<unsigned char>(n >> 8));
    z.push_back(static_cast<unsigned char>(~n & 0xff));
    z.push_back(static_cast<unsigned char>((~n >> 8) & 0xff));
    z.insert(z.end(), raw.begin() + static_cast<long>(pos), raw.begin() + static_cast<long>(pos + n));
    pos += n;
  } while (pos < raw.size());
  put_be32(z, static_cast<std::uint32_t>(adler32(1L, raw.data(), static_cast<uInt>(raw.size()))));

  std::vector<unsigned char> ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(width));
  put_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // depth 8, grayscale, deflate, no filter, no interlace

  std::vector<unsigned char> png = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  chunk(png, "IHDR", ihdr);
  chunk(png, "IDAT", z);
  chunk(png, "IEND", {});
  return png;
}

std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

Montage make_slice_montage(const Volume& volume, Axis axis, std::size_t every) {
  if (every == 0) throw std::invalid_argument("make_slice_montage: slice step must be >= 1");
  const Volume v = reorient(volume, axis);
  const Dims d = v.dims();
  Montage m;
  m.tiles = (d.depth + every - 1) / every;
  m.columns = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(m.tiles))));
  const std::size_t rows = (m.tiles + m.columns - 1) / m.columns;
  m.width = m.columns * d.width;
  m.height = rows * d.height;
  m.pixels.assign(m.width * m.height, 0);
  for (std::size_t tile = 0; tile < m.tiles; ++tile) {
    const std::size_t s = tile * every;
    const std::size_t ox = (tile % m.columns) * d.width;
    const std::size_t oy = (tile / m.columns) * d.height;
    for (std::size_t y = 0; y < d.height; ++y)
      for (std::size_t x = 0; x < d.width; ++x)
        m.pixels[(oy + y) * m.width + ox + x] = quantize_unit(v.at(s, y, x));
  }
  return m;
}

void export_slice_montage(const Volume& volume, Axis axis, const std::filesystem::path& path,
                          std::size_t every) {
  const Montage m = make_slice_montage(volume, axis, every);
  write_file_atomic(path, encode_png_gray8(m.width, m.height, m.pixels));
}

}  // namespace cdpm
