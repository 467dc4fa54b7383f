#include "cdpm/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace cdpm {

void validate_phantom_spec(const PhantomSpec& spec) {
  const Dims& d = spec.dims;
  if (d.depth < 8 || d.height < 8 || d.width < 8)
    throw std::invalid_argument("PhantomSpec: dims too small for the shell (min 8 per axis)");
  if (spec.min_ellipsoids > spec.max_ellipsoids)
    throw std::invalid_argument("PhantomSpec: min_ellipsoids > max_ellipsoids");
  auto band = [](double lo, double hi, const char* name) {
    if (!(lo >= 0.0 && lo <= hi && hi <= 1.0))
      throw std::invalid_argument(std::string("PhantomSpec: ") + name +
                                  " band must satisfy 0 <= low <= high <= 1");
  };
  band(spec.shell_low, spec.shell_high, "shell");
  band(spec.tissue_low, spec.tissue_high, "tissue");
  band(spec.structure_low, spec.structure_high, "structure");
  band(spec.background, spec.background, "background");
  if (spec.smoothing < 0.0) throw std::invalid_argument("PhantomSpec: smoothing must be >= 0");
  if (!(spec.shell_thickness > 0.0 && spec.shell_thickness < 1.0))
    throw std::invalid_argument("PhantomSpec: shell_thickness must lie in (0, 1)");
}

namespace {

struct Ellipsoid {
  double center[3];
  double radius[3];
  double intensity;
};

// Paints a soft-edged ellipsoid over `vox` by convex blending.
void paint(std::vector<double>& vox, const Dims& d, const Ellipsoid& e, double sharpness) {
  for (std::size_t z = 0; z < d.depth; ++z)
    for (std::size_t y = 0; y < d.height; ++y)
      for (std::size_t x = 0; x < d.width; ++x) {
        const double dz = (static_cast<double>(z) - e.center[0]) / e.radius[0];
        const double dy = (static_cast<double>(y) - e.center[1]) / e.radius[1];
        const double dx = (static_cast<double>(x) - e.center[2]) / e.radius[2];
        const double r = std::sqrt(dz * dz + dy * dy + dx * dx);
        const double m = 1.0 / (1.0 + std::exp(-(1.0 - r) * sharpness));
        double& v = vox[(z * d.height + y) * d.width + x];
        v = v * (1.0 - m) + e.intensity * m;
      }
}

void smooth_axis(std::vector<double>& vox, const Dims& d, int axis,
                 const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  const std::size_t len[3] = {d.depth, d.height, d.width};
  const std::size_t stride[3] = {d.height * d.width, d.width, 1};
  std::vector<double> out(vox.size());
  for (std::size_t z = 0; z < d.depth; ++z)
    for (std::size_t y = 0; y < d.height; ++y)
      for (std::size_t x = 0; x < d.width; ++x) {
        const std::size_t idx = (z * d.height + y) * d.width + x;
        const std::size_t pos[3] = {z, y, x};
        const auto p = static_cast<long>(pos[axis]);
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const long q = std::clamp(p + k, 0L, static_cast<long>(len[axis]) - 1);
          acc += kernel[static_cast<std::size_t>(k + radius)] *
                 vox[idx + static_cast<std::size_t>(q - p) * stride[axis]];
        }
        out[idx] = acc;
      }
  vox.swap(out);
}

double draw(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

}  // namespace

Volume generate_phantom(const PhantomSpec& spec, Rng& rng) {
  validate_phantom_spec(spec);
  const Dims& d = spec.dims;
  std::vector<double> vox(d.voxels(), spec.background);
  const auto n = static_cast<std::size_t>(rng.uniform_int(
      static_cast<std::int64_t>(spec.min_ellipsoids), static_cast<std::int64_t>(spec.max_ellipsoids)));

  if (n > 0) {
    const double size[3] = {static_cast<double>(d.depth), static_cast<double>(d.height),
                            static_cast<double>(d.width)};
    Ellipsoid head{};
    for (int a = 0; a < 3; ++a) {
      head.center[a] = (size[a] - 1.0) / 2.0 + draw(rng, -0.05, 0.05) * size[a];
      head.radius[a] = draw(rng, 0.34, 0.44) * size[a];
    }
    head.intensity = draw(rng, spec.shell_low, spec.shell_high);
    paint(vox, d, head, spec.edge_sharpness);

    Ellipsoid interior = head;
    for (double& r : interior.radius) r *= 1.0 - spec.shell_thickness;
    interior.intensity = draw(rng, spec.tissue_low, spec.tissue_high);
    paint(vox, d, interior, spec.edge_sharpness);

    for (std::size_t i = 1; i < n; ++i) {
      Ellipsoid s{};
      // Centres inside the interior ellipsoid: scaled random direction.
      double dir[3];
      double norm = 0.0;
      for (double& c : dir) {
        c = rng.normal();
        norm += c * c;
      }
      norm = std::sqrt(norm) + 1e-12;
      const double reach = draw(rng, 0.0, 0.6);
      for (int a = 0; a < 3; ++a) {
        s.center[a] = interior.center[a] + dir[a] / norm * reach * interior.radius[a];
        s.radius[a] = draw(rng, 0.12, 0.35) * interior.radius[a];
      }
      s.intensity = draw(rng, spec.structure_low, spec.structure_high);
      paint(vox, d, s, spec.edge_sharpness);
    }

    if (spec.smoothing > 0.0) {
      const int radius = static_cast<int>(std::ceil(3.0 * spec.smoothing));
      std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
      double total = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        const double w = std::exp(-0.5 * k * k / (spec.smoothing * spec.smoothing));
        kernel[static_cast<std::size_t>(k + radius)] = w;
        total += w;
      }
      for (double& w : kernel) w /= total;
      for (int axis = 0; axis < 3; ++axis) smooth_axis(vox, d, axis, kernel);
    }
  }

  std::vector<float> out(vox.size());
  std::transform(vox.begin(), vox.end(), out.begin(),
                 [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); });
  return Volume(d, std::move(out), "phantom");
}

Volume generate_phantom(const PhantomSpec& spec) {
  Rng rng(spec.seed);
  return generate_phantom(spec, rng);
}

}  // namespace cdpm
