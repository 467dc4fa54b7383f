#pragma once

#include <cstdint>
#include <filesystem>

#include "cdpm/rng.hpp"
#include "cdpm/volume.hpp"

namespace cdpm {

/// Procedural head-like phantom: a soft-edged outer ellipsoid with a bright
/// shell and darker interior, plus smaller inner ellipsoids, Gaussian
/// smoothed. Ellipsoid 0 is the head; the remaining ones are structures
/// placed inside it.
struct PhantomSpec {
  Dims dims{32, 32, 32};
  std::size_t min_ellipsoids = 3;  // counts the head; 0 gives a blank volume
  std::size_t max_ellipsoids = 6;
  double shell_low = 0.75, shell_high = 0.95;
  double tissue_low = 0.30, tissue_high = 0.50;
  double structure_low = 0.05, structure_high = 0.95;
  double shell_thickness = 0.15;  // fraction of head radius
  double edge_sharpness = 12.0;
  double smoothing = 0.8;  // Gaussian sigma in voxels; 0 disables
  double background = 0.0;
  std::uint64_t seed = 0;
};

void validate_phantom_spec(const PhantomSpec& spec);

Volume generate_phantom(const PhantomSpec& spec, Rng& rng);
/// Uses Rng(spec.seed).
Volume generate_phantom(const PhantomSpec& spec);

}  // namespace cdpm
