#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cdpm/denoiser.hpp"
#include "cdpm/schedule.hpp"
#include "cdpm/slice_sampler.hpp"
#include "cdpm/volume.hpp"

namespace cdpm {

/// Everything a checkpoint needs besides the weights. The noise schedule is
/// rebuilt from `schedule` on load.
struct ModelMeta {
  DenoiserConfig denoiser;
  ScheduleParams schedule;
  SamplerPolicy policy;
  Axis slice_axis = Axis::Axial;
  std::uint64_t step = 0;
  /// Training volume extents in the model's slice orientation
  /// (slices, height, width); all zero when unknown.
  Dims volume_dims;
};

struct Checkpoint {
  ModelMeta meta;
  DenoiserParams params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// CDPM container:
///   "CDPM" | u32 version | u64 n | n bytes of canonical JSON (meta)
///   | u64 tensor count | per tensor: u32 name length, name, u32 rank,
///   rank x u64 dims, little-endian f32 values.
/// Parameters are rounded to f32 on write.
std::vector<unsigned char> encode_checkpoint(const ModelMeta& meta, const DenoiserParams& params);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);
void save_checkpoint(const std::filesystem::path& path, const ModelMeta& meta,
                     const DenoiserParams& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters as they come back from a checkpoint (each value rounded to f32).
DenoiserParams round_to_storage(const DenoiserParams& params);

}  // namespace cdpm
