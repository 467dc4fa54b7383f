#pragma once

#include <functional>
#include <string>

#include "cdpm/denoiser.hpp"
#include "cdpm/rng.hpp"
#include "cdpm/schedule.hpp"
#include "cdpm/slice_sampler.hpp"
#include "cdpm/volume.hpp"

namespace cdpm {

enum class ClipMode {
  Final,   // clamp only the finished targets to [0, 1]
  XStart,  // also clamp the implied clean estimate at every step
};

std::string to_string(ClipMode mode);
ClipMode clip_mode_from_string(const std::string& name);

/// One reverse transition for the target slices of `input`:
/// mean from the predicted noise plus sqrt(reverse_variance) * z, with
/// z = 0 at t = 0. Noise is drawn element by element in slice-major order.
/// Condition slices are read only.
SliceStack reverse_step(const DenoiserParams& params, const ConditionedInput& input,
                        const NoiseSchedule& sched, Rng& rng, ClipMode clip = ClipMode::Final);

/// Called with the bundle fed to the network at every step.
using StepObserver = std::function<void(const ConditionedInput&)>;

/// Full reverse chain for one stage: targets start as standard normal
/// (slice-major draws) and run t = T-1 down to 0. `cond_slices` holds the
/// clean slices for sets.cond in the same order and fixes H and W (a
/// zero-count stack still carries them).
SliceStack generate_target(const DenoiserParams& params, const SliceStack& cond_slices,
                           const IndexSets& sets, const NoiseSchedule& sched, Rng& rng,
                           ClipMode clip = ClipMode::Final, const StepObserver& observer = {});

/// Called after each stage with its index sets and output.
using StageObserver = std::function<void(std::size_t stage, const IndexSets&, const SliceStack&)>;

/// Runs the stages of `plan` in order, feeding generated slices forward as
/// conditions. The result is in the model's slice orientation.
Volume generate_volume(const DenoiserParams& params, const StagingPlan& plan, std::size_t height,
                       std::size_t width, const NoiseSchedule& sched, Rng& rng,
                       ClipMode clip = ClipMode::Final, const StageObserver& observer = {});

}  // namespace cdpm
