#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include "cdpm/rng.hpp"
#include "cdpm/slices.hpp"

namespace cdpm {

/// Disjoint condition and target slice index sets, each sorted ascending.
struct IndexSets {
  std::vector<std::size_t> cond;
  std::vector<std::size_t> target;
  std::size_t depth = 0;

  bool operator==(const IndexSets&) const = default;
  bool operator<(const IndexSets& other) const {
    return cond != other.cond ? cond < other.cond : target < other.target;
  }
};

/// Throws std::invalid_argument when any IndexSets invariant is violated.
void validate_index_sets(const IndexSets& sets, std::size_t tau_max);

struct SamplerPolicy {
  std::size_t tau_max = 20;
  double p_unconditional = 0.2;
  double contiguous_prob = 0.5;
  /// Seed for standalone use via policy_rng(). Training draws index sets
  /// from its own "train" stream so that a single state resumes the run.
  std::uint64_t rng_seed = 0;
};

inline Rng policy_rng(const SamplerPolicy& policy) { return Rng(policy.rng_seed); }

void validate_policy(const SamplerPolicy& policy);

/// Draws (C, P) for one training example.
///
/// With probability p_unconditional C is empty and len(P) is uniform on
/// [1, min(tau_max, D)]. Otherwise len(P) is uniform on [1, n-1] and
/// len(C) uniform on [1, n - len(P)], n = min(tau_max, D). With
/// probability contiguous_prob the union is one contiguous block with C
/// placed immediately before or after P (fair coin); otherwise the union
/// is an arbitrary subset and C is a random part of it.
IndexSets sample_index_sets(const SamplerPolicy& policy, std::size_t depth, Rng& rng);

struct StagingPlan {
  std::vector<IndexSets> stages;
  std::size_t stage_target = 0;
  std::size_t stage_cond = 0;
  std::size_t depth = 0;
};

/// Ascending staged generation order. Stage 0 is unconditional over
/// [0, stage_target); stage k conditions on the stage_cond slices right
/// before its block. The final block is truncated to the remaining slices.
StagingPlan staging_plan(std::size_t depth, std::size_t stage_target, std::size_t stage_cond,
                         std::size_t tau_max);

/// Bundles clean condition slices and noisy targets in ascending index order.
ConditionedInput assemble_subvolume(const std::map<std::size_t, std::vector<double>>& volume_slices,
                                    const IndexSets& sets, const SliceStack& noisy_targets,
                                    std::size_t t);

/// Same, with condition slices drawn from a full D-slice stack.
ConditionedInput assemble_subvolume(const SliceStack& volume, const IndexSets& sets,
                                    const SliceStack& noisy_targets, std::size_t t);

struct Disassembled {
  SliceStack cond;
  SliceStack target;
};

/// Inverse of assemble_subvolume (slices in ascending index order per role).
Disassembled disassemble_subvolume(const ConditionedInput& input);

}  // namespace cdpm
