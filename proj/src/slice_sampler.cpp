#include "cdpm/slice_sampler.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace cdpm {

std::size_t ConditionedInput::num_targets() const {
  return static_cast<std::size_t>(std::count(roles.begin(), roles.end(), SliceRole::Target));
}

std::vector<std::size_t> ConditionedInput::target_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < roles.size(); ++i)
    if (roles[i] == SliceRole::Target) out.push_back(i);
  return out;
}

void validate_index_sets(const IndexSets& sets, std::size_t tau_max) {
  if (sets.target.empty()) throw std::invalid_argument("IndexSets: target set is empty");
  if (sets.cond.size() + sets.target.size() > tau_max)
    throw std::invalid_argument("IndexSets: len(C) + len(P) = " +
                                std::to_string(sets.cond.size() + sets.target.size()) +
                                " exceeds tau_max = " + std::to_string(tau_max));
  auto check_sorted = [&](const std::vector<std::size_t>& v, const char* name) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] >= sets.depth)
        throw std::invalid_argument(std::string("IndexSets: ") + name + " index " +
                                    std::to_string(v[i]) + " outside [0, " +
                                    std::to_string(sets.depth) + ")");
      if (i > 0 && v[i] <= v[i - 1])
        throw std::invalid_argument(std::string("IndexSets: ") + name +
                                    " not strictly ascending");
    }
  };
  check_sorted(sets.cond, "cond");
  check_sorted(sets.target, "target");
  std::vector<std::size_t> both;
  std::set_intersection(sets.cond.begin(), sets.cond.end(), sets.target.begin(),
                        sets.target.end(), std::back_inserter(both));
  if (!both.empty()) throw std::invalid_argument("IndexSets: cond and target overlap");
}

void validate_policy(const SamplerPolicy& policy) {
  if (policy.tau_max < 2) throw std::invalid_argument("SamplerPolicy: tau_max must be >= 2");
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(policy.p_unconditional) || !prob(policy.contiguous_prob))
    throw std::invalid_argument("SamplerPolicy: probabilities must lie in [0, 1]");
}

IndexSets sample_index_sets(const SamplerPolicy& policy, std::size_t depth, Rng& rng) {
  validate_policy(policy);
  if (depth < 2) throw std::invalid_argument("sample_index_sets: depth must be >= 2");

  const auto n = static_cast<std::int64_t>(std::min(policy.tau_max, depth));
  std::int64_t n_target = 0;
  std::int64_t n_cond = 0;
  if (rng.bernoulli(policy.p_unconditional)) {
    n_target = rng.uniform_int(1, n);
  } else {
    n_target = rng.uniform_int(1, n - 1);
    n_cond = rng.uniform_int(1, n - n_target);
  }
  const std::int64_t total = n_target + n_cond;
  const auto d = static_cast<std::int64_t>(depth);

  IndexSets sets;
  sets.depth = depth;
  if (rng.bernoulli(policy.contiguous_prob)) {
    const std::int64_t start = rng.uniform_int(0, d - total);
    const bool cond_first = rng.bernoulli(0.5);
    const std::int64_t target_start = cond_first ? start + n_cond : start;
    const std::int64_t cond_start = cond_first ? start : start + n_target;
    for (std::int64_t i = 0; i < n_target; ++i)
      sets.target.push_back(static_cast<std::size_t>(target_start + i));
    for (std::int64_t i = 0; i < n_cond; ++i)
      sets.cond.push_back(static_cast<std::size_t>(cond_start + i));
  } else {
    // Partial Fisher-Yates: the first `total` entries are a uniform subset in
    // uniform order, so the first n_cond of them form a uniform condition set.
    std::vector<std::size_t> pool(depth);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::int64_t i = 0; i < total; ++i) {
      const auto j = rng.uniform_int(i, d - 1);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    sets.cond.assign(pool.begin(), pool.begin() + n_cond);
    sets.target.assign(pool.begin() + n_cond, pool.begin() + total);
    std::sort(sets.cond.begin(), sets.cond.end());
    std::sort(sets.target.begin(), sets.target.end());
  }
  return sets;
}

StagingPlan staging_plan(std::size_t depth, std::size_t stage_target, std::size_t stage_cond,
                         std::size_t tau_max) {
  if (stage_target == 0) throw std::invalid_argument("staging_plan: stage_target must be >= 1");
  if (depth == 0) throw std::invalid_argument("staging_plan: depth must be >= 1");
  if (stage_target + stage_cond > tau_max)
    throw std::invalid_argument("staging_plan: stage_target + stage_cond = " +
                                std::to_string(stage_target + stage_cond) +
                                " exceeds tau_max = " + std::to_string(tau_max));
  StagingPlan plan;
  plan.stage_target = stage_target;
  plan.stage_cond = stage_cond;
  plan.depth = depth;
  for (std::size_t start = 0; start < depth; start += stage_target) {
    IndexSets sets;
    sets.depth = depth;
    if (start > 0) {
      const std::size_t cond_start = start > stage_cond ? start - stage_cond : 0;
      for (std::size_t i = cond_start; i < start; ++i) sets.cond.push_back(i);
    }
    const std::size_t end = std::min(start + stage_target, depth);
    for (std::size_t i = start; i < end; ++i) sets.target.push_back(i);
    plan.stages.push_back(std::move(sets));
  }
  return plan;
}

namespace {

template <typename CondLookup>
ConditionedInput assemble(CondLookup&& lookup, const IndexSets& sets,
                          const SliceStack& noisy_targets, std::size_t t) {
  if (noisy_targets.count != sets.target.size())
    throw std::invalid_argument("assemble_subvolume: " + std::to_string(noisy_targets.count) +
                                " noisy slices for " + std::to_string(sets.target.size()) +
                                " targets");
  const std::size_t k = sets.cond.size() + sets.target.size();
  ConditionedInput in;
  in.t = t;
  in.slices = SliceStack(k, noisy_targets.height, noisy_targets.width);
  std::size_t ic = 0;
  std::size_t ip = 0;
  for (std::size_t pos = 0; pos < k; ++pos) {
    const bool take_cond =
        ip == sets.target.size() || (ic < sets.cond.size() && sets.cond[ic] < sets.target[ip]);
    std::span<const double> src;
    if (take_cond) {
      src = lookup(sets.cond[ic]);
      if (src.size() != in.slices.slice_size())
        throw std::invalid_argument("assemble_subvolume: condition slice " +
                                    std::to_string(sets.cond[ic]) + " has wrong size");
      in.roles.push_back(SliceRole::Condition);
      in.indices.push_back(sets.cond[ic++]);
    } else {
      src = noisy_targets.slice(ip);
      in.roles.push_back(SliceRole::Target);
      in.indices.push_back(sets.target[ip++]);
    }
    std::copy(src.begin(), src.end(), in.slices.slice(pos).begin());
  }
  return in;
}

}  // namespace

ConditionedInput assemble_subvolume(const std::map<std::size_t, std::vector<double>>& volume_slices,
                                    const IndexSets& sets, const SliceStack& noisy_targets,
                                    std::size_t t) {
  return assemble(
      [&](std::size_t index) -> std::span<const double> {
        auto it = volume_slices.find(index);
        if (it == volume_slices.end())
          throw std::invalid_argument("assemble_subvolume: missing condition slice " +
                                      std::to_string(index));
        return it->second;
      },
      sets, noisy_targets, t);
}

ConditionedInput assemble_subvolume(const SliceStack& volume, const IndexSets& sets,
                                    const SliceStack& noisy_targets, std::size_t t) {
  return assemble(
      [&](std::size_t index) -> std::span<const double> {
        if (index >= volume.count)
          throw std::invalid_argument("assemble_subvolume: missing condition slice " +
                                      std::to_string(index));
        return volume.slice(index);
      },
      sets, noisy_targets, t);
}

Disassembled disassemble_subvolume(const ConditionedInput& input) {
  const std::size_t n_target = input.num_targets();
  const std::size_t h = input.slices.height;
  const std::size_t w = input.slices.width;
  Disassembled out{SliceStack(input.roles.size() - n_target, h, w), SliceStack(n_target, h, w)};
  std::size_t ic = 0;
  std::size_t ip = 0;
  for (std::size_t pos = 0; pos < input.roles.size(); ++pos) {
    auto src = input.slices.slice(pos);
    auto dst = input.roles[pos] == SliceRole::Condition ? out.cond.slice(ic++)
                                                         : out.target.slice(ip++);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return out;
}

}  // namespace cdpm
