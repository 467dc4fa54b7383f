#include "cdpm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cdpm {

std::string to_string(ClipMode mode) { return mode == ClipMode::Final ? "final" : "xstart"; }

ClipMode clip_mode_from_string(const std::string& name) {
  if (name == "final") return ClipMode::Final;
  if (name == "xstart") return ClipMode::XStart;
  throw std::invalid_argument("unknown clip mode '" + name + "' (expected final or xstart)");
}

SliceStack reverse_step(const DenoiserParams& params, const ConditionedInput& input,
                        const NoiseSchedule& sched, Rng& rng, ClipMode clip) {
  const std::size_t t = input.t;
  if (t >= sched.steps())
    throw std::out_of_range("reverse_step: step " + std::to_string(t) + " out of range");
  const SliceStack eps = predict_eps(params, input);
  const auto positions = input.target_positions();
  SliceStack x_t(positions.size(), input.slices.height, input.slices.width);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    auto src = input.slices.slice(positions[i]);
    std::copy(src.begin(), src.end(), x_t.slice(i).begin());
  }

  std::vector<double> mu;
  if (clip == ClipMode::Final) {
    mu = posterior_mean_from_eps(x_t.data, eps.data, t, sched);
  } else {
    // Clamp the implied x0 and use the q(x_{t-1} | x_t, x0) mean.
    const double ab = sched.alpha_bar(t);
    const double ab_prev = t == 0 ? 1.0 : sched.alpha_bar(t - 1);
    const double c0 = sched.beta(t) * std::sqrt(ab_prev) / (1.0 - ab);
    const double ct = (1.0 - ab_prev) * std::sqrt(sched.alpha(t)) / (1.0 - ab);
    mu.resize(x_t.data.size());
    for (std::size_t i = 0; i < mu.size(); ++i) {
      const double x0 =
          std::clamp((x_t.data[i] - std::sqrt(1.0 - ab) * eps.data[i]) / std::sqrt(ab), 0.0, 1.0);
      mu[i] = c0 * x0 + ct * x_t.data[i];
    }
  }

  SliceStack out(x_t.count, x_t.height, x_t.width);
  if (t == 0) {
    out.data = std::move(mu);
    return out;
  }
  const double sigma = std::sqrt(reverse_variance(t, sched));
  for (std::size_t i = 0; i < mu.size(); ++i) out.data[i] = mu[i] + sigma * rng.normal();
  return out;
}

SliceStack generate_target(const DenoiserParams& params, const SliceStack& cond_slices,
                           const IndexSets& sets, const NoiseSchedule& sched, Rng& rng,
                           ClipMode clip, const StepObserver& observer) {
  validate_index_sets(sets, params.config().max_slices);
  if (cond_slices.count != sets.cond.size())
    throw std::invalid_argument("generate_target: " + std::to_string(cond_slices.count) +
                                " condition slices for " + std::to_string(sets.cond.size()) +
                                " condition indices");
  std::map<std::size_t, std::vector<double>> cond;
  for (std::size_t i = 0; i < sets.cond.size(); ++i) {
    auto s = cond_slices.slice(i);
    cond.emplace(sets.cond[i], std::vector<double>(s.begin(), s.end()));
  }

  SliceStack x(sets.target.size(), cond_slices.height, cond_slices.width);
  for (double& v : x.data) v = rng.normal();
  for (std::size_t t = sched.steps(); t-- > 0;) {
    const ConditionedInput input = assemble_subvolume(cond, sets, x, t);
    if (observer) observer(input);
    x = reverse_step(params, input, sched, rng, clip);
  }
  for (double v : x.data)
    if (!std::isfinite(v)) throw std::runtime_error("generate_target: non-finite output");
  for (double& v : x.data) v = std::clamp(v, 0.0, 1.0);
  return x;
}

Volume generate_volume(const DenoiserParams& params, const StagingPlan& plan, std::size_t height,
                       std::size_t width, const NoiseSchedule& sched, Rng& rng, ClipMode clip,
                       const StageObserver& observer) {
  if (plan.depth > params.config().max_depth)
    throw std::invalid_argument("generate_volume: plan depth " + std::to_string(plan.depth) +
                                " exceeds model max_depth " +
                                std::to_string(params.config().max_depth));
  if (plan.stage_target + plan.stage_cond > params.config().max_slices)
    throw std::invalid_argument("generate_volume: plan exceeds the model's tau_max");
  SliceStack volume(plan.depth, height, width);
  std::vector<bool> done(plan.depth, false);
  for (std::size_t k = 0; k < plan.stages.size(); ++k) {
    const IndexSets& sets = plan.stages[k];
    SliceStack cond(sets.cond.size(), height, width);
    for (std::size_t i = 0; i < sets.cond.size(); ++i) {
      if (!done[sets.cond[i]])
        throw std::invalid_argument("generate_volume: stage " + std::to_string(k) +
                                    " conditions on slice " + std::to_string(sets.cond[i]) +
                                    " before it was generated");
      auto s = volume.slice(sets.cond[i]);
      std::copy(s.begin(), s.end(), cond.slice(i).begin());
    }
    const SliceStack out = generate_target(params, cond, sets, sched, rng, clip);
    for (std::size_t i = 0; i < sets.target.size(); ++i) {
      auto s = out.slice(i);
      std::copy(s.begin(), s.end(), volume.slice(sets.target[i]).begin());
      done[sets.target[i]] = true;
    }
    if (observer) observer(k, sets, out);
  }
  if (std::find(done.begin(), done.end(), false) != done.end())
    throw std::invalid_argument("generate_volume: plan does not cover every slice");
  return from_slices(volume);
}

}  // namespace cdpm
