#include "cdpm/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace cdpm {

std::string to_string(VarianceMode mode) {
  return mode == VarianceMode::Beta ? "beta" : "beta_tilde";
}

VarianceMode variance_mode_from_string(const std::string& name) {
  if (name == "beta") return VarianceMode::Beta;
  if (name == "beta_tilde") return VarianceMode::BetaTilde;
  throw std::invalid_argument("unknown variance_mode '" + name +
                              "' (expected beta or beta_tilde)");
}

NoiseSchedule::NoiseSchedule(std::vector<double> beta, VarianceMode mode)
    : beta_(std::move(beta)), mode_(mode) {
  if (beta_.empty()) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
  alpha_.resize(beta_.size());
  alpha_bar_.resize(beta_.size());
  double running = 1.0;
  for (std::size_t t = 0; t < beta_.size(); ++t) {
    if (!std::isfinite(beta_[t]) || beta_[t] <= 0.0 || beta_[t] >= 1.0)
      throw std::invalid_argument("NoiseSchedule: every beta must lie in (0, 1)");
    alpha_[t] = 1.0 - beta_[t];
    running *= alpha_[t];
    alpha_bar_[t] = running;
  }
}

NoiseSchedule make_linear_schedule(std::size_t steps, double beta_start, double beta_end,
                                   VarianceMode mode) {
  if (steps == 0) throw std::invalid_argument("make_linear_schedule: T must be >= 1");
  if (!std::isfinite(beta_start) || !std::isfinite(beta_end))
    throw std::invalid_argument("make_linear_schedule: non-finite beta endpoint");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument(
        "make_linear_schedule: require 0 < beta_start <= beta_end < 1");
  std::vector<double> beta(steps);
  if (steps == 1) {
    beta[0] = beta_start;
  } else {
    const double span = beta_end - beta_start;
    for (std::size_t t = 0; t < steps; ++t)
      beta[t] = beta_start + span * static_cast<double>(t) / static_cast<double>(steps - 1);
    beta[steps - 1] = beta_end;
  }
  return NoiseSchedule(std::move(beta), mode);
}

NoiseSchedule make_schedule(const ScheduleParams& params) {
  return make_linear_schedule(params.steps, params.beta_start, params.beta_end,
                              params.variance_mode);
}

namespace {

void check_step(std::size_t t, const NoiseSchedule& sched, const char* op) {
  if (t >= sched.steps())
    throw std::out_of_range(std::string(op) + ": step " + std::to_string(t) +
                            " out of range [0, " + std::to_string(sched.steps()) + ")");
}

void check_same_size(std::size_t a, std::size_t b, const char* op) {
  if (a != b)
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a) +
                                " vs " + std::to_string(b) + " elements)");
}

}  // namespace

std::vector<double> forward_sample(std::span<const double> x0, std::size_t t,
                                   std::span<const double> eps, const NoiseSchedule& sched) {
  check_step(t, sched, "forward_sample");
  check_same_size(x0.size(), eps.size(), "forward_sample");
  const double signal = std::sqrt(sched.alpha_bar(t));
  const double noise = std::sqrt(1.0 - sched.alpha_bar(t));
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = signal * x0[i] + noise * eps[i];
  return out;
}

std::vector<double> posterior_mean_from_eps(std::span<const double> x_t,
                                            std::span<const double> eps_hat, std::size_t t,
                                            const NoiseSchedule& sched) {
  check_step(t, sched, "posterior_mean_from_eps");
  check_same_size(x_t.size(), eps_hat.size(), "posterior_mean_from_eps");
  const double eps_coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
  const double sqrt_alpha = std::sqrt(sched.alpha(t));
  std::vector<double> mu(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i)
    mu[i] = (x_t[i] - eps_coef * eps_hat[i]) / sqrt_alpha;
  return mu;
}

double reverse_variance(std::size_t t, const NoiseSchedule& sched) {
  check_step(t, sched, "reverse_variance");
  if (sched.variance_mode() == VarianceMode::Beta) return sched.beta(t);
  const double prev_bar = t == 0 ? 1.0 : sched.alpha_bar(t - 1);
  return (1.0 - prev_bar) / (1.0 - sched.alpha_bar(t)) * sched.beta(t);
}

}  // namespace cdpm
