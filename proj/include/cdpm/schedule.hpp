#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cdpm {

enum class VarianceMode { Beta, BetaTilde };

std::string to_string(VarianceMode mode);
VarianceMode variance_mode_from_string(const std::string& name);

/// Linear beta schedule and the closed-form quantities derived from it.
///
/// Step indices are zero based: t runs over {0, ..., T-1}. Index t here is
/// step t+1 of the usual one-based notation, so t = T-1 is the noisiest
/// state, adjacent to pure noise, and t = 0 is the last reverse step that
/// lands on clean data. alpha_bar(t) is the product of alpha(0..t).
///
/// All arithmetic is double precision regardless of network precision.
/// Immutable after construction.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> beta, VarianceMode mode);

  std::size_t steps() const { return beta_.size(); }
  double beta(std::size_t t) const { return beta_.at(t); }
  double alpha(std::size_t t) const { return alpha_.at(t); }
  double alpha_bar(std::size_t t) const { return alpha_bar_.at(t); }
  const std::vector<double>& betas() const { return beta_; }
  const std::vector<double>& alphas() const { return alpha_; }
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }
  VarianceMode variance_mode() const { return mode_; }

 private:
  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
  VarianceMode mode_;
};

/// Parameters the schedule is rebuilt from (config files, checkpoints).
struct ScheduleParams {
  std::size_t steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  VarianceMode variance_mode = VarianceMode::Beta;
};

NoiseSchedule make_linear_schedule(std::size_t steps, double beta_start, double beta_end,
                                   VarianceMode mode = VarianceMode::Beta);
NoiseSchedule make_schedule(const ScheduleParams& params);

/// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
std::vector<double> forward_sample(std::span<const double> x0, std::size_t t,
                                   std::span<const double> eps, const NoiseSchedule& sched);

/// mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t).
std::vector<double> posterior_mean_from_eps(std::span<const double> x_t,
                                            std::span<const double> eps_hat, std::size_t t,
                                            const NoiseSchedule& sched);

/// beta_t, or (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t with
/// alpha_bar_{-1} = 1 (so zero at t = 0).
double reverse_variance(std::size_t t, const NoiseSchedule& sched);

}  // namespace cdpm
