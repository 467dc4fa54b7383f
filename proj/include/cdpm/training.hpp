#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cdpm/checkpoint.hpp"
#include "cdpm/config.hpp"
#include "cdpm/denoiser.hpp"
#include "cdpm/rng.hpp"
#include "cdpm/schedule.hpp"
#include "cdpm/slice_sampler.hpp"
#include "cdpm/volume.hpp"

namespace cdpm {

struct TrainConfig {
  std::size_t iterations = 1000;
  std::size_t batch_size = 3;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  std::optional<double> grad_clip;  // global L2 norm
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Axis slice_axis = Axis::Axial;
  ScheduleParams schedule;
  SamplerPolicy policy;
  DenoiserConfig denoiser;

  ModelMeta model_meta(std::uint64_t step) const;
};

void validate_train_config(const TrainConfig& config);

/// One sampled training example: index sets, step, noise, and the bundle
/// built from them. Draw order on the rng: index sets, then t uniform on
/// [0, T), then the target noise element by element (slice-major).
struct LossDraw {
  IndexSets sets;
  std::size_t t = 0;
  SliceStack eps;
  ConditionedInput input;
};

LossDraw draw_loss_example(const SliceStack& volume, const NoiseSchedule& sched,
                           const SamplerPolicy& policy, Rng& rng);

/// Mean over elements of (eps - prediction)^2.
double mean_squared_error(const SliceStack& eps, const SliceStack& prediction);

struct LossResult {
  double loss = 0.0;
  ParamGrads grads;
  std::size_t len_c = 0;
  std::size_t len_p = 0;
  std::size_t t = 0;
};

/// Noise-prediction loss over the target slices of one randomly drawn
/// example, with its parameter gradients.
LossResult diffusion_loss(const DenoiserParams& params, const SliceStack& volume,
                          const NoiseSchedule& sched, const SamplerPolicy& policy, Rng& rng);

/// Loss and gradients for an already drawn example.
LossResult loss_for_draw(const DenoiserParams& params, const LossDraw& draw);

/// Decoupled-weight-decay Adam. Every tensor is decayed.
struct AdamWSettings {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamWMoments {
  ParamGrads m;
  ParamGrads v;
  std::uint64_t step = 0;
};

void adamw_update(DenoiserParams& params, const ParamGrads& grads, AdamWMoments& moments,
                  const AdamWSettings& settings);

/// Scales grads in place so the global L2 norm is at most max_norm;
/// returns the norm before clipping.
double clip_grad_norm(ParamGrads& grads, double max_norm);

struct LossRecord {
  std::uint64_t step = 0;
  double loss = 0.0;
  std::size_t len_c = 0;
  std::size_t len_p = 0;
  std::size_t t = 0;
};

struct TrainState {
  DenoiserParams params;
  AdamWMoments moments;
  Rng rng;
  double loss_ema = 0.0;
  std::uint64_t loss_count = 0;
};

/// CDPS container, f64 throughout so a resumed run continues bit-exactly:
///   "CDPS" | u32 version | u64 n | n bytes of JSON (config, step, rng,
///   loss stats) | u64 tensor count | per tensor: u32 name length, name,
///   u32 rank, rank x u64 dims, then f64 params, f64 m, f64 v.
std::vector<unsigned char> encode_train_state(const TrainState& state, const TrainConfig& config);
TrainState decode_train_state(const std::vector<unsigned char>& bytes, TrainConfig* config = nullptr);

/// Drives optimization over a fixed dataset.
///
/// The dataset is put in a canonical order (by content digest) and
/// reoriented to the configured slice axis, so the run does not depend on
/// the order volumes were listed in. Each step draws, per batch element, a
/// volume index uniformly, then one (C, P, t, eps) example; the batch
/// loss is the mean of per-example losses.
class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<Volume> dataset);
  Trainer(TrainConfig config, std::vector<Volume> dataset, TrainState resume_from);

  /// One optimization step. Throws std::runtime_error on a non-finite loss.
  void step();
  std::uint64_t steps_done() const { return state_.moments.step; }

  const TrainState& state() const { return state_; }
  const TrainConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const std::vector<LossRecord>& log() const { return log_; }
  ModelMeta meta() const;

 private:
  TrainConfig config_;
  NoiseSchedule schedule_;
  std::vector<SliceStack> data_;
  TrainState state_;
  std::vector<LossRecord> log_;
};

/// Writes "step,loss,len_c,len_p,t" rows, one per batch element.
std::string loss_log_csv(const std::vector<LossRecord>& log);

struct TrainResult {
  DenoiserParams params;
  std::vector<LossRecord> log;
};

/// Runs to config.iterations. With `out_dir`, writes checkpoint_<step>.cdpm
/// every checkpoint_every steps, then model.cdpm, loss.csv and train.state.
TrainResult train(const TrainConfig& config, const std::vector<Volume>& dataset,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  std::optional<TrainState> resume_from = std::nullopt);

/// Training section of a run config; unknown keys are rejected.
TrainConfig train_config_from_json(const Json& j);
Json to_json(const TrainConfig& config);

}  // namespace cdpm
