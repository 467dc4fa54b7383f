#include "cdpm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cdpm/config.hpp"
#include "cdpm/io.hpp"

namespace cdpm {

ModelMeta TrainConfig::model_meta(std::uint64_t step) const {
  return ModelMeta{denoiser, schedule, policy, slice_axis, step, Dims{}};
}

void validate_train_config(const TrainConfig& c) {
  if (c.batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate))
    throw std::invalid_argument("TrainConfig: learning_rate must be positive");
  if (c.weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (c.grad_clip && !(*c.grad_clip > 0.0))
    throw std::invalid_argument("TrainConfig: grad_clip must be positive");
  validate_policy(c.policy);
  validate_denoiser_config(c.denoiser);
  if (c.denoiser.max_slices < c.policy.tau_max)
    throw std::invalid_argument("TrainConfig: denoiser.max_slices must be >= policy.tau_max");
  make_schedule(c.schedule);
}

LossDraw draw_loss_example(const SliceStack& volume, const NoiseSchedule& sched,
                           const SamplerPolicy& policy, Rng& rng) {
  LossDraw d;
  d.sets = sample_index_sets(policy, volume.count, rng);
  d.t = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(sched.steps()) - 1));
  d.eps = SliceStack(d.sets.target.size(), volume.height, volume.width);
  for (double& e : d.eps.data) e = rng.normal();
  SliceStack noisy(d.sets.target.size(), volume.height, volume.width);
  for (std::size_t i = 0; i < d.sets.target.size(); ++i) {
    const auto xt = forward_sample(volume.slice(d.sets.target[i]), d.t, d.eps.slice(i), sched);
    std::copy(xt.begin(), xt.end(), noisy.slice(i).begin());
  }
  d.input = assemble_subvolume(volume, d.sets, noisy, d.t);
  return d;
}

double mean_squared_error(const SliceStack& eps, const SliceStack& prediction) {
  if (eps.data.size() != prediction.data.size() || eps.data.empty())
    throw std::invalid_argument("mean_squared_error: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < eps.data.size(); ++i) {
    const double d = eps.data[i] - prediction.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(eps.data.size());
}

LossResult loss_for_draw(const DenoiserParams& params, const LossDraw& draw) {
  LossResult r;
  r.grads = zero_grads(params);
  nn::Graph g(true);
  const auto pred = build_denoiser(g, params, draw.input, &r.grads);
  const auto loss = nn::ops::mse(g, pred, draw.eps.data);
  g.backward(loss);
  r.loss = g.value(loss)[0];
  r.len_c = draw.sets.cond.size();
  r.len_p = draw.sets.target.size();
  r.t = draw.t;
  return r;
}

LossResult diffusion_loss(const DenoiserParams& params, const SliceStack& volume,
                          const NoiseSchedule& sched, const SamplerPolicy& policy, Rng& rng) {
  return loss_for_draw(params, draw_loss_example(volume, sched, policy, rng));
}

void adamw_update(DenoiserParams& params, const ParamGrads& grads, AdamWMoments& mom,
                  const AdamWSettings& s) {
  auto& tensors = params.tensors();
  if (grads.size() != tensors.size())
    throw std::invalid_argument("adamw_update: gradient count does not match parameters");
  if (mom.m.empty()) {
    mom.m = zero_grads(params);
    mom.v = zero_grads(params);
  }
  ++mom.step;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(mom.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(mom.step));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& p = tensors[i].data;
    const auto& g = grads[i];
    auto& m = mom.m[i];
    auto& v = mom.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
      v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      p[k] -= s.learning_rate * (m_hat / (std::sqrt(v_hat) + s.eps) + s.weight_decay * p[k]);
    }
  }
}

double clip_grad_norm(ParamGrads& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g) v *= scale;
  }
  return norm;
}

namespace {

std::vector<SliceStack> prepare_dataset(std::vector<Volume> dataset, const TrainConfig& config) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  const Dims dims = dataset.front().dims();
  for (const auto& v : dataset) {
    if (!(v.dims() == dims)) throw std::invalid_argument("train: volumes differ in dimensions");
    for (float x : v.voxels())
      if (!(x >= 0.0f && x <= 1.0f))
        throw std::invalid_argument("train: voxel intensities must lie in [0, 1] (normalize first)");
  }
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  for (std::size_t i = 0; i < dataset.size(); ++i) order.emplace_back(volume_digest(dataset[i]), i);
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<SliceStack> out;
  for (const auto& [digest, i] : order) out.push_back(to_slices(reorient(dataset[i], config.slice_axis)));

  const SliceStack& first = out.front();
  const std::size_t mult = config.denoiser.spatial_multiple();
  if (first.height % mult != 0 || first.width % mult != 0)
    throw std::invalid_argument("train: slice size " + std::to_string(first.height) + "x" +
                                std::to_string(first.width) + " not divisible by " +
                                std::to_string(mult));
  if (first.count > config.denoiser.max_depth)
    throw std::invalid_argument("train: volume depth exceeds denoiser.max_depth");
  if (first.count < 2) throw std::invalid_argument("train: volumes need at least 2 slices");
  return out;
}

}  // namespace

Trainer::Trainer(TrainConfig config, std::vector<Volume> dataset)
    : config_(std::move(config)),
      schedule_(make_schedule(config_.schedule)),
      data_(prepare_dataset(std::move(dataset), config_)) {
  validate_train_config(config_);
  state_.params = init_denoiser(config_.denoiser, Rng::derive_seed(config_.seed, "init"));
  state_.rng = Rng::substream(config_.seed, "train");
}

Trainer::Trainer(TrainConfig config, std::vector<Volume> dataset, TrainState resume_from)
    : config_(std::move(config)),
      schedule_(make_schedule(config_.schedule)),
      data_(prepare_dataset(std::move(dataset), config_)),
      state_(std::move(resume_from)) {
  validate_train_config(config_);
  if (!(state_.params.config() == config_.denoiser))
    throw std::invalid_argument("Trainer: resume state was produced by a different architecture");
}

void Trainer::step() {
  ParamGrads total = zero_grads(state_.params);
  const std::uint64_t step_no = state_.moments.step + 1;
  double batch_loss = 0.0;
  const double inv_b = 1.0 / static_cast<double>(config_.batch_size);
  for (std::size_t b = 0; b < config_.batch_size; ++b) {
    const auto vi = static_cast<std::size_t>(
        state_.rng.uniform_int(0, static_cast<std::int64_t>(data_.size()) - 1));
    LossResult r = diffusion_loss(state_.params, data_[vi], schedule_, config_.policy, state_.rng);
    if (!std::isfinite(r.loss)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step_no << " (t=" << r.t << ", len_c=" << r.len_c
          << ", len_p=" << r.len_p << ")";
      throw std::runtime_error(msg.str());
    }
    log_.push_back({step_no, r.loss, r.len_c, r.len_p, r.t});
    batch_loss += r.loss * inv_b;
    for (std::size_t i = 0; i < total.size(); ++i)
      for (std::size_t k = 0; k < total[i].size(); ++k) total[i][k] += r.grads[i][k] * inv_b;
  }
  if (config_.grad_clip) clip_grad_norm(total, *config_.grad_clip);
  const AdamWSettings settings{config_.learning_rate, config_.adam_beta1, config_.adam_beta2,
                               config_.adam_eps, config_.weight_decay};
  adamw_update(state_.params, total, state_.moments, settings);
  state_.loss_ema = state_.loss_count == 0 ? batch_loss : 0.99 * state_.loss_ema + 0.01 * batch_loss;
  ++state_.loss_count;
}

ModelMeta Trainer::meta() const {
  ModelMeta m = config_.model_meta(steps_done());
  m.volume_dims = {data_.front().count, data_.front().height, data_.front().width};
  return m;
}

std::string loss_log_csv(const std::vector<LossRecord>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "step,loss,len_c,len_p,t\n";
  for (const auto& r : log) os << r.step << ',' << r.loss << ',' << r.len_c << ',' << r.len_p << ',' << r.t << '\n';
  return os.str();
}

namespace {
constexpr char kStateMagic[4] = {'C', 'D', 'P', 'S'};
constexpr std::uint32_t kStateVersion = 1;

Json train_config_json(const TrainConfig& c) {
  Json j{{"iterations", c.iterations},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"weight_decay", c.weight_decay},
         {"checkpoint_every", c.checkpoint_every},
         {"seed", c.seed},
         {"adam_beta1", c.adam_beta1},
         {"adam_beta2", c.adam_beta2},
         {"adam_eps", c.adam_eps},
         {"slice_axis", to_string(c.slice_axis)},
         {"schedule", to_json(c.schedule)},
         {"policy", to_json(c.policy)},
         {"denoiser", to_json(c.denoiser)}};
  j["grad_clip"] = c.grad_clip ? Json(*c.grad_clip) : Json(nullptr);
  return j;
}
}  // namespace

std::vector<unsigned char> encode_train_state(const TrainState& state, const TrainConfig& config) {
  ByteWriter w;
  w.bytes(kStateMagic, 4);
  w.u32(kStateVersion);
  const Json header{{"config", train_config_json(config)},
                    {"step", state.moments.step},
                    {"rng", state.rng.serialize()},
                    {"loss_ema", state.loss_ema},
                    {"loss_count", state.loss_count}};
  const std::string text = header.dump();
  w.u64(text.size());
  w.str(text);
  const auto& tensors = state.params.tensors();
  w.u64(tensors.size());
  const bool has_moments = !state.moments.m.empty();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& t = tensors[i];
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.u64(d);
    for (double v : t.data) w.f64(v);
    for (std::size_t k = 0; k < t.data.size(); ++k) w.f64(has_moments ? state.moments.m[i][k] : 0.0);
    for (std::size_t k = 0; k < t.data.size(); ++k) w.f64(has_moments ? state.moments.v[i][k] : 0.0);
  }
  return w.take();
}

TrainState decode_train_state(const std::vector<unsigned char>& bytes, TrainConfig* config_out) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kStateMagic, 4) != 0) throw FormatError("bad magic (expected CDPS)");
  if (r.u32() != kStateVersion) throw FormatError("unsupported train state version");
  const std::uint64_t len = r.u64();
  if (len > r.remaining()) throw FormatError("truncated payload");
  Json header;
  try {
    header = Json::parse(r.str(len));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed state header: ") + e.what());
  }
  const TrainConfig config = train_config_from_json(header.at("config"));
  if (config_out) *config_out = config;

  TrainState st;
  st.rng = Rng::deserialize(header.at("rng").get<std::string>());
  st.loss_ema = header.at("loss_ema").get<double>();
  st.loss_count = header.at("loss_count").get<std::uint64_t>();
  st.moments.step = header.at("step").get<std::uint64_t>();
  const std::uint64_t n = r.u64();
  std::vector<ParamTensor> tensors;
  for (std::uint64_t i = 0; i < n; ++i) {
    ParamTensor t;
    t.name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("implausible tensor rank");
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.u64());
    const std::size_t count = nn::numel(t.shape);
    if (count > r.remaining() / 24) throw FormatError("truncated payload");
    t.data.resize(count);
    std::vector<double> m(count), v(count);
    for (double& x : t.data) x = r.f64();
    for (double& x : m) x = r.f64();
    for (double& x : v) x = r.f64();
    st.moments.m.push_back(std::move(m));
    st.moments.v.push_back(std::move(v));
    tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after payload");
  st.params = DenoiserParams(config.denoiser, std::move(tensors));
  if (st.moments.step == 0) {
    st.moments.m.clear();
    st.moments.v.clear();
  }
  return st;
}

TrainResult train(const TrainConfig& config, const std::vector<Volume>& dataset,
                  const std::optional<std::filesystem::path>& out_dir,
                  std::optional<TrainState> resume_from) {
  Trainer trainer = resume_from ? Trainer(config, dataset, std::move(*resume_from))
                                : Trainer(config, dataset);
  if (out_dir) std::filesystem::create_directories(*out_dir);
  while (trainer.steps_done() < config.iterations) {
    trainer.step();
    if (out_dir && config.checkpoint_every > 0 &&
        trainer.steps_done() % config.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%06llu.cdpm",
                    static_cast<unsigned long long>(trainer.steps_done()));
      save_checkpoint(*out_dir / name, trainer.meta(), trainer.state().params);
    }
  }
  if (out_dir) {
    save_checkpoint(*out_dir / "model.cdpm", trainer.meta(), trainer.state().params);
    write_file_atomic(*out_dir / "train.state", encode_train_state(trainer.state(), config));
    const std::string csv = loss_log_csv(trainer.log());
    write_file_atomic(*out_dir / "loss.csv", std::vector<unsigned char>(csv.begin(), csv.end()));
  }
  return TrainResult{trainer.state().params, trainer.log()};
}

TrainConfig train_config_from_json(const Json& j) {
  const std::string w = "train";
  reject_unknown_keys(j,
                      {"iterations", "batch_size", "learning_rate", "weight_decay", "grad_clip",
                       "checkpoint_every", "seed", "adam_beta1", "adam_beta2", "adam_eps",
                       "slice_axis", "schedule", "policy", "denoiser"},
                      w);
  TrainConfig c;
  try {
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("grad_clip") && !j.at("grad_clip").is_null())
      c.grad_clip = j.at("grad_clip").get<double>();
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.seed = j.value("seed", c.seed);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.slice_axis = axis_from_string(j.value("slice_axis", std::string("axial")));
  } catch (const Json::exception& e) {
    throw ConfigError(w + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(w + ": " + e.what());
  }
  if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"));
  if (j.contains("policy")) c.policy = policy_from_json(j.at("policy"));
  if (j.contains("denoiser")) c.denoiser = denoiser_from_json(j.at("denoiser"));
  try {
    validate_train_config(c);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

Json to_json(const TrainConfig& c) { return train_config_json(c); }

}  // namespace cdpm
