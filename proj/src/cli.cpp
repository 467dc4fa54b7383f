#include "cdpm/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cdpm/checkpoint.hpp"
#include "cdpm/config.hpp"
#include "cdpm/io.hpp"
#include "cdpm/metrics.hpp"
#include "cdpm/phantom.hpp"
#include "cdpm/png.hpp"
#include "cdpm/sampler.hpp"
#include "cdpm/training.hpp"

namespace cdpm::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SampleSection {
  std::string checkpoint;
  std::size_t count = 1;
  std::size_t stage_target = 10;
  std::size_t stage_cond = 10;
  ClipMode clip = ClipMode::Final;
  bool png = false;
  std::size_t png_every = 1;
};

struct EvalSection {
  std::string synth_dir;
  std::string real_dir;
  std::string features_dir;
  MetricConfig metrics;
};

// Run config: one file shared by all subcommands; each reads its section.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string data_dir;
  std::size_t phantom_count = 16;
  PhantomSpec phantom;
  TrainConfig train;
  SampleSection sample;
  EvalSection eval;
};

std::string indexed_name(const char* stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%03zu%s", stem, i, ext);
  return buf;
}

Json sample_json(const SampleSection& s) {
  return {{"checkpoint", s.checkpoint}, {"count", s.count},       {"stage_target", s.stage_target},
          {"stage_cond", s.stage_cond}, {"clip_mode", to_string(s.clip)}, {"png", s.png},
          {"png_every", s.png_every}};
}

Json eval_json(const EvalSection& e) {
  return {{"synth_dir", e.synth_dir},
          {"real_dir", e.real_dir},
          {"features_dir", e.features_dir},
          {"metrics", to_json(e.metrics)}};
}

Json phantom_json(const RunConfig& c) {
  Json spec = to_json(c.phantom);
  spec.erase("seed");
  return {{"count", c.phantom_count}, {"spec", spec}};
}

Json to_json(const RunConfig& c) {
  Json train = cdpm::to_json(c.train);
  train.erase("seed");
  return {{"seed", c.seed},
          {"data_dir", c.data_dir},
          {"phantom", phantom_json(c)},
          {"train", train},
          {"sample", sample_json(c.sample)},
          {"eval", eval_json(c.eval)}};
}

RunConfig run_config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("run config: expected a JSON object");
  reject_unknown_keys(j, {"seed", "data_dir", "phantom", "train", "sample", "eval"}, "run config");
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.data_dir = j.value("data_dir", c.data_dir);
    if (j.contains("phantom")) {
      const Json& p = j.at("phantom");
      reject_unknown_keys(p, {"count", "spec"}, "phantom");
      c.phantom_count = p.value("count", c.phantom_count);
      if (p.contains("spec")) {
        if (p.at("spec").contains("seed"))
          throw ConfigError("phantom.spec.seed: per-volume seeds derive from the root seed; remove this key");
        c.phantom = phantom_from_json(p.at("spec"));
      }
    }
    if (j.contains("train")) {
      if (j.at("train").contains("seed"))
        throw ConfigError("train.seed: the training seed is the root seed; remove this key");
      c.train = train_config_from_json(j.at("train"));
    }
    if (j.contains("sample")) {
      const Json& s = j.at("sample");
      reject_unknown_keys(s, {"checkpoint", "count", "stage_target", "stage_cond", "clip_mode", "png", "png_every"},
                          "sample");
      c.sample.checkpoint = s.value("checkpoint", c.sample.checkpoint);
      c.sample.count = s.value("count", c.sample.count);
      c.sample.stage_target = s.value("stage_target", c.sample.stage_target);
      c.sample.stage_cond = s.value("stage_cond", c.sample.stage_cond);
      c.sample.clip = clip_mode_from_string(s.value("clip_mode", to_string(c.sample.clip)));
      c.sample.png = s.value("png", c.sample.png);
      c.sample.png_every = s.value("png_every", c.sample.png_every);
    }
    if (j.contains("eval")) {
      const Json& e = j.at("eval");
      reject_unknown_keys(e, {"synth_dir", "real_dir", "features_dir", "metrics"}, "eval");
      c.eval.synth_dir = e.value("synth_dir", c.eval.synth_dir);
      c.eval.real_dir = e.value("real_dir", c.eval.real_dir);
      c.eval.features_dir = e.value("features_dir", c.eval.features_dir);
      if (e.contains("metrics")) c.eval.metrics = metric_config_from_json(e.at("metrics"));
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

PhantomSpec load_phantom_spec(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("phantom spec '" + path + "' does not exist");
  const Json j = parse_json_file(path);
  if (j.contains("seed")) throw ConfigError("phantom spec: per-volume seeds derive from the root seed; remove 'seed'");
  try {
    return phantom_from_json(j);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("phantom spec: ") + e.what());
  }
}

RunConfig load_run_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  if (!fs::exists(path)) throw UsageError("config file '" + path + "' does not exist");
  return run_config_from_json(parse_json_file(path));
}

void echo_config(const RunConfig& c, const fs::path& path) { write_file_atomic(path, canonical_dump(to_json(c))); }

std::vector<Volume> load_dir_checked(const std::string& dir, const char* what) {
  if (dir.empty()) throw UsageError(std::string("no ") + what + " directory given");
  if (!fs::is_directory(dir)) throw UsageError(std::string(what) + " directory '" + dir + "' does not exist");
  auto volumes = load_volume_dir(dir);
  if (volumes.empty()) throw UsageError(std::string(what) + " directory '" + dir + "' contains no .vol files");
  return volumes;
}

int cmd_phantom(RunConfig c, const fs::path& out, bool png, std::ostream& os) {
  validate_phantom_spec(c.phantom);
  fs::create_directories(out);
  const std::uint64_t data_seed = Rng::derive_seed(c.seed, "data");
  for (std::size_t i = 0; i < c.phantom_count; ++i) {
    PhantomSpec spec = c.phantom;
    spec.seed = Rng::derive_seed(data_seed, "phantom/" + std::to_string(i));
    const Volume v = generate_phantom(spec);
    save_volume(v, out / indexed_name("phantom", i, ".vol"));
    if (png) export_slice_montage(v, Axis::Axial, out / indexed_name("phantom", i, ".png"));
  }
  echo_config(c, out / "resolved.json");
  os << "wrote " << c.phantom_count << " phantoms to " << out.string() << "\n";
  return 0;
}

int cmd_train(RunConfig c, const fs::path& out, const std::string& resume, std::ostream& os) {
  c.train.seed = c.seed;
  validate_train_config(c.train);
  auto data = load_dir_checked(c.data_dir, "data");
  std::optional<TrainState> state;
  if (!resume.empty()) {
    if (!fs::exists(resume)) throw UsageError("resume state '" + resume + "' does not exist");
    TrainConfig saved;
    state = decode_train_state(read_file(resume), &saved);
    if (!(saved.denoiser == c.train.denoiser)) throw UsageError("resume state uses a different denoiser config");
  }
  fs::create_directories(out);
  echo_config(c, out / "resolved.json");
  const auto result = train(c.train, data, out, std::move(state));
  os << "trained " << c.train.iterations << " steps on " << data.size() << " volumes; "
     << result.log.size() << " loss rows; model at " << (out / "model.cdpm").string() << "\n";
  return 0;
}

int cmd_sample(RunConfig c, const fs::path& out, std::ostream& os) {
  const SampleSection& s = c.sample;
  if (s.checkpoint.empty()) throw UsageError("no checkpoint given (--checkpoint)");
  if (!fs::exists(s.checkpoint)) throw UsageError("checkpoint '" + s.checkpoint + "' does not exist");
  if (s.png_every == 0) throw UsageError("png_every must be >= 1");
  const Checkpoint ck = load_checkpoint(s.checkpoint);
  const Dims d = ck.meta.volume_dims;
  if (d.depth == 0 || d.height == 0 || d.width == 0)
    throw UsageError("checkpoint has no recorded volume dimensions");
  const NoiseSchedule sched = make_schedule(ck.meta.schedule);
  const StagingPlan plan = staging_plan(d.depth, s.stage_target, s.stage_cond, ck.meta.policy.tau_max);
  fs::create_directories(out);
  echo_config(c, out / "resolved.json");
  const std::uint64_t sample_seed = Rng::derive_seed(c.seed, "sample");
  for (std::size_t i = 0; i < s.count; ++i) {
    Rng rng = Rng::substream(sample_seed, "volume/" + std::to_string(i));
    const Volume model_space = generate_volume(ck.params, plan, d.height, d.width, sched, rng, s.clip);
    const Volume v = restore_orientation(model_space, ck.meta.slice_axis);
    save_volume(v, out / indexed_name("sample", i, ".vol"));
    if (s.png) export_slice_montage(v, Axis::Axial, out / indexed_name("sample", i, ".png"), s.png_every);
  }
  os << "wrote " << s.count << " volumes (" << plan.stages.size() << " stages each) to " << out.string() << "\n";
  return 0;
}

int cmd_eval(RunConfig c, const fs::path& out, std::ostream& os) {
  EvalSection& e = c.eval;
  const auto synth = load_dir_checked(e.synth_dir, "synth");
  const auto real = load_dir_checked(e.real_dir, "real");
  e.metrics.seed = Rng::derive_seed(c.seed, "eval");
  std::optional<ExternalFeatures> external;
  if (!e.features_dir.empty()) {
    if (!fs::is_directory(e.features_dir))
      throw UsageError("features directory '" + e.features_dir + "' does not exist");
    external.emplace();
    for (Axis axis : {Axis::Axial, Axis::Coronal, Axis::Sagittal}) {
      const fs::path ps = fs::path(e.features_dir) / ("synth_" + to_string(axis) + ".vol");
      const fs::path pr = fs::path(e.features_dir) / ("real_" + to_string(axis) + ".vol");
      if (fs::exists(ps) && fs::exists(pr)) {
        external->synth[axis] = load_feature_matrix(ps);
        external->real[axis] = load_feature_matrix(pr);
      }
    }
  }
  const MetricReport report = evaluate(synth, real, e.metrics, external);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file_atomic(out, canonical_dump(to_json(report)));
  fs::path echo = out;
  echo.replace_extension(".resolved.json");
  echo_config(c, echo);
  os << "report written to " << out.string() << "\n";
  return 0;
}

int cmd_inspect(const std::string& path, std::ostream& os) {
  if (!fs::exists(path)) throw UsageError("checkpoint '" + path + "' does not exist");
  const Checkpoint ck = load_checkpoint(path);
  const Json info{{"format", "CDPM"},
                  {"version", kCheckpointVersion},
                  {"parameters", ck.params.count()},
                  {"tensors", ck.params.tensors().size()},
                  {"meta", cdpm::to_json(ck.meta)}};
  os << canonical_dump(info);
  return 0;
}

}  // namespace

int run(int argc, char** argv) { return run(argc, argv, std::cout, std::cerr); }

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Slice-conditional diffusion model for 3D volumes"};
  app.require_subcommand(1);

  std::string config_path, out_dir, resume, data_dir;
  std::uint64_t seed = 0;
  std::size_t count = 0, iterations = 0, stage_target = 0, stage_cond = 0, png_every = 1;
  std::string checkpoint, clip, synth, real, features, spec_path;
  bool png = false;

  auto* ph = app.add_subcommand("phantom", "Generate procedural phantom volumes");
  ph->add_option("--config", config_path, "Run config JSON");
  ph->add_option("--spec", spec_path, "Phantom spec JSON (overrides phantom.spec)");
  ph->add_option("--count", count, "Number of volumes");
  ph->add_option("--seed", seed, "Root seed");
  ph->add_option("--out", out_dir, "Output directory")->required();
  ph->add_flag("--png", png, "Also write an axial montage per volume");

  auto* tr = app.add_subcommand("train", "Train the denoiser");
  tr->add_option("--config", config_path, "Run config JSON")->required();
  tr->add_option("--data", data_dir, "Directory of training .vol files");
  tr->add_option("--seed", seed, "Root seed");
  tr->add_option("--iterations", iterations, "Total optimization steps");
  tr->add_option("--resume", resume, "train.state file to continue from");
  tr->add_option("--out", out_dir, "Output directory")->required();

  auto* sa = app.add_subcommand("sample", "Generate volumes with the staged plan");
  sa->add_option("--config", config_path, "Run config JSON");
  sa->add_option("--checkpoint", checkpoint, "Model checkpoint (.cdpm)");
  sa->add_option("--count", count, "Number of volumes");
  sa->add_option("--seed", seed, "Root seed");
  sa->add_option("--stage-target", stage_target, "Target slices per stage");
  sa->add_option("--stage-cond", stage_cond, "Condition slices per stage");
  sa->add_option("--clip", clip, "final or xstart");
  sa->add_flag("--png", png, "Also write an axial montage per volume");
  sa->add_option("--png-every", png_every, "Montage every k-th slice");
  sa->add_option("--out", out_dir, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Score a synthetic set against a real set");
  ev->add_option("--config", config_path, "Run config JSON");
  ev->add_option("--synth", synth, "Directory of synthetic .vol files");
  ev->add_option("--real", real, "Directory of real .vol files");
  ev->add_option("--features", features, "Directory of external feature matrices");
  ev->add_option("--seed", seed, "Root seed");
  ev->add_option("--out", out_dir, "Report path")->required();

  auto* in = app.add_subcommand("inspect", "Print checkpoint metadata");
  in->add_option("--checkpoint", checkpoint, "Model checkpoint (.cdpm)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  auto given = [](CLI::App* sub, const char* name) { return sub->count(name) > 0; };
  try {
    if (in->parsed()) return cmd_inspect(checkpoint, out);

    RunConfig c = load_run_config(config_path);
    CLI::App* sub = app.get_subcommands().front();
    if (given(sub, "--seed")) c.seed = seed;
    if (ph->parsed()) {
      if (given(ph, "--spec")) c.phantom = load_phantom_spec(spec_path);
      if (given(ph, "--count")) c.phantom_count = count;
      return cmd_phantom(std::move(c), out_dir, png, out);
    }
    if (tr->parsed()) {
      if (given(tr, "--data")) c.data_dir = data_dir;
      if (given(tr, "--iterations")) c.train.iterations = iterations;
      return cmd_train(std::move(c), out_dir, resume, out);
    }
    if (sa->parsed()) {
      if (given(sa, "--checkpoint")) c.sample.checkpoint = checkpoint;
      if (given(sa, "--count")) c.sample.count = count;
      if (given(sa, "--stage-target")) c.sample.stage_target = stage_target;
      if (given(sa, "--stage-cond")) c.sample.stage_cond = stage_cond;
      if (given(sa, "--clip")) c.sample.clip = clip_mode_from_string(clip);
      if (given(sa, "--png")) c.sample.png = png;
      if (given(sa, "--png-every")) c.sample.png_every = png_every;
      return cmd_sample(std::move(c), out_dir, out);
    }
    if (ev->parsed()) {
      if (given(ev, "--synth")) c.eval.synth_dir = synth;
      if (given(ev, "--real")) c.eval.real_dir = real;
      if (given(ev, "--features")) c.eval.features_dir = features;
      return cmd_eval(std::move(c), out_dir, out);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace cdpm::cli
