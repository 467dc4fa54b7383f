#include "cdpm/config.hpp"

#include <fstream>

#include "cdpm/io.hpp"

namespace cdpm {

namespace {

template <typename T>
T read(const Json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void expect_object(const Json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
}

}  // namespace

void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  expect_object(j, where);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

Json to_json(const ScheduleParams& p) {
  return Json{{"steps", p.steps},
              {"beta_start", p.beta_start},
              {"beta_end", p.beta_end},
              {"variance_mode", to_string(p.variance_mode)}};
}

ScheduleParams schedule_from_json(const Json& j) {
  const std::string w = "schedule";
  reject_unknown_keys(j, {"steps", "beta_start", "beta_end", "variance_mode"}, w);
  ScheduleParams p;
  p.steps = read(j, "steps", p.steps, w);
  p.beta_start = read(j, "beta_start", p.beta_start, w);
  p.beta_end = read(j, "beta_end", p.beta_end, w);
  try {
    p.variance_mode = variance_mode_from_string(read(j, "variance_mode", std::string("beta"), w));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(w + ": " + e.what());
  }
  return p;
}

Json to_json(const SamplerPolicy& p) {
  return Json{{"tau_max", p.tau_max},
              {"p_unconditional", p.p_unconditional},
              {"contiguous_prob", p.contiguous_prob},
              {"rng_seed", p.rng_seed}};
}

SamplerPolicy policy_from_json(const Json& j) {
  const std::string w = "policy";
  reject_unknown_keys(j, {"tau_max", "p_unconditional", "contiguous_prob", "rng_seed"}, w);
  SamplerPolicy p;
  p.tau_max = read(j, "tau_max", p.tau_max, w);
  p.p_unconditional = read(j, "p_unconditional", p.p_unconditional, w);
  p.contiguous_prob = read(j, "contiguous_prob", p.contiguous_prob, w);
  p.rng_seed = read(j, "rng_seed", p.rng_seed, w);
  return p;
}

Json to_json(const DenoiserConfig& c) {
  return Json{{"base_channels", c.base_channels},   {"channel_mults", c.channel_mults},
              {"attn_levels", c.attn_levels},       {"num_heads", c.num_heads},
              {"time_embed_dim", c.time_embed_dim}, {"slice_embed_dim", c.slice_embed_dim},
              {"max_depth", c.max_depth},           {"max_slices", c.max_slices},
              {"in_channels", c.in_channels}};
}

DenoiserConfig denoiser_from_json(const Json& j) {
  const std::string w = "denoiser";
  reject_unknown_keys(j,
                      {"base_channels", "channel_mults", "attn_levels", "num_heads",
                       "time_embed_dim", "slice_embed_dim", "max_depth", "max_slices",
                       "in_channels"},
                      w);
  DenoiserConfig c;
  c.base_channels = read(j, "base_channels", c.base_channels, w);
  c.channel_mults = read(j, "channel_mults", c.channel_mults, w);
  c.attn_levels = read(j, "attn_levels", c.attn_levels, w);
  c.num_heads = read(j, "num_heads", c.num_heads, w);
  c.time_embed_dim = read(j, "time_embed_dim", c.time_embed_dim, w);
  c.slice_embed_dim = read(j, "slice_embed_dim", c.slice_embed_dim, w);
  c.max_depth = read(j, "max_depth", c.max_depth, w);
  c.max_slices = read(j, "max_slices", c.max_slices, w);
  c.in_channels = read(j, "in_channels", c.in_channels, w);
  try {
    validate_denoiser_config(c);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

Json to_json(const PhantomSpec& s) {
  return Json{{"dims", {s.dims.depth, s.dims.height, s.dims.width}},
              {"min_ellipsoids", s.min_ellipsoids},
              {"max_ellipsoids", s.max_ellipsoids},
              {"shell_band", {s.shell_low, s.shell_high}},
              {"tissue_band", {s.tissue_low, s.tissue_high}},
              {"structure_band", {s.structure_low, s.structure_high}},
              {"shell_thickness", s.shell_thickness},
              {"edge_sharpness", s.edge_sharpness},
              {"smoothing", s.smoothing},
              {"background", s.background},
              {"seed", s.seed}};
}

PhantomSpec phantom_from_json(const Json& j) {
  const std::string w = "phantom";
  reject_unknown_keys(j,
                      {"dims", "min_ellipsoids", "max_ellipsoids", "shell_band", "tissue_band",
                       "structure_band", "shell_thickness", "edge_sharpness", "smoothing",
                       "background", "seed"},
                      w);
  PhantomSpec s;
  auto dims = read(j, "dims", std::vector<std::size_t>{s.dims.depth, s.dims.height, s.dims.width}, w);
  if (dims.size() != 3) throw ConfigError(w + ".dims: expected [D, H, W]");
  s.dims = Dims{dims[0], dims[1], dims[2]};
  s.min_ellipsoids = read(j, "min_ellipsoids", s.min_ellipsoids, w);
  s.max_ellipsoids = read(j, "max_ellipsoids", s.max_ellipsoids, w);
  auto band = [&](const char* key, double& lo, double& hi) {
    auto b = read(j, key, std::vector<double>{lo, hi}, w);
    if (b.size() != 2) throw ConfigError(w + "." + key + ": expected [low, high]");
    lo = b[0];
    hi = b[1];
  };
  band("shell_band", s.shell_low, s.shell_high);
  band("tissue_band", s.tissue_low, s.tissue_high);
  band("structure_band", s.structure_low, s.structure_high);
  s.shell_thickness = read(j, "shell_thickness", s.shell_thickness, w);
  s.edge_sharpness = read(j, "edge_sharpness", s.edge_sharpness, w);
  s.smoothing = read(j, "smoothing", s.smoothing, w);
  s.background = read(j, "background", s.background, w);
  s.seed = read(j, "seed", s.seed, w);
  try {
    validate_phantom_spec(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

Json to_json(const ModelMeta& m) {
  return Json{{"denoiser", to_json(m.denoiser)},
              {"schedule", to_json(m.schedule)},
              {"policy", to_json(m.policy)},
              {"slice_axis", to_string(m.slice_axis)},
              {"step", m.step},
              {"volume_dims", {m.volume_dims.depth, m.volume_dims.height, m.volume_dims.width}}};
}

ModelMeta model_meta_from_json(const Json& j) {
  reject_unknown_keys(j, {"denoiser", "schedule", "policy", "slice_axis", "step", "volume_dims"}, "model");
  ModelMeta m;
  m.denoiser = denoiser_from_json(j.value("denoiser", Json::object()));
  m.schedule = schedule_from_json(j.value("schedule", Json::object()));
  m.policy = policy_from_json(j.value("policy", Json::object()));
  try {
    m.slice_axis = axis_from_string(j.value("slice_axis", std::string("axial")));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model.slice_axis: ") + e.what());
  }
  m.step = read(j, "step", m.step, "model");
  if (j.contains("volume_dims")) {
    const auto& d = j.at("volume_dims");
    if (!d.is_array() || d.size() != 3 || !d[0].is_number_unsigned() || !d[1].is_number_unsigned() ||
        !d[2].is_number_unsigned())
      throw ConfigError("model.volume_dims: expected three non-negative integers");
    m.volume_dims = {d[0].get<std::size_t>(), d[1].get<std::size_t>(), d[2].get<std::size_t>()};
  }
  return m;
}

Json parse_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

std::string canonical_dump(const Json& j) { return j.dump(2) + "\n"; }

}  // namespace cdpm
