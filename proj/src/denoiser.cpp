#include "cdpm/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cdpm/rng.hpp"

namespace cdpm {

using nn::Graph;
using nn::Shape;
namespace ops = nn::ops;

bool DenoiserConfig::has_attention(std::size_t level) const {
  return std::find(attn_levels.begin(), attn_levels.end(), level) != attn_levels.end();
}

void validate_denoiser_config(const DenoiserConfig& c) {
  if (c.channel_mults.empty()) throw std::invalid_argument("DenoiserConfig: channel_mults is empty");
  if (c.base_channels == 0) throw std::invalid_argument("DenoiserConfig: base_channels must be >= 1");
  for (std::size_t m : c.channel_mults)
    if (m == 0) throw std::invalid_argument("DenoiserConfig: channel multipliers must be >= 1");
  if (c.num_heads == 0) throw std::invalid_argument("DenoiserConfig: num_heads must be >= 1");
  for (std::size_t level : c.attn_levels) {
    if (level >= c.levels())
      throw std::invalid_argument("DenoiserConfig: attention level " + std::to_string(level) +
                                  " outside [0, " + std::to_string(c.levels()) + ")");
    if (c.channels(level) % c.num_heads != 0)
      throw std::invalid_argument("DenoiserConfig: num_heads = " + std::to_string(c.num_heads) +
                                  " does not divide attention width " +
                                  std::to_string(c.channels(level)) + " at level " +
                                  std::to_string(level));
  }
  if (c.time_embed_dim == 0 || c.time_embed_dim % 2 != 0)
    throw std::invalid_argument("DenoiserConfig: time_embed_dim must be even and positive");
  if (c.slice_embed_dim == 0 || c.slice_embed_dim % 2 != 0)
    throw std::invalid_argument("DenoiserConfig: slice_embed_dim must be even and positive");
  if (c.max_depth == 0) throw std::invalid_argument("DenoiserConfig: max_depth must be >= 1");
  if (c.max_slices == 0) throw std::invalid_argument("DenoiserConfig: max_slices must be >= 1");
  if (c.in_channels != 2) throw std::invalid_argument("DenoiserConfig: in_channels must be 2");
}

std::size_t norm_groups(std::size_t channels) {
  for (std::size_t g = std::min<std::size_t>(8, channels / 4); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

DenoiserParams::DenoiserParams(DenoiserConfig config, std::vector<ParamTensor> tensors)
    : config_(std::move(config)), tensors_(std::move(tensors)) {
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (nn::numel(tensors_[i].shape) != tensors_[i].data.size())
      throw std::invalid_argument("DenoiserParams: tensor '" + tensors_[i].name +
                                  "' data does not match its shape");
    if (!index_.emplace(tensors_[i].name, i).second)
      throw std::invalid_argument("DenoiserParams: duplicate tensor '" + tensors_[i].name + "'");
  }
}

const ParamTensor& DenoiserParams::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("DenoiserParams: no tensor named '" + name + "'");
  return tensors_[it->second];
}

ParamTensor& DenoiserParams::get(const std::string& name) {
  return const_cast<ParamTensor&>(std::as_const(*this).get(name));
}

std::size_t DenoiserParams::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.data.size();
  return n;
}

bool DenoiserParams::all_finite() const {
  for (const auto& t : tensors_)
    for (double v : t.data)
      if (!std::isfinite(v)) return false;
  return true;
}

bool DenoiserParams::operator==(const DenoiserParams& other) const {
  if (!(config_ == other.config_) || tensors_.size() != other.tensors_.size()) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const auto& a = tensors_[i];
    const auto& b = other.tensors_[i];
    if (a.name != b.name || a.shape != b.shape || a.data != b.data) return false;
  }
  return true;
}

ParamGrads zero_grads(const DenoiserParams& params) {
  ParamGrads g;
  g.reserve(params.tensors().size());
  for (const auto& t : params.tensors()) g.emplace_back(t.data.size(), 0.0);
  return g;
}

namespace {

enum class InitKind { FanIn, Zero, One, Normal };

struct LayoutEntry {
  std::string name;
  Shape shape;
  InitKind init;
  std::size_t fan_in = 1;
};

class LayoutBuilder {
 public:
  void conv(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
            bool zero = false) {
    entries.push_back({name + ".weight", {cout, cin, k, k}, zero ? InitKind::Zero : InitKind::FanIn,
                       cin * k * k});
    entries.push_back({name + ".bias", {cout}, InitKind::Zero});
  }
  void linear(const std::string& name, std::size_t out, std::size_t in) {
    entries.push_back({name + ".weight", {out, in}, InitKind::FanIn, in});
    entries.push_back({name + ".bias", {out}, InitKind::Zero});
  }
  void norm(const std::string& name, std::size_t c) {
    entries.push_back({name + ".gamma", {c}, InitKind::One});
    entries.push_back({name + ".beta", {c}, InitKind::Zero});
  }
  void res_block(const std::string& name, std::size_t cin, std::size_t cout, std::size_t temb) {
    norm(name + ".norm1", cin);
    conv(name + ".conv1", cout, cin, 3);
    linear(name + ".temb", cout, temb);
    norm(name + ".norm2", cout);
    conv(name + ".conv2", cout, cout, 3);
    if (cin != cout) conv(name + ".skip", cout, cin, 1);
  }
  void attention(const std::string& name, std::size_t c, std::size_t slice_dim) {
    linear(name + ".slice_proj", c, slice_dim);
    norm(name + ".norm", c);
    for (const char* p : {".q", ".k", ".v", ".o"}) linear(name + p, c, c);
  }
  std::vector<LayoutEntry> entries;
};

std::vector<LayoutEntry> build_layout(const DenoiserConfig& c) {
  validate_denoiser_config(c);
  LayoutBuilder b;
  const std::size_t te = c.time_embed_dim;
  b.linear("time_embed.fc1", te, te);
  b.linear("time_embed.fc2", te, te);
  b.entries.push_back({"slice_embed.flag", {2, c.slice_embed_dim}, InitKind::Normal});
  b.conv("conv_in", c.channels(0), c.in_channels, 3);
  std::size_t cur = c.channels(0);
  for (std::size_t l = 0; l < c.levels(); ++l) {
    const std::string name = "down" + std::to_string(l);
    b.res_block(name + ".res", cur, c.channels(l), te);
    cur = c.channels(l);
    if (c.has_attention(l)) b.attention(name + ".attn", cur, c.slice_embed_dim);
  }
  b.res_block("mid.res", cur, cur, te);
  for (std::size_t l = c.levels(); l-- > 0;) {
    const std::string name = "up" + std::to_string(l);
    b.res_block(name + ".res", cur + c.channels(l), c.channels(l), te);
    cur = c.channels(l);
    if (c.has_attention(l)) b.attention(name + ".attn", cur, c.slice_embed_dim);
  }
  b.norm("out.norm", cur);
  b.conv("out.conv", 1, cur, 3, /*zero=*/true);
  return b.entries;
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const DenoiserConfig& config) {
  std::vector<std::pair<std::string, Shape>> out;
  for (auto& e : build_layout(config)) out.emplace_back(e.name, e.shape);
  return out;
}

DenoiserParams init_denoiser(const DenoiserConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ParamTensor> tensors;
  for (const auto& e : build_layout(config)) {
    ParamTensor t{e.name, e.shape, std::vector<double>(nn::numel(e.shape), 0.0)};
    switch (e.init) {
      case InitKind::Zero: break;
      case InitKind::One: std::fill(t.data.begin(), t.data.end(), 1.0); break;
      case InitKind::Normal:
        for (double& v : t.data) v = rng.normal();
        break;
      case InitKind::FanIn: {
        const double std = 1.0 / std::sqrt(static_cast<double>(e.fan_in));
        for (double& v : t.data) v = std * rng.normal();
        break;
      }
    }
    tensors.push_back(std::move(t));
  }
  return DenoiserParams(config, std::move(tensors));
}

std::vector<double> sinusoidal_embedding(double position, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0)
    throw std::invalid_argument("sinusoidal_embedding: dim must be even and positive");
  const std::size_t half = dim / 2;
  std::vector<double> e(dim);
  for (std::size_t k = 0; k < half; ++k) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    e[k] = std::sin(position * freq);
    e[half + k] = std::cos(position * freq);
  }
  return e;
}

void validate_input(const DenoiserConfig& config, const ConditionedInput& input) {
  const std::size_t k = input.slices.count;
  if (k == 0) throw std::invalid_argument("predict_eps: empty bundle");
  if (input.roles.size() != k || input.indices.size() != k)
    throw std::invalid_argument("predict_eps: roles/indices do not match slice count");
  if (k > config.max_slices)
    throw std::invalid_argument("predict_eps: bundle of " + std::to_string(k) +
                                " slices exceeds tau_max = " + std::to_string(config.max_slices));
  if (input.num_targets() == 0) throw std::invalid_argument("predict_eps: no target slices");
  const std::size_t mult = config.spatial_multiple();
  if (input.slices.height == 0 || input.slices.width == 0 || input.slices.height % mult != 0 ||
      input.slices.width % mult != 0)
    throw std::invalid_argument("predict_eps: spatial size " + std::to_string(input.slices.height) +
                                "x" + std::to_string(input.slices.width) +
                                " not divisible by " + std::to_string(mult));
  for (std::size_t idx : input.indices)
    if (idx >= config.max_depth)
      throw std::invalid_argument("predict_eps: slice index " + std::to_string(idx) +
                                  " outside [0, " + std::to_string(config.max_depth) + ")");
}

namespace {

class Builder {
 public:
  Builder(Graph& g, const DenoiserParams& params, ParamGrads* grads)
      : g_(g), params_(params), grads_(grads) {}

  Graph::Id param(const std::string& name) {
    auto it = ids_.find(name);
    if (it != ids_.end()) return it->second;
    const auto& t = params_.get(name);
    std::vector<double>* sink = nullptr;
    if (grads_) {
      const auto idx = static_cast<std::size_t>(&t - params_.tensors().data());
      sink = &(*grads_)[idx];
    }
    const Graph::Id id = g_.parameter(t.shape, t.data, sink);
    ids_.emplace(name, id);
    return id;
  }

  Graph::Id linear(const std::string& name, Graph::Id x) {
    return ops::linear(g_, x, param(name + ".weight"), param(name + ".bias"));
  }
  Graph::Id conv(const std::string& name, Graph::Id x) {
    return ops::conv2d(g_, x, param(name + ".weight"), param(name + ".bias"));
  }
  Graph::Id norm(const std::string& name, Graph::Id x) {
    const std::size_t c = g_.shape(x)[1];
    return ops::group_norm(g_, x, param(name + ".gamma"), param(name + ".beta"), norm_groups(c));
  }

  Graph::Id res_block(const std::string& name, Graph::Id x, Graph::Id temb_act) {
    Graph::Id h = conv(name + ".conv1", ops::silu(g_, norm(name + ".norm1", x)));
    h = ops::add_channel_bias(g_, h, linear(name + ".temb", temb_act));
    h = conv(name + ".conv2", ops::silu(g_, norm(name + ".norm2", h)));
    const Graph::Id skip = params_.contains(name + ".skip.weight") ? conv(name + ".skip", x) : x;
    return ops::add(g_, skip, h);
  }

  Graph::Id attention(const std::string& name, Graph::Id x, Graph::Id slice_emb) {
    Graph::Id h = ops::add_channel_bias(g_, x, linear(name + ".slice_proj", slice_emb));
    h = norm(name + ".norm", h);
    const ops::AttentionWeights w{param(name + ".q.weight"), param(name + ".q.bias"),
                                  param(name + ".k.weight"), param(name + ".k.bias"),
                                  param(name + ".v.weight"), param(name + ".v.bias"),
                                  param(name + ".o.weight"), param(name + ".o.bias")};
    return ops::add(g_, x, ops::slice_attention(g_, h, w, params_.config().num_heads));
  }

  Graph& graph() { return g_; }

 private:
  Graph& g_;
  const DenoiserParams& params_;
  ParamGrads* grads_;
  std::map<std::string, Graph::Id> ids_;
};

}  // namespace

std::vector<double> time_embedding(const DenoiserParams& params, std::size_t t) {
  Graph g(false);
  Builder b(g, params, nullptr);
  const std::size_t dim = params.config().time_embed_dim;
  Graph::Id e = g.constant({1, dim}, sinusoidal_embedding(static_cast<double>(t), dim));
  e = b.linear("time_embed.fc2", ops::silu(g, b.linear("time_embed.fc1", e)));
  return g.value(e);
}

std::vector<double> slice_embedding(const DenoiserParams& params, std::size_t index, SliceRole role) {
  const auto& cfg = params.config();
  if (index >= cfg.max_depth)
    throw std::invalid_argument("slice_embedding: index " + std::to_string(index) +
                                " outside [0, " + std::to_string(cfg.max_depth) + ")");
  std::vector<double> e = sinusoidal_embedding(static_cast<double>(index), cfg.slice_embed_dim);
  const auto& table = params.get("slice_embed.flag").data;
  const std::size_t row = static_cast<std::size_t>(role) * cfg.slice_embed_dim;
  for (std::size_t k = 0; k < e.size(); ++k) e[k] += table[row + k];
  return e;
}

Graph::Id build_denoiser(Graph& g, const DenoiserParams& params, const ConditionedInput& input,
                         ParamGrads* grads) {
  const DenoiserConfig& cfg = params.config();
  validate_input(cfg, input);
  const std::size_t k = input.slices.count, h = input.slices.height, w = input.slices.width;
  const std::size_t hw = h * w;
  Builder b(g, params, grads);

  // Input channels: intensity, condition flag.
  std::vector<double> x0(k * 2 * hw);
  for (std::size_t s = 0; s < k; ++s) {
    auto src = input.slices.slice(s);
    std::copy(src.begin(), src.end(), x0.begin() + static_cast<long>(s * 2 * hw));
    const double flag = input.roles[s] == SliceRole::Condition ? 1.0 : 0.0;
    std::fill_n(x0.begin() + static_cast<long>((s * 2 + 1) * hw), hw, flag);
  }
  const Graph::Id x = g.constant({k, 2, h, w}, std::move(x0));

  const std::size_t td = cfg.time_embed_dim;
  Graph::Id temb = g.constant({1, td}, sinusoidal_embedding(static_cast<double>(input.t), td));
  temb = b.linear("time_embed.fc2", ops::silu(g, b.linear("time_embed.fc1", temb)));
  const Graph::Id temb_act = ops::silu(g, temb);

  Graph::Id slice_emb = 0;
  if (!cfg.attn_levels.empty()) {
    const std::size_t sd = cfg.slice_embed_dim;
    std::vector<double> base(k * sd);
    std::vector<std::size_t> rows(k);
    for (std::size_t s = 0; s < k; ++s) {
      auto e = sinusoidal_embedding(static_cast<double>(input.indices[s]), sd);
      std::copy(e.begin(), e.end(), base.begin() + static_cast<long>(s * sd));
      rows[s] = static_cast<std::size_t>(input.roles[s]);
    }
    slice_emb = ops::add(g, g.constant({k, sd}, std::move(base)),
                         ops::gather_rows(g, b.param("slice_embed.flag"), rows));
  }

  Graph::Id cur = b.conv("conv_in", x);
  std::vector<Graph::Id> skips;
  for (std::size_t l = 0; l < cfg.levels(); ++l) {
    const std::string name = "down" + std::to_string(l);
    cur = b.res_block(name + ".res", cur, temb_act);
    if (cfg.has_attention(l)) cur = b.attention(name + ".attn", cur, slice_emb);
    skips.push_back(cur);
    if (l + 1 < cfg.levels()) cur = ops::avg_pool2(g, cur);
  }
  cur = b.res_block("mid.res", cur, temb_act);
  for (std::size_t l = cfg.levels(); l-- > 0;) {
    const std::string name = "up" + std::to_string(l);
    cur = b.res_block(name + ".res", ops::concat_channels(g, cur, skips[l]), temb_act);
    if (cfg.has_attention(l)) cur = b.attention(name + ".attn", cur, slice_emb);
    if (l > 0) cur = ops::upsample2(g, cur);
  }
  cur = b.conv("out.conv", ops::silu(g, b.norm("out.norm", cur)));
  return ops::select_slices(g, cur, input.target_positions());
}

SliceStack predict_eps(const DenoiserParams& params, const ConditionedInput& input) {
  Graph g(false);
  const Graph::Id out = build_denoiser(g, params, input, nullptr);
  SliceStack eps(input.num_targets(), input.slices.height, input.slices.width);
  eps.data = g.value(out);
  return eps;
}

}  // namespace cdpm
