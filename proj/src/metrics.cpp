#include "cdpm/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "cdpm/config.hpp"
#include "cdpm/rng.hpp"

namespace cdpm {

namespace {

struct Grid {
  std::array<std::size_t, 3> ext{};
  std::vector<double> v;

  std::size_t index(std::size_t d, std::size_t h, std::size_t w) const {
    return (d * ext[1] + h) * ext[2] + w;
  }
};

Grid to_grid(const Volume& vol) {
  Grid g;
  g.ext = {vol.dims().depth, vol.dims().height, vol.dims().width};
  g.v.assign(vol.voxels().begin(), vol.voxels().end());
  return g;
}

std::vector<double> gaussian_window(std::size_t n, double sigma) {
  std::vector<double> w(n);
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double x = static_cast<double>(k) - c;
    w[k] = std::exp(-x * x / (2.0 * sigma * sigma));
    total += w[k];
  }
  for (double& x : w) x /= total;
  return w;
}

// Valid 1D filtering along one axis.
Grid filter_axis(const Grid& g, int axis, const std::vector<double>& win) {
  Grid out;
  out.ext = g.ext;
  out.ext[static_cast<std::size_t>(axis)] = g.ext[static_cast<std::size_t>(axis)] - win.size() + 1;
  out.v.assign(out.ext[0] * out.ext[1] * out.ext[2], 0.0);
  for (std::size_t d = 0; d < out.ext[0]; ++d)
    for (std::size_t h = 0; h < out.ext[1]; ++h)
      for (std::size_t w = 0; w < out.ext[2]; ++w) {
        double acc = 0.0;
        for (std::size_t k = 0; k < win.size(); ++k) {
          const std::size_t dd = d + (axis == 0 ? k : 0);
          const std::size_t hh = h + (axis == 1 ? k : 0);
          const std::size_t ww = w + (axis == 2 ? k : 0);
          acc += win[k] * g.v[g.index(dd, hh, ww)];
        }
        out.v[out.index(d, h, w)] = acc;
      }
  return out;
}

Grid filter(const Grid& g, const std::array<bool, 3>& axes, const std::vector<double>& win) {
  Grid cur = g;
  for (int a = 0; a < 3; ++a)
    if (axes[static_cast<std::size_t>(a)]) cur = filter_axis(cur, a, win);
  return cur;
}

Grid downsample(const Grid& g, const std::array<bool, 3>& axes) {
  std::array<std::size_t, 3> f{};
  Grid out;
  for (std::size_t a = 0; a < 3; ++a) {
    f[a] = axes[a] ? 2 : 1;
    out.ext[a] = g.ext[a] / f[a];
  }
  out.v.assign(out.ext[0] * out.ext[1] * out.ext[2], 0.0);
  const double inv = 1.0 / static_cast<double>(f[0] * f[1] * f[2]);
  for (std::size_t d = 0; d < out.ext[0]; ++d)
    for (std::size_t h = 0; h < out.ext[1]; ++h)
      for (std::size_t w = 0; w < out.ext[2]; ++w) {
        double s = 0.0;
        for (std::size_t a = 0; a < f[0]; ++a)
          for (std::size_t b = 0; b < f[1]; ++b)
            for (std::size_t c = 0; c < f[2]; ++c)
              s += g.v[g.index(d * f[0] + a, h * f[1] + b, w * f[2] + c)];
        out.v[out.index(d, h, w)] = s * inv;
      }
  return out;
}

std::array<bool, 3> filtered_axes(const Dims& dims) {
  return {dims.depth > 1, dims.height > 1, dims.width > 1};
}

Grid product(const Grid& a, const Grid& b) {
  Grid out;
  out.ext = a.ext;
  out.v.resize(a.v.size());
  for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] * b.v[i];
  return out;
}

// Mean contrast-structure term and mean SSIM at one scale.
std::pair<double, double> ssim_terms(const Grid& a, const Grid& b, const std::array<bool, 3>& axes,
                                     const std::vector<double>& win, double c1, double c2) {
  const Grid mu_a = filter(a, axes, win);
  const Grid mu_b = filter(b, axes, win);
  const Grid aa = filter(product(a, a), axes, win);
  const Grid bb = filter(product(b, b), axes, win);
  const Grid ab = filter(product(a, b), axes, win);
  double cs_sum = 0.0, ssim_sum = 0.0;
  const std::size_t n = mu_a.v.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double ma = mu_a.v[i], mb = mu_b.v[i];
    const double va = aa.v[i] - ma * ma;
    const double vb = bb.v[i] - mb * mb;
    const double cov = ab.v[i] - ma * mb;
    const double cs = (2.0 * cov + c2) / (va + vb + c2);
    const double l = (2.0 * (ma * mb) + c1) / (ma * ma + mb * mb + c1);
    cs_sum += cs;
    ssim_sum += l * cs;
  }
  return {cs_sum / static_cast<double>(n), ssim_sum / static_cast<double>(n)};
}

}  // namespace

std::size_t ms_ssim_scales(const Dims& dims, const MsSsimConfig& config) {
  const auto axes = filtered_axes(dims);
  const std::array<std::size_t, 3> ext{dims.depth, dims.height, dims.width};
  std::size_t m = 0;
  while (m < config.weights.size()) {
    bool fits = true;
    for (std::size_t a = 0; a < 3; ++a)
      if (axes[a] && (ext[a] >> m) < config.window) fits = false;
    if (!fits) break;
    ++m;
  }
  return m;
}

double ms_ssim(const Volume& a, const Volume& b, const MsSsimConfig& config) {
  if (!(a.dims() == b.dims())) throw std::invalid_argument("ms_ssim: shape mismatch");
  if (config.window == 0 || config.sigma <= 0.0 || config.weights.empty())
    throw std::invalid_argument("ms_ssim: invalid window or weights");
  const std::size_t scales = ms_ssim_scales(a.dims(), config);
  if (scales == 0) throw std::invalid_argument("ms_ssim: volume smaller than the filter window");
  const auto axes = filtered_axes(a.dims());
  const auto win = gaussian_window(config.window, config.sigma);
  const double c1 = (config.k1 * config.data_range) * (config.k1 * config.data_range);
  const double c2 = (config.k2 * config.data_range) * (config.k2 * config.data_range);

  double wsum = 0.0;
  for (std::size_t j = 0; j < scales; ++j) wsum += config.weights[j];

  Grid ga = to_grid(a), gb = to_grid(b);
  double result = 1.0;
  for (std::size_t j = 0; j < scales; ++j) {
    const auto [cs, ssim] = ssim_terms(ga, gb, axes, win, c1, c2);
    const double w = config.weights[j] / wsum;
    const double term = (j + 1 == scales) ? ssim : cs;
    result *= std::pow(std::max(term, 0.0), w);
    if (j + 1 < scales) {
      ga = downsample(ga, axes);
      gb = downsample(gb, axes);
    }
  }
  return result;
}

DiversityResult pairwise_ms_ssim(const std::vector<Volume>& volumes, std::size_t max_pairs,
                                 std::uint64_t seed, const MsSsimConfig& config) {
  const std::size_t n = volumes.size();
  if (n < 2) throw std::invalid_argument("pairwise_ms_ssim: need at least two volumes");
  if (max_pairs == 0) throw std::invalid_argument("pairwise_ms_ssim: max_pairs must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(i, j);

  DiversityResult r;
  if (pairs.size() > max_pairs) {
    Rng rng(seed);
    for (std::size_t k = 0; k < max_pairs; ++k) {
      const auto pick = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(k),
                                                                 static_cast<std::int64_t>(pairs.size() - 1)));
      std::swap(pairs[k], pairs[pick]);
    }
    pairs.resize(max_pairs);
    std::sort(pairs.begin(), pairs.end());
    r.subsampled = true;
  }
  std::vector<double> scores;
  scores.reserve(pairs.size());
  for (const auto& [i, j] : pairs) scores.push_back(ms_ssim(volumes[i], volumes[j], config));
  r.pairs = scores.size();
  r.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  if (scores.size() > 1) {
    double ss = 0.0;
    for (double s : scores) ss += (s - r.mean) * (s - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(scores.size() - 1));
  }
  return r;
}

std::vector<double> pool_volume(const Volume& volume, std::size_t pool) {
  if (pool == 0) throw std::invalid_argument("pool_volume: pool must be >= 1");
  const Dims& d = volume.dims();
  const std::array<std::size_t, 3> ext{d.depth, d.height, d.width};
  std::array<std::size_t, 3> f{}, out{};
  for (std::size_t a = 0; a < 3; ++a) {
    f[a] = std::min(pool, ext[a]);
    out[a] = (ext[a] + f[a] - 1) / f[a];
  }
  std::vector<double> sum(out[0] * out[1] * out[2], 0.0), count(sum.size(), 0.0);
  for (std::size_t z = 0; z < ext[0]; ++z)
    for (std::size_t y = 0; y < ext[1]; ++y)
      for (std::size_t x = 0; x < ext[2]; ++x) {
        const std::size_t o = ((z / f[0]) * out[1] + y / f[1]) * out[2] + x / f[2];
        sum[o] += volume.at(z, y, x);
        count[o] += 1.0;
      }
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] /= count[i];
  return sum;
}

namespace {

double sq_dist(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return s;
}

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<long>(mid));
  return 0.5 * (lo + hi);
}

}  // namespace

MmdResult mmd(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
              const MmdConfig& config) {
  const std::size_t m = a.size(), n = b.size();
  const std::size_t min_size = config.unbiased ? 2 : 1;
  if (m < min_size || n < min_size) throw std::invalid_argument("mmd: too few samples");
  if (config.bandwidth_factors.empty()) throw std::invalid_argument("mmd: no bandwidth factors");
  const std::size_t dim = a.front().size();
  for (const auto& x : a)
    if (x.size() != dim) throw std::invalid_argument("mmd: inconsistent sample sizes");
  for (const auto& x : b)
    if (x.size() != dim) throw std::invalid_argument("mmd: inconsistent sample sizes");

  std::vector<const std::vector<double>*> all;
  for (const auto& x : a) all.push_back(&x);
  for (const auto& x : b) all.push_back(&x);
  std::vector<double> dists;
  dists.reserve(all.size() * (all.size() - 1) / 2);
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) dists.push_back(std::sqrt(sq_dist(*all[i], *all[j])));
  double med = dists.empty() ? 0.0 : median(std::move(dists));
  if (!(med > 0.0)) med = 1.0;

  MmdResult r;
  for (double f : config.bandwidth_factors) {
    if (!(f > 0.0)) throw std::invalid_argument("mmd: bandwidth factors must be positive");
    r.bandwidths.push_back(med * f);
  }
  auto kernel = [&](const std::vector<double>& x, const std::vector<double>& y) {
    const double d2 = sq_dist(x, y);
    double k = 0.0;
    for (double s : r.bandwidths) k += std::exp(-d2 / (2.0 * s * s));
    return k;
  };
  auto within = [&](const std::vector<std::vector<double>>& s) {
    double total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = 0; j < s.size(); ++j)
        if (i != j || !config.unbiased) total += kernel(s[i], s[j]);
    const double k = static_cast<double>(s.size());
    return total / (config.unbiased ? k * (k - 1.0) : k * k);
  };
  double cross = 0.0;
  for (const auto& x : a)
    for (const auto& y : b) cross += kernel(x, y);
  cross /= static_cast<double>(m) * static_cast<double>(n);
  r.value = within(a) + within(b) - 2.0 * cross;

  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", med);
  r.kernel = std::string("sum of gaussians exp(-d^2/(2 s^2)), s = median_distance(") + buf + ") x {";
  for (std::size_t i = 0; i < config.bandwidth_factors.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%s%g", i ? ", " : "", config.bandwidth_factors[i]);
    r.kernel += buf;
  }
  r.kernel += config.unbiased ? "}, unbiased" : "}, biased";
  return r;
}

MmdResult mmd_volumes(const std::vector<Volume>& a, const std::vector<Volume>& b, const MmdConfig& config) {
  std::vector<std::vector<double>> pa, pb;
  for (const auto& v : a) pa.push_back(pool_volume(v, config.pool));
  for (const auto& v : b) pb.push_back(pool_volume(v, config.pool));
  return mmd(pa, pb, config);
}

GaussianStats fit_gaussian(const Eigen::MatrixXd& rows, double shrinkage) {
  if (rows.rows() < 2) throw std::invalid_argument("fit_gaussian: need at least two samples");
  GaussianStats s;
  s.samples = static_cast<std::size_t>(rows.rows());
  s.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centered = rows.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(rows.rows() - 1);
  if (rows.rows() <= rows.cols()) {
    s.cov += shrinkage * Eigen::MatrixXd::Identity(rows.cols(), rows.cols());
    s.shrunk = true;
  }
  return s;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Eigen::VectorXd& mean_a, const Eigen::MatrixXd& cov_a,
                        const Eigen::VectorXd& mean_b, const Eigen::MatrixXd& cov_b) {
  const long f = mean_a.size();
  if (mean_b.size() != f || cov_a.rows() != f || cov_a.cols() != f || cov_b.rows() != f || cov_b.cols() != f)
    throw std::invalid_argument("frechet_distance: dimension mismatch");
  const Eigen::MatrixXd ra = psd_sqrt(cov_a);
  Eigen::MatrixXd inner = ra * cov_b * ra;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return (mean_a - mean_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
}

FrechetResult frechet_features(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double shrinkage) {
  if (a.cols() != b.cols()) throw std::invalid_argument("frechet_features: feature dimension mismatch");
  const GaussianStats sa = fit_gaussian(a, shrinkage);
  const GaussianStats sb = fit_gaussian(b, shrinkage);
  return {frechet_distance(sa.mean, sa.cov, sb.mean, sb.cov), sa.shrunk || sb.shrunk};
}

FrechetResult frechet_view_distance(const std::vector<Volume>& a, const std::vector<Volume>& b, Axis axis,
                                    const FeatureExtractor& extractor, double shrinkage) {
  return frechet_features(slice_features(a, axis, extractor), slice_features(b, axis, extractor), shrinkage);
}

NearestMatch nearest_real(const Volume& synth, const std::vector<Volume>& reals, const MsSsimConfig& config) {
  if (reals.empty()) throw std::invalid_argument("nearest_real: empty reference set");
  NearestMatch best{0, ms_ssim(synth, reals[0], config)};
  for (std::size_t i = 1; i < reals.size(); ++i) {
    const double s = ms_ssim(synth, reals[i], config);
    if (s > best.score) best = {i, s};
  }
  return best;
}

nlohmann::json to_json(const MetricConfig& c) {
  return {{"ms_ssim",
           {{"sigma", c.ssim.sigma},
            {"window", c.ssim.window},
            {"k1", c.ssim.k1},
            {"k2", c.ssim.k2},
            {"data_range", c.ssim.data_range},
            {"weights", c.ssim.weights}}},
          {"mmd", {{"pool", c.mmd.pool}, {"bandwidth_factors", c.mmd.bandwidth_factors}, {"unbiased", c.mmd.unbiased}}},
          {"max_pairs", c.max_pairs},
          {"seed", c.seed},
          {"shrinkage", c.shrinkage},
          {"extractor",
           {{"seed", c.extractor.seed}, {"channels1", c.extractor.channels1}, {"channels2", c.extractor.channels2}}}};
}

MetricConfig metric_config_from_json(const nlohmann::json& j) {
  MetricConfig c;
  if (!j.is_object()) throw ConfigError("metrics: expected an object");
  reject_unknown_keys(j, {"ms_ssim", "mmd", "max_pairs", "seed", "shrinkage", "extractor"}, "metrics");
  try {
    if (j.contains("ms_ssim")) {
      const auto& s = j.at("ms_ssim");
      reject_unknown_keys(s, {"sigma", "window", "k1", "k2", "data_range", "weights"}, "metrics.ms_ssim");
      c.ssim.sigma = s.value("sigma", c.ssim.sigma);
      c.ssim.window = s.value("window", c.ssim.window);
      c.ssim.k1 = s.value("k1", c.ssim.k1);
      c.ssim.k2 = s.value("k2", c.ssim.k2);
      c.ssim.data_range = s.value("data_range", c.ssim.data_range);
      c.ssim.weights = s.value("weights", c.ssim.weights);
    }
    if (j.contains("mmd")) {
      const auto& m = j.at("mmd");
      reject_unknown_keys(m, {"pool", "bandwidth_factors", "unbiased"}, "metrics.mmd");
      c.mmd.pool = m.value("pool", c.mmd.pool);
      c.mmd.bandwidth_factors = m.value("bandwidth_factors", c.mmd.bandwidth_factors);
      c.mmd.unbiased = m.value("unbiased", c.mmd.unbiased);
    }
    c.max_pairs = j.value("max_pairs", c.max_pairs);
    c.seed = j.value("seed", c.seed);
    c.shrinkage = j.value("shrinkage", c.shrinkage);
    if (j.contains("extractor")) {
      const auto& e = j.at("extractor");
      reject_unknown_keys(e, {"seed", "channels1", "channels2"}, "metrics.extractor");
      c.extractor.seed = e.value("seed", c.extractor.seed);
      c.extractor.channels1 = e.value("channels1", c.extractor.channels1);
      c.extractor.channels2 = e.value("channels2", c.extractor.channels2);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("metrics: ") + e.what());
  }
  if (c.ssim.window == 0 || !(c.ssim.sigma > 0.0) || c.ssim.weights.empty())
    throw ConfigError("metrics.ms_ssim: window and sigma must be positive and weights non-empty");
  if (c.mmd.pool == 0) throw ConfigError("metrics.mmd.pool must be >= 1");
  if (c.max_pairs == 0) throw ConfigError("metrics.max_pairs must be >= 1");
  if (!(c.shrinkage >= 0.0)) throw ConfigError("metrics.shrinkage must be >= 0");
  return c;
}

std::string metric_config_digest(const MetricConfig& config) {
  const std::string text = canonical_dump(to_json(config));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

MetricReport evaluate(const std::vector<Volume>& synth, const std::vector<Volume>& real,
                      const MetricConfig& config, const std::optional<ExternalFeatures>& external) {
  if (synth.size() < 2 || real.size() < 2) throw std::invalid_argument("evaluate: need at least two volumes per set");
  MetricReport r;
  r.n_synth = synth.size();
  r.n_real = real.size();
  r.config_digest = metric_config_digest(config);
  r.diversity_synth = pairwise_ms_ssim(synth, config.max_pairs, Rng::derive_seed(config.seed, "pairs.synth"), config.ssim);
  r.diversity_real = pairwise_ms_ssim(real, config.max_pairs, Rng::derive_seed(config.seed, "pairs.real"), config.ssim);
  r.mmd = mmd_volumes(synth, real, config.mmd);
  const RandomConvExtractor extractor(config.extractor);
  r.extractor = extractor.describe();
  for (Axis axis : {Axis::Axial, Axis::Coronal, Axis::Sagittal}) {
    if (external && external->synth.count(axis) && external->real.count(axis)) {
      r.frechet[axis] = frechet_features(external->synth.at(axis), external->real.at(axis), config.shrinkage);
      r.feature_source[axis] = "external";
    } else {
      r.frechet[axis] = frechet_view_distance(synth, real, axis, extractor, config.shrinkage);
      r.feature_source[axis] = "random_conv";
    }
  }
  return r;
}

nlohmann::json to_json(const MetricReport& r) {
  auto div = [](const DiversityResult& d) {
    return nlohmann::json{{"mean", d.mean}, {"sd", d.sd}, {"pairs", d.pairs}, {"subsampled", d.subsampled}};
  };
  nlohmann::json frechet = nlohmann::json::object();
  for (const auto& [axis, f] : r.frechet)
    frechet[to_string(axis)] = {{"value", f.value}, {"shrinkage_applied", f.shrunk},
                                {"features", r.feature_source.at(axis)}};
  return {{"n_synth", r.n_synth},
          {"n_real", r.n_real},
          {"ms_ssim_synth", div(r.diversity_synth)},
          {"ms_ssim_real", div(r.diversity_real)},
          {"mmd", {{"value", r.mmd.value}, {"bandwidths", r.mmd.bandwidths}, {"kernel", r.mmd.kernel}}},
          {"frechet", frechet},
          {"extractor", r.extractor},
          {"config_digest", r.config_digest}};
}

}  // namespace cdpm
