#include "cdpm/features.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cdpm/rng.hpp"

namespace cdpm {

RandomConvExtractor::RandomConvExtractor(RandomConvConfig config) : config_(config) {
  if (config_.channels1 == 0 || config_.channels2 == 0)
    throw std::invalid_argument("RandomConvExtractor: channel counts must be >= 1");
  Rng rng(config_.seed);
  auto fill = [&](std::vector<double>& v, std::size_t n, double std) {
    v.resize(n);
    for (double& x : v) x = std * rng.normal();
  };
  fill(w1_, config_.channels1 * 9, std::sqrt(2.0 / 9.0));
  fill(b1_, config_.channels1, 0.1);
  fill(w2_, config_.channels2 * config_.channels1 * 9, std::sqrt(2.0 / (9.0 * config_.channels1)));
  fill(b2_, config_.channels2, 0.1);
}

namespace {

// 3x3 zero-padded convolution + ReLU over [cin, h, w] -> [cout, h, w].
std::vector<double> conv_relu(const std::vector<double>& x, std::size_t cin, std::size_t h,
                              std::size_t w, const std::vector<double>& weight,
                              const std::vector<double>& bias, std::size_t cout) {
  std::vector<double> y(cout * h * w);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double acc = bias[co];
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const long yy = static_cast<long>(i) + dy;
              const long xx = static_cast<long>(j) + dx;
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
              acc += weight[((co * cin + ci) * 3 + static_cast<std::size_t>(dy + 1)) * 3 +
                            static_cast<std::size_t>(dx + 1)] *
                     x[(ci * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
            }
        y[(co * h + i) * w + j] = std::max(acc, 0.0);
      }
  return y;
}

}  // namespace

std::vector<double> RandomConvExtractor::extract(std::span<const double> slice, std::size_t height,
                                                 std::size_t width) const {
  if (slice.size() != height * width || height == 0 || width == 0)
    throw std::invalid_argument("RandomConvExtractor: slice size mismatch");
  const std::size_t c1 = config_.channels1, c2 = config_.channels2;
  const std::vector<double> x(slice.begin(), slice.end());
  const std::vector<double> a1 = conv_relu(x, 1, height, width, w1_, b1_, c1);

  std::vector<double> f;
  f.reserve(dim());
  const double hw1 = static_cast<double>(height * width);
  for (std::size_t c = 0; c < c1; ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < height * width; ++p) s += a1[c * height * width + p];
    f.push_back(s / hw1);
  }

  const std::size_t ph = std::max<std::size_t>(height / 2, 1), pw = std::max<std::size_t>(width / 2, 1);
  const std::size_t fy = height >= 2 ? 2 : 1, fx = width >= 2 ? 2 : 1;
  std::vector<double> pooled(c1 * ph * pw);
  for (std::size_t c = 0; c < c1; ++c)
    for (std::size_t i = 0; i < ph; ++i)
      for (std::size_t j = 0; j < pw; ++j) {
        double s = 0.0;
        for (std::size_t a = 0; a < fy; ++a)
          for (std::size_t b = 0; b < fx; ++b) s += a1[(c * height + i * fy + a) * width + j * fx + b];
        pooled[(c * ph + i) * pw + j] = s / static_cast<double>(fy * fx);
      }
  const std::vector<double> a2 = conv_relu(pooled, c1, ph, pw, w2_, b2_, c2);
  const double hw2 = static_cast<double>(ph * pw);
  std::vector<double> stds;
  for (std::size_t c = 0; c < c2; ++c) {
    double s = 0.0, sq = 0.0;
    for (std::size_t p = 0; p < ph * pw; ++p) {
      const double v = a2[c * ph * pw + p];
      s += v;
      sq += v * v;
    }
    const double mean = s / hw2;
    f.push_back(mean);
    stds.push_back(std::sqrt(std::max(sq / hw2 - mean * mean, 0.0)));
  }
  f.insert(f.end(), stds.begin(), stds.end());
  return f;
}

nlohmann::json RandomConvExtractor::describe() const {
  return {{"type", "random_conv"},
          {"seed", config_.seed},
          {"channels1", config_.channels1},
          {"channels2", config_.channels2}};
}

Eigen::MatrixXd slice_features(const std::vector<Volume>& volumes, Axis axis,
                               const FeatureExtractor& extractor) {
  std::size_t rows = 0;
  std::vector<SliceStack> stacks;
  for (const auto& v : volumes) {
    stacks.push_back(to_slices(reorient(v, axis)));
    rows += stacks.back().count;
  }
  Eigen::MatrixXd out(static_cast<long>(rows), static_cast<long>(extractor.dim()));
  long r = 0;
  for (const auto& s : stacks)
    for (std::size_t i = 0; i < s.count; ++i, ++r) {
      const auto f = extractor.extract(s.slice(i), s.height, s.width);
      for (std::size_t k = 0; k < f.size(); ++k) out(r, static_cast<long>(k)) = f[k];
    }
  return out;
}

Eigen::MatrixXd load_feature_matrix(const std::filesystem::path& path) {
  const Volume v = load_volume(path);
  const Dims d = v.dims();
  Eigen::MatrixXd m(static_cast<long>(d.depth * d.height), static_cast<long>(d.width));
  for (std::size_t r = 0; r < d.depth * d.height; ++r)
    for (std::size_t c = 0; c < d.width; ++c)
      m(static_cast<long>(r), static_cast<long>(c)) = v.voxels()[r * d.width + c];
  return m;
}

void save_feature_matrix(const Eigen::MatrixXd& features, const std::filesystem::path& path) {
  Volume v(Dims{1, static_cast<std::size_t>(features.rows()), static_cast<std::size_t>(features.cols())});
  for (long r = 0; r < features.rows(); ++r)
    for (long c = 0; c < features.cols(); ++c)
      v.voxels()[static_cast<std::size_t>(r * features.cols() + c)] = static_cast<float>(features(r, c));
  save_volume(v, path);
}

}  // namespace cdpm
