#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdpm/features.hpp"
#include "cdpm/volume.hpp"

namespace cdpm {

struct MsSsimConfig {
  double sigma = 1.5;
  std::size_t window = 11;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
  std::vector<double> weights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
};

/// Number of scales usable for the given extents: the largest M <= weights
/// such that every filtered axis still spans the window at scale M - 1.
/// Axes of extent 1 are not filtered, so a 1 x H x W volume is a 2D image.
std::size_t ms_ssim_scales(const Dims& dims, const MsSsimConfig& config = {});

/// Multi-scale SSIM with Gaussian "valid" filtering and 2x mean-pool
/// downsampling. When fewer scales fit than weights are given, the leading
/// weights are renormalised to sum to one. Contrast terms are clamped at
/// zero before exponentiation. Throws if the input is smaller than the
/// window or the shapes differ.
double ms_ssim(const Volume& a, const Volume& b, const MsSsimConfig& config = {});

struct DiversityResult {
  double mean = 0.0;
  double sd = 0.0;
  std::size_t pairs = 0;
  bool subsampled = false;
};

/// Mean and standard deviation of MS-SSIM over distinct pairs. With more
/// than `max_pairs` pairs, a seeded subset of `max_pairs` is used.
DiversityResult pairwise_ms_ssim(const std::vector<Volume>& volumes, std::size_t max_pairs,
                                 std::uint64_t seed, const MsSsimConfig& config = {});

struct MmdConfig {
  std::size_t pool = 4;
  std::vector<double> bandwidth_factors{0.5, 1.0, 2.0};
  bool unbiased = true;
};

struct MmdResult {
  double value = 0.0;
  std::vector<double> bandwidths;
  std::string kernel;
};

/// Non-overlapping mean pooling by min(pool, extent) along each axis;
/// partial windows at the far edge are averaged over what they cover.
std::vector<double> pool_volume(const Volume& volume, std::size_t pool);

/// Squared MMD with a sum of Gaussian kernels exp(-d^2 / (2 s^2)),
/// s = median pairwise distance over both samples times each factor.
/// A zero median falls back to 1.
MmdResult mmd(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
              const MmdConfig& config = {});
MmdResult mmd_volumes(const std::vector<Volume>& a, const std::vector<Volume>& b,
                      const MmdConfig& config = {});

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::size_t samples = 0;
  bool shrunk = false;
};

/// Sample mean and unbiased covariance of rows. When rows <= columns the
/// covariance is singular and `shrinkage * I` is added.
GaussianStats fit_gaussian(const Eigen::MatrixXd& rows, double shrinkage = 1e-6);

/// ||mu_a - mu_b||^2 + tr(S_a) + tr(S_b) - 2 tr((S_a^1/2 S_b S_a^1/2)^1/2),
/// eigenvalues clamped at zero.
double frechet_distance(const Eigen::VectorXd& mean_a, const Eigen::MatrixXd& cov_a,
                        const Eigen::VectorXd& mean_b, const Eigen::MatrixXd& cov_b);

struct FrechetResult {
  double value = 0.0;
  bool shrunk = false;
};

FrechetResult frechet_features(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                               double shrinkage = 1e-6);
FrechetResult frechet_view_distance(const std::vector<Volume>& a, const std::vector<Volume>& b,
                                    Axis axis, const FeatureExtractor& extractor,
                                    double shrinkage = 1e-6);

struct NearestMatch {
  std::size_t index = 0;
  double score = 0.0;
};

/// Real volume with the highest MS-SSIM to `synth`; ties go to the lowest index.
NearestMatch nearest_real(const Volume& synth, const std::vector<Volume>& reals,
                          const MsSsimConfig& config = {});

struct MetricConfig {
  MsSsimConfig ssim;
  MmdConfig mmd;
  std::size_t max_pairs = 1000;
  std::uint64_t seed = 0;
  double shrinkage = 1e-6;
  RandomConvConfig extractor;
};

nlohmann::json to_json(const MetricConfig& config);
MetricConfig metric_config_from_json(const nlohmann::json& j);
/// FNV-1a 64 of the canonical JSON of the config, as 16 hex digits.
std::string metric_config_digest(const MetricConfig& config);

/// Precomputed per-view feature matrices replacing the built-in extractor.
struct ExternalFeatures {
  std::map<Axis, Eigen::MatrixXd> synth;
  std::map<Axis, Eigen::MatrixXd> real;
};

struct MetricReport {
  std::size_t n_synth = 0;
  std::size_t n_real = 0;
  DiversityResult diversity_synth;
  DiversityResult diversity_real;
  MmdResult mmd;
  std::map<Axis, FrechetResult> frechet;
  std::map<Axis, std::string> feature_source;
  std::string config_digest;
  nlohmann::json extractor;
};

MetricReport evaluate(const std::vector<Volume>& synth, const std::vector<Volume>& real,
                      const MetricConfig& config,
                      const std::optional<ExternalFeatures>& external = std::nullopt);
nlohmann::json to_json(const MetricReport& report);

}  // namespace cdpm
