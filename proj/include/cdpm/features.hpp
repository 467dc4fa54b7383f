#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "cdpm/volume.hpp"

namespace cdpm {

/// Maps one 2D slice to a fixed-length feature vector.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<double> extract(std::span<const double> slice, std::size_t height,
                                      std::size_t width) const = 0;
  /// Identifies the extractor in reports and digests.
  virtual nlohmann::json describe() const = 0;
};

struct RandomConvConfig {
  std::uint64_t seed = 1234;
  std::size_t channels1 = 8;
  std::size_t channels2 = 8;
};

/// Fixed random-weight stack standing in for a pretrained network:
///   conv3x3(1 -> c1) + ReLU, 2x2 mean pool (odd edges dropped),
///   conv3x3(c1 -> c2) + ReLU, zero padding.
/// Weights ~ N(0, 2 / fan_in) and biases ~ N(0, 0.1^2), drawn from
/// Rng(seed) in layer order. Features are the spatial mean of every
/// layer-1 channel, then the spatial mean and standard deviation of every
/// layer-2 channel, so dim = c1 + 2 * c2.
class RandomConvExtractor final : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(RandomConvConfig config = {});
  std::size_t dim() const override { return config_.channels1 + 2 * config_.channels2; }
  std::vector<double> extract(std::span<const double> slice, std::size_t height,
                              std::size_t width) const override;
  nlohmann::json describe() const override;

 private:
  RandomConvConfig config_;
  std::vector<double> w1_, b1_, w2_, b2_;
};

/// Features of every slice along `axis` of every volume, one row per slice.
Eigen::MatrixXd slice_features(const std::vector<Volume>& volumes, Axis axis,
                               const FeatureExtractor& extractor);

/// External feature matrix stored as a VOL1 file with dims (1, rows, dim);
/// a depth above 1 is read as depth * rows rows.
Eigen::MatrixXd load_feature_matrix(const std::filesystem::path& path);
void save_feature_matrix(const Eigen::MatrixXd& features, const std::filesystem::path& path);

}  // namespace cdpm
