#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace cdpm {

/// A stack of equally sized 2D slices, slice-major then row-major.
struct SliceStack {
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  SliceStack() = default;
  SliceStack(std::size_t count, std::size_t height, std::size_t width, double fill = 0.0)
      : count(count), height(height), width(width), data(count * height * width, fill) {}

  std::size_t slice_size() const { return height * width; }
  std::span<double> slice(std::size_t i) {
    return {data.data() + i * slice_size(), slice_size()};
  }
  std::span<const double> slice(std::size_t i) const {
    return {data.data() + i * slice_size(), slice_size()};
  }
  bool operator==(const SliceStack&) const = default;
};

enum class SliceRole : int { Target = 0, Condition = 1 };

/// The subvolume handed to the denoiser: clean condition slices and noisy
/// target slices, ordered by ascending absolute slice index.
struct ConditionedInput {
  SliceStack slices;
  std::vector<SliceRole> roles;
  std::vector<std::size_t> indices;
  std::size_t t = 0;

  std::size_t num_targets() const;
  std::size_t num_conditions() const { return roles.size() - num_targets(); }
  /// Positions (into `slices`) of the target slices, ascending.
  std::vector<std::size_t> target_positions() const;
};

}  // namespace cdpm
