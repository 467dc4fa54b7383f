#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace cdpm {

/// Seeded random source shared by every stochastic operation.
///
/// Wraps a 64-bit Mersenne twister plus a cached standard-normal
/// distribution; both are part of the serialized state so a resumed run
/// continues the exact draw sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  /// Independent stream derived from a root seed and a stream name
  /// ("data", "init", "train", "sample", ...).
  static Rng substream(std::uint64_t root_seed, std::string_view name);
  static std::uint64_t derive_seed(std::uint64_t root_seed, std::string_view name);

  double normal();
  double uniform();  // [0, 1)
  /// Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p);
  std::uint64_t next_u64() { return engine_(); }

  std::string serialize() const;
  static Rng deserialize(const std::string& state);

  bool operator==(const Rng& other) const;

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// FNV-1a 64-bit hash, used for seed derivation and content digests.
std::uint64_t fnv1a64(const void* data, std::size_t size,
                      std::uint64_t seed = 0xcbf29ce484222325ULL);
inline std::uint64_t fnv1a64(std::string_view text) {
  return fnv1a64(text.data(), text.size());
}

}  // namespace cdpm
