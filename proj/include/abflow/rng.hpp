#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace abflow {

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of the stream identified by `base` and a path of integer tags.
/// derive_seed(s, {a, b}) never depends on any other stream's usage.
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(base);
  for (auto t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

/// Caller-owned random stream. There is no global generator anywhere in the
/// library; every sampling routine takes one of these by reference.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  /// Uniform integer in [0, n).
  int uniform_int(int n) { return std::uniform_int_distribution<int>(0, n - 1)(engine_); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  return Rng(derive_seed(base, tags));
}

// Stream tags shared by the trainer, the sampler and the data generator.
namespace stream {
inline constexpr std::uint64_t kTrainBatch = 1;
inline constexpr std::uint64_t kTrainSample = 2;
inline constexpr std::uint64_t kSample = 3;
inline constexpr std::uint64_t kToyData = 4;
inline constexpr std::uint64_t kInit = 5;
inline constexpr std::uint64_t kTabular = 6;
}  // namespace stream

}  // namespace abflow
