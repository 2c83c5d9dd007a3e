#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace vdt {

using Rng = std::mt19937_64;

namespace detail {

inline Rng seeded(const std::vector<std::uint64_t>& keys) {
  std::vector<std::uint32_t> words;
  words.reserve(keys.size() * 2);
  for (std::uint64_t k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

}  // namespace detail

// Stream tags so different consumers of one seed never share a stream.
enum class Stream : std::uint64_t {
  kInit = 0x1001,
  kAppearance = 0x2001,
  kRender = 0x2002,
  kOcclusion = 0x2003,
  kSampler = 0x3001,
  kAugment = 0x3002,
  kProbeInput = 0x4001,  // synthetic images for gradcheck and bench
};

// Independent stream for a tuple of keys, e.g. (seed, step) or
// (seed, person_id, image_index). Same keys give the same stream.
inline Rng make_rng(Stream stream, std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint64_t> all{static_cast<std::uint64_t>(stream)};
  all.insert(all.end(), keys.begin(), keys.end());
  return detail::seeded(all);
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by rejection.
inline double truncated_normal(Rng& rng, double sigma) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (;;) {
    double z = dist(rng);
    if (z >= -2.0 && z <= 2.0) return z * sigma;
  }
}

}  // namespace vdt
