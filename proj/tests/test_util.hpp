#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <random>

#include <unistd.h>

#include "vdt/dense_array.hpp"
#include "vdt/rng.hpp"
#include "vdt/tape.hpp"

namespace vdt::testing {

inline DenseArray<double> random_array(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  DenseArray<double> a(std::move(shape));
  for (double& v : a.values()) v = dist(rng);
  return a;
}

// Reduces an arbitrary-shaped output to a scalar with fixed random weights so
// every output entry contributes a distinct gradient.
template <typename T>
Var<T> probe(Var<T> out, std::uint64_t seed) {
  auto weights = random_array(out.shape(), seed).template cast<T>();
  return dot(out, out.tape().constant(std::move(weights)));
}

inline double max_abs_diff(const DenseArray<double>& a, const DenseArray<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("vdt_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

}  // namespace vdt::testing
