#pragma once

// Forward numeric kernels on DenseArray. These are the building blocks the
// differentiable ops in tape.hpp call into; they know nothing about gradients.
//
// Matrix products are delegated to Eigen (row-major maps over our storage,
// single-threaded, so reduction order is fixed for a given shape).

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "vdt/dense_array.hpp"

namespace vdt::kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const DenseArray<T>& a) {
  return ConstMatMap<T>(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}

template <typename T>
MatMap<T> as_matrix(DenseArray<T>& a) {
  return MatMap<T>(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}

inline void require_matrix(const Shape& s, const char* what) {
  if (s.size() != 2) throw DimensionError("numkernel", std::string(what) + " expects a matrix, got " + shape_string(s));
}

// C = A·B
template <typename T>
DenseArray<T> matmul(const DenseArray<T>& a, const DenseArray<T>& b) {
  require_matrix(a.shape(), "matmul");
  require_matrix(b.shape(), "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("numkernel",
                         "matmul shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  DenseArray<T> c({a.rows(), b.cols()});
  as_matrix(c).noalias() = as_matrix(a) * as_matrix(b);
  return c;
}

// C = Aᵀ·B
template <typename T>
DenseArray<T> matmul_tn(const DenseArray<T>& a, const DenseArray<T>& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("numkernel",
                         "matmul_tn shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  DenseArray<T> c({a.cols(), b.cols()});
  as_matrix(c).noalias() = as_matrix(a).transpose() * as_matrix(b);
  return c;
}

// C = A·Bᵀ
template <typename T>
DenseArray<T> matmul_nt(const DenseArray<T>& a, const DenseArray<T>& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("numkernel",
                         "matmul_nt shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  DenseArray<T> c({a.rows(), b.rows()});
  as_matrix(c).noalias() = as_matrix(a) * as_matrix(b).transpose();
  return c;
}

// In-place stabilized softmax over one contiguous row.
template <typename T>
void softmax_inplace(std::span<T> row) {
  T peak = *std::max_element(row.begin(), row.end());
  T total = 0;
  for (T& v : row) {
    v = std::exp(v - peak);
    total += v;
  }
  for (T& v : row) v /= total;
}

template <typename T>
DenseArray<T> softmax_rows(const DenseArray<T>& x) {
  DenseArray<T> y = x;
  for (std::size_t r = 0; r < y.rows(); ++r) softmax_inplace(y.row(r));
  return y;
}

// Per-row statistics kept by layer_norm for its backward rule.
template <typename T>
struct LayerNormCache {
  DenseArray<T> normalized;        // x̂, same shape as x
  std::vector<T> inv_std;          // 1/sqrt(var + eps) per row
};

template <typename T>
DenseArray<T> layer_norm(const DenseArray<T>& x, const DenseArray<T>& gain, const DenseArray<T>& bias, T eps,
                         LayerNormCache<T>* cache = nullptr) {
  if (!(eps > T(0))) throw ContractError("numkernel", "layer_norm eps must be positive");
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("numkernel", "layer_norm affine size mismatch: input " + shape_string(x.shape()) +
                                          ", gain " + shape_string(gain.shape()) + ", bias " +
                                          shape_string(bias.shape()));
  }
  DenseArray<T> y(x.shape());
  if (cache) {
    cache->normalized = DenseArray<T>(x.shape());
    cache->inv_std.assign(x.rows(), T(0));
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    T mean = 0;
    for (T v : in) mean += v;
    mean /= static_cast<T>(d);
    T var = 0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T inv_std = T(1) / std::sqrt(var + eps);
    auto out = y.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      const T xhat = (in[c] - mean) * inv_std;
      if (cache) cache->normalized(r, c) = xhat;
      out[c] = xhat * gain[c] + bias[c];
    }
    if (cache) cache->inv_std[r] = inv_std;
  }
  return y;
}

// Exact (erf-based) GELU.
template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

}  // namespace vdt::kernels
