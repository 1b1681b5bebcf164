#pragma once

// Dense 64-bit kernels shared by the model, the trainer and post-processing.

#include <Eigen/Dense>
#include <algorithm>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sond/error.hpp"

namespace sond {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline constexpr double kStatPoolEps = 1e-8;
inline constexpr double kLayerNormEps = 1e-8;
inline constexpr double kCosineNormFloor = 1e-12;

std::string shape_string(const Matrix& m);

/// x W + b, with b broadcast over rows.
Matrix affine(const Matrix& x, const Matrix& w, const RowVector& b);

Vector softmax(const Vector& v);
/// Row-wise softmax in place.
void softmax_rows(Matrix& m);

struct LayerNormCache {
  Matrix normalized;  // (x - mean) / std per row
  Vector inv_std;
};

Matrix layer_norm(const Matrix& x, const RowVector& gain, const RowVector& bias,
                  double eps = kLayerNormEps, LayerNormCache* cache = nullptr);

/// Returns dL/dx and accumulates dL/dgain, dL/dbias.
Matrix layer_norm_backward(const Matrix& grad_out, const RowVector& gain,
                           const LayerNormCache& cache, RowVector& grad_gain,
                           RowVector& grad_bias);

struct Cosine {
  double value = 0.0;
  bool degenerate = false;  // one of the inputs had norm below kCosineNormFloor
};

Cosine cosine(std::span<const double> u, std::span<const double> v);

/// Adds dcos/du * g to grad_u and dcos/dv * g to grad_v. No-op on degenerate input.
void cosine_backward(std::span<const double> u, std::span<const double> v, double g,
                     std::span<double> grad_u, std::span<double> grad_v);

/// Per frame t: [mean, std] of rows t-l/2 .. t+l/2, clipped to the sequence.
Matrix windowed_stat_pool(const Matrix& x, int window, double eps = kStatPoolEps);

Matrix windowed_stat_pool_backward(const Matrix& x, const Matrix& pooled,
                                   const Matrix& grad_pooled, int window);

/// Median over the clipped window [i - w/2, i + w/2]. Window must be odd.
template <typename T>
std::vector<T> median_filter(std::span<const T> seq, int window) {
  if (window < 1 || window % 2 == 0) {
    throw ConfigError("median filter window must be odd and >= 1, got " +
                      std::to_string(window));
  }
  const auto n = static_cast<std::ptrdiff_t>(seq.size());
  const std::ptrdiff_t half = window / 2;
  std::vector<T> out(seq.size());
  std::vector<T> buf;
  buf.reserve(static_cast<std::size_t>(window));
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto lo = std::max<std::ptrdiff_t>(0, i - half);
    const auto hi = std::min<std::ptrdiff_t>(n, i + half + 1);
    buf.assign(seq.begin() + lo, seq.begin() + hi);
    // Lower median for even-sized clipped windows.
    auto mid = buf.begin() + static_cast<std::ptrdiff_t>((buf.size() - 1) / 2);
    std::nth_element(buf.begin(), mid, buf.end());
    out[static_cast<std::size_t>(i)] = *mid;
  }
  return out;
}

struct GradCheckEntry {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t param_count = 0;
  std::vector<GradCheckEntry> worst;  // descending by rel_err
  bool passed = false;
};

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central differences against an analytic gradient.
///
/// Relative error per entry is |a - n| / max(|a|, |n|, abs_floor); the floor
/// keeps entries whose true gradient is ~0 from reporting pure roundoff.
GradCheckReport grad_check(const ScalarFn& loss, std::span<const double> params,
                           std::span<const double> analytic, double h, double tol,
                           double abs_floor = 1e-7, std::size_t keep_worst = 8);

}  // namespace sond
