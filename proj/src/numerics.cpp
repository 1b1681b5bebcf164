#include "sond/numerics.hpp"

#include <cmath>
#include <limits>

namespace sond {

std::string shape_string(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

Matrix affine(const Matrix& x, const Matrix& w, const RowVector& b) {
  if (x.cols() != w.rows()) {
    throw ShapeError("affine: input " + shape_string(x) + " incompatible with weight " +
                     shape_string(w));
  }
  if (b.size() != w.cols()) {
    throw ShapeError("affine: bias length " + std::to_string(b.size()) + " vs weight " +
                     shape_string(w));
  }
  Matrix out = x * w;
  out.rowwise() += b;
  return out;
}

Vector softmax(const Vector& v) {
  Vector out = (v.array() - v.maxCoeff()).exp();
  out /= out.sum();
  return out;
}

void softmax_rows(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
}

Matrix layer_norm(const Matrix& x, const RowVector& gain, const RowVector& bias, double eps,
                  LayerNormCache* cache) {
  if (gain.size() != x.cols() || bias.size() != x.cols()) {
    throw ShapeError("layer_norm: gain/bias length must equal " + std::to_string(x.cols()));
  }
  const auto cols = static_cast<double>(x.cols());
  Matrix normalized(x.rows(), x.cols());
  Vector inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).sum() / cols;
    const double var = (x.row(r).array() - mean).square().sum() / cols;
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    normalized.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = normalized.array().rowwise() * gain.array();
  out.rowwise() += bias;
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

Matrix layer_norm_backward(const Matrix& grad_out, const RowVector& gain,
                           const LayerNormCache& cache, RowVector& grad_gain,
                           RowVector& grad_bias) {
  const Matrix& xhat = cache.normalized;
  grad_gain += (grad_out.array() * xhat.array()).colwise().sum().matrix();
  grad_bias += grad_out.colwise().sum();
  const Matrix dxhat = grad_out.array().rowwise() * gain.array();
  Matrix dx(dxhat.rows(), dxhat.cols());
  const auto cols = static_cast<double>(dxhat.cols());
  for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() / cols;
    const double mean_dx = dxhat.row(r).dot(xhat.row(r)) / cols;
    dx.row(r) = cache.inv_std(r) *
                (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

Cosine cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("cosine: vector lengths differ");
  double dot = 0.0;
  double uu = 0.0;
  double vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  const double nu = std::sqrt(uu);
  const double nv = std::sqrt(vv);
  if (nu < kCosineNormFloor || nv < kCosineNormFloor) return {0.0, true};
  return {std::clamp(dot / (nu * nv), -1.0, 1.0), false};
}

void cosine_backward(std::span<const double> u, std::span<const double> v, double g,
                     std::span<double> grad_u, std::span<double> grad_v) {
  double dot = 0.0;
  double uu = 0.0;
  double vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  const double nu = std::sqrt(uu);
  const double nv = std::sqrt(vv);
  if (nu < kCosineNormFloor || nv < kCosineNormFloor) return;
  const double inv = 1.0 / (nu * nv);
  const double c = dot * inv;
  for (std::size_t i = 0; i < u.size(); ++i) {
    grad_u[i] += g * (v[i] * inv - c * u[i] / uu);
    grad_v[i] += g * (u[i] * inv - c * v[i] / vv);
  }
}

Matrix windowed_stat_pool(const Matrix& x, int window, double eps) {
  if (window < 1) throw ConfigError("stat pool window must be >= 1");
  const Eigen::Index frames = x.rows();
  const Eigen::Index feats = x.cols();
  const Eigen::Index half = window / 2;
  Matrix out(frames, 2 * feats);
  for (Eigen::Index t = 0; t < frames; ++t) {
    const Eigen::Index lo = std::max<Eigen::Index>(0, t - half);
    const Eigen::Index hi = std::min<Eigen::Index>(frames, t + half + 1);
    const auto block = x.middleRows(lo, hi - lo);
    const RowVector mean = block.colwise().mean();
    const RowVector var = (block.rowwise() - mean).array().square().colwise().mean().matrix();
    out.row(t).head(feats) = mean;
    out.row(t).tail(feats) = (var.array() + eps).sqrt().matrix();
  }
  return out;
}

Matrix windowed_stat_pool_backward(const Matrix& x, const Matrix& pooled,
                                   const Matrix& grad_pooled, int window) {
  const Eigen::Index frames = x.rows();
  const Eigen::Index feats = x.cols();
  const Eigen::Index half = window / 2;
  Matrix dx = Matrix::Zero(frames, feats);
  for (Eigen::Index t = 0; t < frames; ++t) {
    const Eigen::Index lo = std::max<Eigen::Index>(0, t - half);
    const Eigen::Index hi = std::min<Eigen::Index>(frames, t + half + 1);
    const double inv_n = 1.0 / static_cast<double>(hi - lo);
    const RowVector mean = pooled.row(t).head(feats);
    const RowVector gm = grad_pooled.row(t).head(feats) * inv_n;
    const RowVector gs =
        (grad_pooled.row(t).tail(feats).array() / pooled.row(t).tail(feats).array()).matrix() *
        inv_n;
    for (Eigen::Index s = lo; s < hi; ++s) {
      dx.row(s) += gm + ((x.row(s) - mean).array() * gs.array()).matrix();
    }
  }
  return dx;
}

GradCheckReport grad_check(const ScalarFn& loss, std::span<const double> params,
                           std::span<const double> analytic, double h, double tol,
                           double abs_floor, std::size_t keep_worst) {
  if (params.size() != analytic.size()) {
    throw ShapeError("grad_check: gradient length differs from parameter count");
  }
  if (!(h >= 1e-5 && h <= 1e-3)) throw ConfigError("grad_check: step must lie in [1e-5, 1e-3]");
  std::vector<double> theta(params.begin(), params.end());
  GradCheckReport report;
  report.param_count = theta.size();
  std::vector<GradCheckEntry> entries;
  entries.reserve(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    theta[i] = saved + h;
    const double plus = loss(theta);
    theta[i] = saved - h;
    const double minus = loss(theta);
    theta[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NumericError("grad_check: non-finite loss while probing parameter " +
                         std::to_string(i));
    }
    const double numeric = (plus - minus) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), abs_floor});
    entries.push_back({i, analytic[i], numeric, std::abs(analytic[i] - numeric) / denom});
  }
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.rel_err > b.rel_err; });
  if (!entries.empty()) report.max_rel_err = entries.front().rel_err;
  entries.resize(std::min(keep_worst, entries.size()));
  report.worst = std::move(entries);
  report.passed = report.max_rel_err < tol;
  return report;
}

}  // namespace sond
