#include "sond/clustering.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

namespace sond {
namespace {

constexpr int kKmeansIterations = 100;
constexpr int kKmeansReseeds = 5;

Matrix unit_rows(const Matrix& e) {
  Matrix u = e;
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    const double n = e.row(i).norm();
    if (n < kCosineNormFloor) {
      throw ClusteringError("embedding of chunk " + std::to_string(i) + " has zero norm");
    }
    u.row(i) /= n;
  }
  return u;
}

void check_affinity(const Matrix& a) {
  if (a.rows() != a.cols() || a.rows() < 1) {
    throw ShapeError("affinity must be square and non-empty, got " + shape_string(a));
  }
}

Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> laplacian_eigen(const Matrix& affinity) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(normalized_laplacian(affinity)));
  if (es.info() != Eigen::Success) throw NumericError("Laplacian eigendecomposition did not converge");
  return es;
}

// Returns false when some cluster ends up empty.
bool kmeans(const Matrix& x, int k, std::mt19937_64& rng, std::vector<int>& labels) {
  const Eigen::Index m = x.rows();
  Matrix centers(k, x.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, m - 1);
  centers.row(0) = x.row(pick(rng));
  std::vector<double> d2(static_cast<std::size_t>(m), std::numeric_limits<double>::infinity());
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      auto& d = d2[static_cast<std::size_t>(i)];
      d = std::min(d, (x.row(i) - centers.row(c - 1)).squaredNorm());
      total += d;
    }
    Eigen::Index chosen = pick(rng);
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (Eigen::Index i = 0; i < m; ++i) {
        r -= d2[static_cast<std::size_t>(i)];
        if (r <= 0.0) {
          chosen = i;
          break;
        }
      }
    }
    centers.row(c) = x.row(chosen);
  }

  labels.assign(static_cast<std::size_t>(m), -1);
  for (int iter = 0; iter < kKmeansIterations; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < m; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (x.row(i) - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (labels[static_cast<std::size_t>(i)] != best) {
        labels[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    Matrix sums = Matrix::Zero(k, x.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < m; ++i) {
      const int c = labels[static_cast<std::size_t>(i)];
      sums.row(c) += x.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) return false;
      centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    }
    if (!changed) break;
  }
  return true;
}

}  // namespace

Matrix build_affinity(const Matrix& embeddings) {
  if (embeddings.rows() < 1) throw ShapeError("build_affinity: no embeddings");
  const Matrix u = unit_rows(embeddings);
  Matrix a = ((u * u.transpose()).array() + 1.0) * 0.5;
  a = 0.5 * (a + a.transpose()).eval();
  a = a.cwiseMax(0.0).cwiseMin(1.0);
  a.diagonal().setOnes();
  return a;
}

Matrix pruned_affinity(const Matrix& embeddings, double keep_fraction) {
  if (keep_fraction <= 0.0 || keep_fraction > 1.0) {
    throw ConfigError("pruned_affinity: keep_fraction must lie in (0, 1]");
  }
  const Matrix full = build_affinity(embeddings);
  const Eigen::Index m = full.rows();
  const auto keep = std::max<Eigen::Index>(
      1, static_cast<Eigen::Index>(std::ceil(keep_fraction * static_cast<double>(m))));
  Matrix a = Matrix::Zero(m, m);
  std::vector<double> row(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) row[static_cast<std::size_t>(j)] = full(i, j);
    std::nth_element(row.begin(), row.begin() + (keep - 1), row.end(), std::greater<>());
    const double threshold = row[static_cast<std::size_t>(keep - 1)];
    for (Eigen::Index j = 0; j < m; ++j) {
      if (full(i, j) >= threshold) a(i, j) = full(i, j);
    }
  }
  a = 0.5 * (a + a.transpose()).eval();
  a.diagonal().setOnes();
  return a;
}

Matrix normalized_laplacian(const Matrix& affinity) {
  check_affinity(affinity);
  const Vector degree = affinity.rowwise().sum();
  Vector inv_sqrt(degree.size());
  for (Eigen::Index i = 0; i < degree.size(); ++i) {
    inv_sqrt(i) = degree(i) > 0.0 ? 1.0 / std::sqrt(degree(i)) : 0.0;
  }
  Matrix l = -(inv_sqrt.asDiagonal() * affinity * inv_sqrt.asDiagonal());
  l.diagonal().array() += 1.0;
  return 0.5 * (l + l.transpose());
}

int estimate_k(const Matrix& affinity, int k_max) {
  check_affinity(affinity);
  const auto m = static_cast<int>(affinity.rows());
  if (k_max < 1) throw ConfigError("estimate_k: k_max must be >= 1");
  if (k_max > m) throw ConfigError("estimate_k: k_max exceeds the chunk count");
  const int limit = std::min(k_max, m - 1);
  if (limit < 1) return 1;
  const Vector lambda = laplacian_eigen(affinity).eigenvalues();
  int best = 1;
  double best_gap = -std::numeric_limits<double>::infinity();
  for (int k = 1; k <= limit; ++k) {
    const double gap = lambda(k) - lambda(k - 1);
    if (gap > best_gap) {
      best_gap = gap;
      best = k;
    }
  }
  return best;
}

ClusterResult spectral_cluster(const Matrix& affinity, const Matrix& embeddings, int k,
                               std::uint64_t seed) {
  check_affinity(affinity);
  const Eigen::Index m = affinity.rows();
  if (embeddings.rows() != m) {
    throw ShapeError("spectral_cluster: " + std::to_string(embeddings.rows()) + " embeddings for a " +
                     shape_string(affinity) + " affinity");
  }
  if (k < 1 || k > m) throw ConfigError("spectral_cluster: k must lie in [1, m]");

  std::vector<int> labels;
  if (k == 1) {
    labels.assign(static_cast<std::size_t>(m), 0);
  } else {
    const auto es = laplacian_eigen(affinity);
    Matrix u = es.eigenvectors().leftCols(k);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double n = u.row(i).norm();
      if (n > 0.0) u.row(i) /= n;
    }
    std::mt19937_64 rng(seed);
    bool ok = false;
    for (int attempt = 0; attempt <= kKmeansReseeds && !ok; ++attempt) ok = kmeans(u, k, rng, labels);
    if (!ok) {
      throw ClusteringError("k-means left a cluster empty after " + std::to_string(kKmeansReseeds) +
                            " re-seeds");
    }
  }

  // Relabel by first occurrence so results do not depend on k-means label order.
  std::map<int, int> relabel;
  ClusterResult r;
  r.k = k;
  r.assignments.resize(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    const int old = labels[static_cast<std::size_t>(i)];
    const auto it = relabel.try_emplace(old, static_cast<int>(relabel.size())).first;
    r.assignments[static_cast<std::size_t>(i)] = it->second;
  }
  r.centroids = Matrix::Zero(k, embeddings.cols());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (Eigen::Index i = 0; i < m; ++i) {
    const int c = r.assignments[static_cast<std::size_t>(i)];
    r.centroids.row(c) += embeddings.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < k; ++c) r.centroids.row(c) /= counts[static_cast<std::size_t>(c)];
  return r;
}

std::vector<int> profile_order(const ClusterResult& result) {
  std::vector<int> size(static_cast<std::size_t>(result.k), 0);
  std::vector<std::size_t> first(static_cast<std::size_t>(result.k), result.assignments.size());
  for (std::size_t i = 0; i < result.assignments.size(); ++i) {
    const auto c = static_cast<std::size_t>(result.assignments[i]);
    ++size[c];
    first[c] = std::min(first[c], i);
  }
  std::vector<int> order(static_cast<std::size_t>(result.k));
  for (int c = 0; c < result.k; ++c) order[static_cast<std::size_t>(c)] = c;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto ua = static_cast<std::size_t>(a);
    const auto ub = static_cast<std::size_t>(b);
    return size[ua] != size[ub] ? size[ua] > size[ub] : first[ua] < first[ub];
  });
  return order;
}

ProfileSet extract_profiles(const ClusterResult& result, int slots) {
  if (result.k > slots) {
    throw ClusteringError("found " + std::to_string(result.k) + " speakers but only " +
                          std::to_string(slots) + " profile slots");
  }
  ProfileSet p = ProfileSet::zeros(slots, static_cast<int>(result.centroids.cols()));
  const std::vector<int> order = profile_order(result);
  for (std::size_t s = 0; s < order.size(); ++s) {
    p.vectors.row(static_cast<Eigen::Index>(s)) = result.centroids.row(order[s]);
    p.valid[s] = true;
  }
  return p;
}

ClusterResult cluster_embeddings(const Matrix& embeddings, const ClusterOptions& options) {
  const Eigen::Index m = embeddings.rows();
  if (m < 1) throw ClusteringError("no embeddings to cluster");
  const Matrix a = options.affinity ? options.affinity(embeddings) : pruned_affinity(embeddings);
  const int k = estimate_k(a, std::min<int>(options.k_max, static_cast<int>(m)));
  return spectral_cluster(a, embeddings, k, options.seed);
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw ShapeError("adjusted_rand_index: label vectors differ in length");
  const auto n = static_cast<double>(a.size());
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1.0;
    ra[a[i]] += 1.0;
    rb[b[i]] += 1.0;
  }
  const auto pairs = [](double x) { return 0.5 * x * (x - 1.0); };
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [_, c] : joint) index += pairs(c);
  for (const auto& [_, c] : ra) sa += pairs(c);
  for (const auto& [_, c] : rb) sb += pairs(c);
  const double expected = n > 1.0 ? sa * sb / pairs(n) : 0.0;
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return index == expected ? 1.0 : 0.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace sond
