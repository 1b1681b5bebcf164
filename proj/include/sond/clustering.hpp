#pragma once

// Speaker profiles for a long recording from chunk embeddings: affinity,
// eigengap speaker counting, spectral clustering and zero-padded profiles.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sond/model.hpp"
#include "sond/numerics.hpp"

namespace sond {

/// Maps m x P embeddings to a symmetric m x m affinity with unit diagonal.
using AffinityFn = std::function<Matrix(const Matrix&)>;

/// A[i][j] = (cos(e_i, e_j) + 1) / 2.
Matrix build_affinity(const Matrix& embeddings);

/// Cosine affinity keeping, per row, only the ceil(keep_fraction * m) largest
/// entries, then symmetrized as (A + A^T) / 2 with unit diagonal.
Matrix pruned_affinity(const Matrix& embeddings, double keep_fraction = 0.2);

/// I - D^-1/2 A D^-1/2.
Matrix normalized_laplacian(const Matrix& affinity);

/// Eigengap heuristic over k = 1..min(k_max, m - 1); ties go to the smaller k.
int estimate_k(const Matrix& affinity, int k_max);

struct ClusterResult {
  std::vector<int> assignments;  // cluster per chunk, labels in order of first occurrence
  int k = 0;
  Matrix centroids;  // k x P, means of member embeddings
};

/// k-means (k-means++ seeding, at most 100 iterations) on the row-normalized
/// k smallest eigenvectors of the normalized Laplacian.
ClusterResult spectral_cluster(const Matrix& affinity, const Matrix& embeddings, int k,
                               std::uint64_t seed);

/// Cluster ids in slot order: descending size, ties by first occurrence.
std::vector<int> profile_order(const ClusterResult& result);

/// Centroids in profile_order, then zero slots marked invalid.
ProfileSet extract_profiles(const ClusterResult& result, int slots);

struct ClusterOptions {
  int k_max = 16;
  std::uint64_t seed = 1;
  AffinityFn affinity;  // defaults to pruned_affinity
};

ClusterResult cluster_embeddings(const Matrix& embeddings, const ClusterOptions& options = {});

double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

}  // namespace sond
