#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sond/clustering.hpp"
#include "tiny_model.hpp"

using namespace sond;
using sond::testing::random_matrix;

namespace {

// Points scattered around `k` well-separated centres, interleaved in order.
Matrix planted(int k, int per, int dim, double spread, std::mt19937_64& rng, std::vector<int>& truth) {
  // Orthogonal centres, 5 * sqrt(2) apart.
  const Matrix centres = 5.0 * Matrix::Identity(k, dim);
  Matrix e(k * per, dim);
  truth.clear();
  std::uniform_int_distribution<int> pick(0, k - 1);
  for (int i = 0; i < k * per; ++i) {
    const int c = i < k ? i : pick(rng);
    truth.push_back(c);
    e.row(i) = centres.row(c) + random_matrix(1, dim, rng, spread);
  }
  return e;
}

double pair_count_ari(const std::vector<int>& a, const std::vector<int>& b) {
  double both = 0, sa = 0, sb = 0, all = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      both += a[i] == a[j] && b[i] == b[j];
      sa += a[i] == a[j];
      sb += b[i] == b[j];
      all += 1;
    }
  }
  const double expected = sa * sb / all;
  return (both - expected) / (0.5 * (sa + sb) - expected);
}

}  // namespace

TEST(Affinity, CosineMapping) {
  Matrix e(3, 2);
  e << 1, 0, 0, 2, -3, 0;
  const Matrix a = build_affinity(e);
  EXPECT_DOUBLE_EQ(a(0, 0), 1.0);
  EXPECT_NEAR(a(0, 1), 0.5, 1e-12);
  EXPECT_NEAR(a(0, 2), 0.0, 1e-12);
  EXPECT_EQ(a, a.transpose());
  Matrix zero = e;
  zero.row(1).setZero();
  EXPECT_THROW(build_affinity(zero), ClusteringError);
}

TEST(Affinity, PrunedKeepsTopEntriesPerRow) {
  std::mt19937_64 rng(1);
  const Matrix e = random_matrix(10, 4, rng);
  const Matrix full = build_affinity(e);
  const Matrix p = pruned_affinity(e, 0.2);
  EXPECT_TRUE(p.isApprox(p.transpose(), 0.0));
  for (int i = 0; i < 10; ++i) {
    EXPECT_DOUBLE_EQ(p(i, i), 1.0);
    int nonzero_half = 0;
    for (int j = 0; j < 10; ++j) {
      if (i == j) continue;
      const double v = p(i, j);
      EXPECT_TRUE(v == 0.0 || std::abs(v - full(i, j)) < 1e-12 || std::abs(v - 0.5 * full(i, j)) < 1e-12);
      nonzero_half += v != 0.0;
    }
    EXPECT_GE(nonzero_half, 1);
  }
  EXPECT_TRUE(pruned_affinity(e, 1.0).isApprox(full, 1e-12));
}

TEST(Laplacian, Examples) {
  const Matrix ones = Matrix::Ones(4, 4);
  const Matrix l = normalized_laplacian(ones);
  EXPECT_LT((l - (Matrix::Identity(4, 4) - ones / 4.0)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(estimate_k(ones, 3), 1);
}

TEST(EstimateK, BlockDiagonal) {
  for (int blocks : {2, 3, 5}) {
    const int size = 4;
    Matrix a = Matrix::Zero(blocks * size, blocks * size);
    for (int b = 0; b < blocks; ++b) a.block(b * size, b * size, size, size).setOnes();
    a.array() += 1e-3;
    a.diagonal().setOnes();
    EXPECT_EQ(estimate_k(a, 8), blocks);
  }
  EXPECT_THROW(estimate_k(Matrix::Identity(3, 3), 4), ConfigError);
  EXPECT_EQ(estimate_k(Matrix::Ones(1, 1), 1), 1);
}

TEST(SpectralCluster, RecoversPlantedClusters) {
  std::mt19937_64 rng(3);
  int exact = 0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> truth;
    const Matrix e = planted(4, 50, 16, 1.0, rng, truth);
    ClusterOptions opt;
    opt.seed = static_cast<std::uint64_t>(trial);
    const ClusterResult r = cluster_embeddings(e, opt);
    exact += r.k == 4 && adjusted_rand_index(r.assignments, truth) == 1.0;
  }
  EXPECT_GE(exact, 9);
}

TEST(SpectralCluster, LabelsCentroidsAndExtremes) {
  std::mt19937_64 rng(4);
  std::vector<int> truth;
  const Matrix e = planted(3, 20, 8, 1.0, rng, truth);
  const Matrix a = pruned_affinity(e);
  const ClusterResult r = spectral_cluster(a, e, 3, 7);
  int next = 0;
  for (int label : r.assignments) {
    EXPECT_LE(label, next);
    if (label == next) ++next;
  }
  EXPECT_EQ(next, 3);
  for (int c = 0; c < 3; ++c) {
    RowVector sum = RowVector::Zero(8);
    int count = 0;
    for (std::size_t i = 0; i < r.assignments.size(); ++i) {
      if (r.assignments[i] == c) {
        sum += e.row(static_cast<Eigen::Index>(i));
        ++count;
      }
    }
    EXPECT_LT((r.centroids.row(c) - sum / count).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_EQ(spectral_cluster(a, e, 3, 7).assignments, r.assignments);

  const ClusterResult one = spectral_cluster(a, e, 1, 1);
  EXPECT_TRUE(std::all_of(one.assignments.begin(), one.assignments.end(), [](int x) { return x == 0; }));
  EXPECT_LT((one.centroids.row(0) - e.colwise().mean()).cwiseAbs().maxCoeff(), 1e-12);

  const Matrix small = e.topRows(5);
  const ClusterResult all = spectral_cluster(build_affinity(small), small, 5, 1);
  EXPECT_EQ(all.assignments, (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_THROW(spectral_cluster(a, e, 0, 1), ConfigError);
}

TEST(Profiles, OrderAndPadding) {
  ClusterResult r;
  r.k = 3;
  r.assignments = {0, 1, 1, 2, 2, 0, 1};
  r.centroids = Matrix(3, 2);
  r.centroids << 0, 0, 1, 1, 2, 2;
  EXPECT_EQ(profile_order(r), (std::vector<int>{1, 0, 2}));
  const ProfileSet p = extract_profiles(r, 5);
  EXPECT_EQ(p.valid, (std::vector<bool>{true, true, true, false, false}));
  EXPECT_EQ(p.vectors.row(0), r.centroids.row(1));
  EXPECT_EQ(p.vectors.row(2), r.centroids.row(2));
  EXPECT_TRUE(p.vectors.bottomRows(2).isZero(0.0));
  EXPECT_THROW(extract_profiles(r, 2), ClusteringError);
}

TEST(Ari, ExamplesAndPairOracle) {
  const std::vector<int> a{0, 0, 1, 1}, swapped{1, 1, 0, 0}, cross{0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(adjusted_rand_index(a, swapped), 1.0);
  EXPECT_NEAR(adjusted_rand_index(a, cross), -0.5, 1e-12);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> x(30), y(30);
    for (int i = 0; i < 30; ++i) {
      x[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 4);
      y[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 3);
    }
    EXPECT_NEAR(adjusted_rand_index(x, y), pair_count_ari(x, y), 1e-12);
  }
}
