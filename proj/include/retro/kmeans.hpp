#pragma once

#include <cstdint>
#include <vector>

#include "retro/common.hpp"

namespace retro {

/// Exact squared L2 distance, accumulated in double.
inline double squared_l2(const float* a, const float* b, Eigen::Index d) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    const double t = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += t * t;
  }
  return s;
}

struct KMeansResult {
  Mat<float> centroids;
  std::vector<int> assignment;
  /// Quantization objective (sum of squared distances) after every
  /// assignment step.
  std::vector<double> objective_trace;
};

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded from
/// the point farthest from its centroid. When `init` is given it replaces the
/// seeding step.
KMeansResult kmeans(const Mat<float>& points, int k, int iters, std::uint64_t seed, const Mat<float>* init = nullptr);

/// Index of the nearest row of `centroids` (ties to the lower index).
int nearest_centroid(const Mat<float>& centroids, const float* x);

}  // namespace retro
