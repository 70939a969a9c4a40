#include "retro/kmeans.hpp"

#include <limits>
#include <random>

namespace retro {

namespace {

using MatD = Mat<double>;

// Assigns every point to its nearest centroid; returns per-point distances.
std::vector<double> assign_all(const Mat<float>& points, const MatD& centroids, std::vector<int>& assignment) {
  const Eigen::Index n = points.rows();
  const Eigen::Index k = centroids.rows();
  const Eigen::Index d = points.cols();
  std::vector<double> dist(static_cast<std::size_t>(n));
  assignment.resize(static_cast<std::size_t>(n));
  const Eigen::VectorXd cnorm = centroids.rowwise().squaredNorm();
  constexpr Eigen::Index kBlock = 2048;
  for (Eigen::Index start = 0; start < n; start += kBlock) {
    const Eigen::Index rows = std::min(kBlock, n - start);
    const MatD block = points.middleRows(start, rows).cast<double>();
    const MatD dots = block * centroids.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      // Rank by the expanded form, then confirm the winner exactly.
      const double xnorm = block.row(r).squaredNorm();
      double best = std::numeric_limits<double>::infinity();
      Eigen::Index arg = 0;
      for (Eigen::Index c = 0; c < k; ++c) {
        const double v = xnorm - 2.0 * dots(r, c) + cnorm(c);
        if (v < best) {
          best = v;
          arg = c;
        }
      }
      double exact = 0.0;
      for (Eigen::Index j = 0; j < d; ++j) {
        const double t = block(r, j) - centroids(arg, j);
        exact += t * t;
      }
      assignment[static_cast<std::size_t>(start + r)] = static_cast<int>(arg);
      dist[static_cast<std::size_t>(start + r)] = exact;
    }
  }
  return dist;
}

MatD seed_plus_plus(const Mat<float>& points, int k, std::mt19937_64& rng) {
  const Eigen::Index n = points.rows();
  MatD centroids(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::Index first = pick(rng);
  centroids.row(0) = points.row(first).cast<double>();
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    d2[static_cast<std::size_t>(i)] = (points.row(i).cast<double>() - centroids.row(0)).squaredNorm();
  }
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    Eigen::Index chosen = 0;
    if (total <= 0.0) {
      chosen = pick(rng);
    } else {
      double target = unit(rng) * total;
      chosen = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        target -= d2[static_cast<std::size_t>(i)];
        if (target < 0.0) {
          chosen = i;
          break;
        }
      }
    }
    centroids.row(c) = points.row(chosen).cast<double>();
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = (points.row(i).cast<double>() - centroids.row(c)).squaredNorm();
      auto& cur = d2[static_cast<std::size_t>(i)];
      if (v < cur) cur = v;
    }
  }
  return centroids;
}

}  // namespace

int nearest_centroid(const Mat<float>& centroids, const float* x) {
  double best = std::numeric_limits<double>::infinity();
  int arg = 0;
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double v = squared_l2(centroids.row(c).data(), x, centroids.cols());
    if (v < best) {
      best = v;
      arg = static_cast<int>(c);
    }
  }
  return arg;
}

KMeansResult kmeans(const Mat<float>& points, int k, int iters, std::uint64_t seed, const Mat<float>* init) {
  if (k < 1) throw ConfigError("kmeans: k must be >= 1");
  if (points.rows() < k) {
    throw ConfigError("kmeans: " + std::to_string(points.rows()) + " points cannot form " + std::to_string(k) +
                      " clusters");
  }
  std::mt19937_64 rng(seed);
  MatD centroids;
  if (init) {
    if (init->rows() != k || init->cols() != points.cols()) throw ShapeError("kmeans: init shape mismatch");
    centroids = init->cast<double>();
  } else {
    centroids = seed_plus_plus(points, k, rng);
  }

  KMeansResult result;
  const Eigen::Index d = points.cols();
  for (int it = 0; it <= iters; ++it) {
    auto dist = assign_all(points, centroids, result.assignment);
    double objective = 0.0;
    for (double v : dist) objective += v;
    result.objective_trace.push_back(objective);
    if (it == iters) break;

    MatD sums = MatD::Zero(k, d);
    std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      const int c = result.assignment[static_cast<std::size_t>(i)];
      sums.row(c) += points.row(i).cast<double>();
      ++counts[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
        continue;
      }
      // Empty: move to the point currently worst served.
      std::size_t far = 0;
      for (std::size_t i = 1; i < dist.size(); ++i) {
        if (dist[i] > dist[far]) far = i;
      }
      centroids.row(c) = points.row(static_cast<Eigen::Index>(far)).cast<double>();
      dist[far] = 0.0;
    }
  }
  result.centroids = centroids.cast<float>();
  return result;
}

}  // namespace retro
