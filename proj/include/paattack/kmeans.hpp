#pragma once

#include "paattack/core.hpp"
#include "paattack/random.hpp"

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace paattack {

struct KMeansResult {
  std::vector<int> assignments;     // 0-based cluster index per point
  Matrix<double> centroids;         // [K, w]
  std::vector<double> sse_history;  // within-cluster SSE after each centroid update
  int iterations = 0;
};

inline double within_cluster_sse(const Matrix<double>& points, const std::vector<int>& assign,
                                  const Matrix<double>& centroids) {
  double sse = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) sse += (points.row(i) - centroids.row(assign[i])).squaredNorm();
  return sse;
}

namespace detail {

inline Matrix<double> farthest_point_seeds(const Matrix<double>& points, int k, Rng& rng) {
  const auto m = points.rows();
  std::vector<bool> chosen(m, false);
  std::vector<double> nearest(m, std::numeric_limits<double>::infinity());
  Matrix<double> seeds(k, points.cols());
  auto take = [&](Eigen::Index idx, int slot) {
    chosen[idx] = true;
    seeds.row(slot) = points.row(idx);
    for (Eigen::Index i = 0; i < m; ++i)
      nearest[i] = std::min(nearest[i], (points.row(i) - points.row(idx)).squaredNorm());
  };
  take(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(m))), 0);
  for (int s = 1; s < k; ++s) {
    Eigen::Index best = -1;
    for (Eigen::Index i = 0; i < m; ++i) {
      if (chosen[i]) continue;
      if (best < 0 || nearest[i] > nearest[best]) best = i;
    }
    take(best, s);
  }
  return seeds;
}

inline std::vector<int> assign_nearest(const Matrix<double>& points, const Matrix<double>& centroids) {
  std::vector<int> out(points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      const double d = (points.row(i) - centroids.row(c)).squaredNorm();
      if (d < best) {
        best = d;
        out[i] = static_cast<int>(c);
      }
    }
  }
  return out;
}

// Moves, for every empty cluster, the point farthest from its own centroid
// (among clusters with more than one member) into the empty cluster.
inline void repair_empty(const Matrix<double>& points, std::vector<int>& assign, Matrix<double>& centroids) {
  const int k = static_cast<int>(centroids.rows());
  std::vector<int> sizes(k, 0);
  for (int a : assign) ++sizes[a];
  for (int c = 0; c < k; ++c) {
    if (sizes[c] > 0) continue;
    Eigen::Index pick = -1;
    double pick_dist = -1.0;
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      if (sizes[assign[i]] <= 1) continue;
      const double d = (points.row(i) - centroids.row(assign[i])).squaredNorm();
      if (d > pick_dist) {
        pick_dist = d;
        pick = i;
      }
    }
    --sizes[assign[pick]];
    assign[pick] = c;
    sizes[c] = 1;
    centroids.row(c) = points.row(pick);
  }
}

inline Matrix<double> cluster_means(const Matrix<double>& points, const std::vector<int>& assign, int k) {
  Matrix<double> sums = Matrix<double>::Zero(k, points.cols());
  std::vector<int> sizes(k, 0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    sums.row(assign[i]) += points.row(i);
    ++sizes[assign[i]];
  }
  for (int c = 0; c < k; ++c) sums.row(c) /= static_cast<double>(sizes[c]);
  return sums;
}

}  // namespace detail

// Lloyd's algorithm from farthest-point seeding; the first seed is drawn from
// `seed`. Stops at an assignment fixpoint or after max_iterations.
inline KMeansResult kmeans(const Matrix<double>& points, int k, std::uint64_t seed, int max_iterations = 300) {
  const auto m = points.rows();
  require(k >= 1, ErrorCode::Precondition, "K must be positive");
  require(k <= m, ErrorCode::OutOfRange, "K=" + std::to_string(k) + " exceeds point count " + std::to_string(m));
  Rng rng(derive_seed(seed, "kmeans"));
  KMeansResult out;
  out.centroids = detail::farthest_point_seeds(points, k, rng);
  std::vector<int> previous;
  for (int it = 0; it < max_iterations; ++it) {
    auto assign = detail::assign_nearest(points, out.centroids);
    detail::repair_empty(points, assign, out.centroids);
    out.iterations = it + 1;
    const bool converged = assign == previous;
    previous = assign;
    out.centroids = detail::cluster_means(points, assign, k);
    out.sse_history.push_back(within_cluster_sse(points, assign, out.centroids));
    if (converged) break;
  }
  out.assignments = std::move(previous);
  return out;
}

}  // namespace paattack
