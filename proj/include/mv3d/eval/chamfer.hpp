#pragma once

#include <cmath>

#include "mv3d/eval/kdtree.hpp"

namespace mv3d {

/// Directed mean nearest-neighbor distances (unsquared). accuracy: gen -> gt, completeness:
/// gt -> gen.
struct ChamferReport {
  double accuracy = 0.0;
  double completeness = 0.0;
  double cd = 0.0;
};

namespace detail {

inline double mean_nn_distance(const std::vector<Vec3>& from, const KdTree& to) {
  double s = 0.0;
  for (const auto& p : from) s += std::sqrt(to.nearest(p).sq_dist);
  return s / double(from.size());
}

inline ChamferReport make_chamfer(double acc, double comp) { return {acc, comp, (acc + comp) / 2.0}; }

}  // namespace detail

inline ChamferReport chamfer(const PointCloud& gen, const PointCloud& gt) {
  if (gen.empty() || gt.empty()) throw DegenerateConfiguration("chamfer distance of an empty point cloud");
  const KdTree tgen(gen.points), tgt(gt.points);
  return detail::make_chamfer(detail::mean_nn_distance(gen.points, tgt), detail::mean_nn_distance(gt.points, tgen));
}

/// O(N*M) reference implementation.
inline ChamferReport chamfer_brute_force(const PointCloud& gen, const PointCloud& gt) {
  if (gen.empty() || gt.empty()) throw DegenerateConfiguration("chamfer distance of an empty point cloud");
  auto directed = [](const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double s = 0.0;
    for (const auto& p : a) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : b) best = std::min(best, KdTree::sq_dist(p, q));
      s += std::sqrt(best);
    }
    return s / double(a.size());
  };
  return detail::make_chamfer(directed(gen.points, gt.points), directed(gt.points, gen.points));
}

}  // namespace mv3d
