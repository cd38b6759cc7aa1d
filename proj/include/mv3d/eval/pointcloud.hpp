#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "mv3d/core/error.hpp"

namespace mv3d {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> colors;   // empty or one per point, components in [0, 1]
  std::vector<Vec3> normals;  // empty or one unit vector per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_colors() const { return !colors.empty(); }
  bool has_normals() const { return !normals.empty(); }

  void append(const PointCloud& o) {
    const bool c = (empty() || has_colors()) && o.has_colors();
    points.insert(points.end(), o.points.begin(), o.points.end());
    if (c)
      colors.insert(colors.end(), o.colors.begin(), o.colors.end());
    else
      colors.clear();
    normals.clear();
  }

  PointCloud subset(const std::vector<std::size_t>& idx) const {
    PointCloud out;
    for (std::size_t i : idx) {
      out.points.push_back(points[i]);
      if (has_colors()) out.colors.push_back(colors[i]);
      if (has_normals()) out.normals.push_back(normals[i]);
    }
    return out;
  }

  Vec3 centroid() const {
    MV3D_REQUIRE(!empty(), "centroid of an empty cloud");
    Vec3 c = Vec3::Zero();
    for (const auto& p : points) c += p;
    return c / double(size());
  }

  double bbox_diagonal() const {
    MV3D_REQUIRE(!empty(), "bounding box of an empty cloud");
    Vec3 lo = points[0], hi = points[0];
    for (const auto& p : points) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    return (hi - lo).norm();
  }
};

/// x -> s R x + t
struct SimilarityTransform {
  double s = 1.0;
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return s * (R * x) + t; }

  PointCloud apply(const PointCloud& c) const {
    PointCloud out = c;
    for (auto& p : out.points) p = apply(p);
    for (auto& n : out.normals) n = R * n;
    return out;
  }

  SimilarityTransform inverse() const {
    MV3D_REQUIRE(s > 0, "similarity scale must be positive");
    SimilarityTransform inv;
    inv.s = 1.0 / s;
    inv.R = R.transpose();
    inv.t = -(inv.R * t) / s;
    return inv;
  }

  // this after other
  SimilarityTransform compose(const SimilarityTransform& other) const {
    SimilarityTransform c;
    c.s = s * other.s;
    c.R = R * other.R;
    c.t = s * (R * other.t) + t;
    return c;
  }
};

/// Geodesic angle between two rotations, radians.
inline double rotation_angle(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

}  // namespace mv3d
