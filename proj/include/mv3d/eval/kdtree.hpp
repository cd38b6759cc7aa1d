#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "mv3d/eval/pointcloud.hpp"

namespace mv3d {

/// Exact 3-D k-d tree over a borrowed point array. Distances are computed with the same
/// expression as a brute-force scan, so nearest distances match it bit for bit.
class KdTree {
 public:
  struct Hit {
    std::size_t index = 0;
    double sq_dist = std::numeric_limits<double>::infinity();
  };

  explicit KdTree(const std::vector<Vec3>& points) : pts_(&points) {
    MV3D_REQUIRE(!points.empty(), "k-d tree over an empty point set");
    idx_.resize(points.size());
    std::iota(idx_.begin(), idx_.end(), std::size_t{0});
    nodes_.reserve(2 * points.size() / kLeaf + 2);
    build(0, idx_.size());
  }

  static double sq_dist(const Vec3& a, const Vec3& b) { return (a - b).squaredNorm(); }

  /// Nearest point; `skip` excludes one index (a query point's own entry).
  Hit nearest(const Vec3& q, std::size_t skip = npos) const {
    Hit best;
    nearest(0, q, skip, best);
    return best;
  }

  static constexpr std::size_t npos = std::size_t(-1);

  /// Indices with squared distance <= r*r, in ascending index order.
  std::vector<std::size_t> radius(const Vec3& q, double r) const {
    std::vector<std::size_t> out;
    radius(0, q, r * r, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::size_t size() const { return idx_.size(); }

 private:
  static constexpr std::size_t kLeaf = 8;

  struct Node {
    std::size_t begin = 0, end = 0;
    int axis = -1;  // -1: leaf
    double split = 0.0;
    std::size_t left = 0, right = 0;
  };

  std::size_t build(std::size_t b, std::size_t e) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({b, e});
    if (e - b <= kLeaf) return id;
    Vec3 lo = (*pts_)[idx_[b]], hi = lo;
    for (std::size_t i = b; i < e; ++i) {
      lo = lo.cwiseMin((*pts_)[idx_[i]]);
      hi = hi.cwiseMax((*pts_)[idx_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] - lo[axis] <= 0.0) return id;  // all points coincide
    const std::size_t mid = b + (e - b) / 2;
    std::nth_element(idx_.begin() + std::ptrdiff_t(b), idx_.begin() + std::ptrdiff_t(mid),
                     idx_.begin() + std::ptrdiff_t(e),
                     [&](std::size_t x, std::size_t y) { return (*pts_)[x][axis] < (*pts_)[y][axis]; });
    const double split = (*pts_)[idx_[mid]][axis];
    const std::size_t l = build(b, mid);
    const std::size_t r = build(mid, e);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void nearest(std::size_t n, const Vec3& q, std::size_t skip, Hit& best) const {
    const Node& nd = nodes_[n];
    if (nd.axis < 0) {
      for (std::size_t i = nd.begin; i < nd.end; ++i) {
        if (idx_[i] == skip) continue;
        const double d = sq_dist(q, (*pts_)[idx_[i]]);
        if (d < best.sq_dist || (d == best.sq_dist && idx_[i] < best.index)) best = {idx_[i], d};
      }
      return;
    }
    const double diff = q[nd.axis] - nd.split;
    const std::size_t near = diff < 0 ? nd.left : nd.right;
    const std::size_t far = diff < 0 ? nd.right : nd.left;
    nearest(near, q, skip, best);
    if (diff * diff <= best.sq_dist) nearest(far, q, skip, best);
  }

  void radius(std::size_t n, const Vec3& q, double r2, std::vector<std::size_t>& out) const {
    const Node& nd = nodes_[n];
    if (nd.axis < 0) {
      for (std::size_t i = nd.begin; i < nd.end; ++i)
        if (sq_dist(q, (*pts_)[idx_[i]]) <= r2) out.push_back(idx_[i]);
      return;
    }
    const double diff = q[nd.axis] - nd.split;
    if (diff <= 0 || diff * diff <= r2) radius(nd.left, q, r2, out);
    if (diff >= 0 || diff * diff <= r2) radius(nd.right, q, r2, out);
  }

  const std::vector<Vec3>* pts_;
  std::vector<std::size_t> idx_;
  std::vector<Node> nodes_;
};

}  // namespace mv3d
