#pragma once

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <tuple>

#include "mv3d/core/rng.hpp"
#include "mv3d/eval/kdtree.hpp"

namespace mv3d {

// ---------------------------------------------------------------------------------------------
// Umeyama

/// Closed-form least squares for sum_i w_i |dst_i - (s R src_i + t)|^2. With with_scale
/// false the fit is rigid (s = 1).
inline SimilarityTransform umeyama(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                   const std::vector<double>* weights = nullptr, bool with_scale = true) {
  MV3D_REQUIRE(src.size() == dst.size(), "umeyama needs paired point sets of equal size");
  if (src.size() < 3) throw DegenerateConfiguration("umeyama needs at least 3 point pairs, got " +
                                                    std::to_string(src.size()));
  MV3D_REQUIRE(!weights || weights->size() == src.size(), "one weight per pair expected");
  double wsum = 0.0;
  Vec3 mu_x = Vec3::Zero(), mu_y = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    MV3D_REQUIRE(w >= 0.0, "umeyama weights must be non-negative");
    wsum += w;
    mu_x += w * src[i];
    mu_y += w * dst[i];
  }
  if (!(wsum > 0.0)) throw DegenerateConfiguration("umeyama weights sum to zero");
  mu_x /= wsum;
  mu_y /= wsum;
  Mat3 cov_xy = Mat3::Zero(), cov_xx = Mat3::Zero();
  double var_x = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double w = (weights ? (*weights)[i] : 1.0) / wsum;
    const Vec3 x = src[i] - mu_x, y = dst[i] - mu_y;
    cov_xy += w * y * x.transpose();
    cov_xx += w * x * x.transpose();
    var_x += w * x.squaredNorm();
  }
  const Eigen::Vector3d sx = Eigen::JacobiSVD<Mat3>(cov_xx).singularValues();
  if (!(sx[0] > 0.0) || sx[1] <= 1e-12 * sx[0])
    throw DegenerateConfiguration("umeyama: source points are collinear or coincident");
  Eigen::JacobiSVD<Mat3> svd(cov_xy, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d d = svd.singularValues();
  if (!(d[0] > 0.0) || d[1] <= 1e-12 * d[0])
    throw DegenerateConfiguration("umeyama: cross-covariance has rank < 2");
  Mat3 S = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) S(2, 2) = -1.0;
  SimilarityTransform T;
  T.R = svd.matrixU() * S * svd.matrixV().transpose();
  T.s = with_scale ? (d.asDiagonal() * S).trace() / var_x : 1.0;
  T.t = mu_y - T.s * T.R * mu_x;
  return T;
}

inline double mean_squared_residual(const SimilarityTransform& T, const std::vector<Vec3>& src,
                                    const std::vector<Vec3>& dst) {
  MV3D_REQUIRE(src.size() == dst.size() && !src.empty(), "residual needs equal, non-empty point sets");
  double s = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) s += (dst[i] - T.apply(src[i])).squaredNorm();
  return s / double(src.size());
}

// ---------------------------------------------------------------------------------------------
// Preprocessing

/// Averages points (and colors) per cubic cell; output ordered by cell.
inline PointCloud voxel_downsample(const PointCloud& c, double voxel) {
  MV3D_REQUIRE(voxel > 0.0, "voxel size must be positive");
  MV3D_REQUIRE(!c.empty(), "cannot downsample an empty cloud");
  Vec3 lo = c.points[0];
  for (const auto& p : c.points) lo = lo.cwiseMin(p);
  struct Acc {
    Vec3 p = Vec3::Zero(), col = Vec3::Zero();
    int n = 0;
  };
  std::map<std::array<long long, 3>, Acc> cells;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Vec3 g = (c.points[i] - lo) / voxel;
    Acc& a = cells[{(long long)std::floor(g[0]), (long long)std::floor(g[1]), (long long)std::floor(g[2])}];
    a.p += c.points[i];
    if (c.has_colors()) a.col += c.colors[i];
    ++a.n;
  }
  PointCloud out;
  for (const auto& [key, a] : cells) {
    out.points.push_back(a.p / a.n);
    if (c.has_colors()) out.colors.push_back(a.col / a.n);
  }
  return out;
}

struct NormalEstimate {
  std::vector<Vec3> normals;
  std::vector<std::uint8_t> degenerate;  // fewer than 3 neighbors or a collinear neighborhood
};

/// Smallest-eigenvector PCA normals over a radius neighborhood, flipped to point away from
/// the cloud centroid.
inline NormalEstimate estimate_normals(const PointCloud& c, double radius, const KdTree& tree) {
  NormalEstimate out;
  out.normals.assign(c.size(), Vec3::Zero());
  out.degenerate.assign(c.size(), 0);
  const Vec3 centroid = c.centroid();
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto nb = tree.radius(c.points[i], radius);
    if (nb.size() < 3) {
      out.degenerate[i] = 1;
      continue;
    }
    Vec3 mu = Vec3::Zero();
    for (auto j : nb) mu += c.points[j];
    mu /= double(nb.size());
    Mat3 cov = Mat3::Zero();
    for (auto j : nb) cov += (c.points[j] - mu) * (c.points[j] - mu).transpose();
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    const Vec3 ev = es.eigenvalues();  // ascending
    if (ev[1] <= 1e-12 * std::max(ev[2], 1e-300)) {
      out.degenerate[i] = 1;
      continue;
    }
    Vec3 n = es.eigenvectors().col(0).normalized();
    if (n.dot(c.points[i] - centroid) < 0) n = -n;
    out.normals[i] = n;
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// FPFH

inline constexpr int kFpfhBins = 11;
inline constexpr int kFpfhDim = 3 * kFpfhBins;
using FpfhFeature = std::array<double, kFpfhDim>;

struct FpfhFeatures {
  std::vector<FpfhFeature> features;
  std::vector<Vec3> normals;
  std::vector<std::uint8_t> degenerate;  // zero feature, flagged
  std::size_t degenerate_count() const {
    std::size_t n = 0;
    for (auto d : degenerate) n += d;
    return n;
  }
};

namespace detail {

inline int fpfh_bin(double v, double lo, double hi) {
  const int b = int(std::floor((v - lo) / (hi - lo) * kFpfhBins));
  return std::clamp(b, 0, kFpfhBins - 1);
}

// Darboux-frame angles (theta, alpha, phi) of a point pair; the source is the point whose
// normal is closer to parallel with the connecting line.
inline std::optional<std::array<double, 3>> pair_features(const Vec3& p1, const Vec3& n1, const Vec3& p2,
                                                          const Vec3& n2) {
  Vec3 d = p2 - p1;
  const double len = d.norm();
  if (len == 0.0) return std::nullopt;
  d /= len;
  Vec3 ns = n1, nt = n2;
  if (std::acos(std::min(std::abs(n1.dot(d)), 1.0)) > std::acos(std::min(std::abs(n2.dot(d)), 1.0))) {
    std::swap(ns, nt);
    d = -d;
  }
  const Vec3 u = ns;
  Vec3 v = u.cross(d);
  if (v.norm() < 1e-12) return std::nullopt;
  v.normalize();
  const Vec3 w = u.cross(v);
  return std::array<double, 3>{std::atan2(w.dot(nt), u.dot(nt)), v.dot(nt), u.dot(d)};
}

inline void normalize_blocks(FpfhFeature& f) {
  for (int b = 0; b < 3; ++b) {
    double s = 0.0;
    for (int k = 0; k < kFpfhBins; ++k) s += f[std::size_t(b * kFpfhBins + k)];
    if (s > 0)
      for (int k = 0; k < kFpfhBins; ++k) f[std::size_t(b * kFpfhBins + k)] *= 100.0 / s;
  }
}

}  // namespace detail

/// Fast point feature histograms: per-point SPFH over the feature radius, then
/// FPFH(p) = SPFH(p) + (1/k) sum_k SPFH(p_k) / |p - p_k|, each 11-bin block scaled to sum 100.
inline FpfhFeatures fpfh(const PointCloud& c, double normal_radius, double feature_radius) {
  MV3D_REQUIRE(c.size() >= 10, "fpfh needs at least 10 points, got " + std::to_string(c.size()));
  MV3D_REQUIRE(normal_radius > 0 && feature_radius > 0, "fpfh radii must be positive");
  const KdTree tree(c.points);
  NormalEstimate ne = estimate_normals(c, normal_radius, tree);
  const std::size_t n = c.size();
  std::vector<std::vector<std::size_t>> nbrs(n);
  std::vector<FpfhFeature> spfh(n);
  for (std::size_t i = 0; i < n; ++i) {
    spfh[i].fill(0.0);
    if (ne.degenerate[i]) continue;
    nbrs[i] = tree.radius(c.points[i], feature_radius);
    for (auto j : nbrs[i]) {
      if (j == i || ne.degenerate[j]) continue;
      const auto f = detail::pair_features(c.points[i], ne.normals[i], c.points[j], ne.normals[j]);
      if (!f) continue;
      spfh[i][std::size_t(detail::fpfh_bin((*f)[0], -std::numbers::pi, std::numbers::pi))] += 1;
      spfh[i][std::size_t(kFpfhBins + detail::fpfh_bin((*f)[1], -1.0, 1.0))] += 1;
      spfh[i][std::size_t(2 * kFpfhBins + detail::fpfh_bin((*f)[2], -1.0, 1.0))] += 1;
    }
    detail::normalize_blocks(spfh[i]);
  }
  FpfhFeatures out;
  out.features.resize(n);
  out.normals = ne.normals;
  out.degenerate = ne.degenerate;
  for (std::size_t i = 0; i < n; ++i) {
    FpfhFeature f{};
    bool any = false;
    if (!ne.degenerate[i]) {
      FpfhFeature agg{};
      int k = 0;
      for (auto j : nbrs[i]) {
        if (j == i || ne.degenerate[j]) continue;
        const double dist = (c.points[i] - c.points[j]).norm();
        if (dist == 0.0) continue;
        for (int b = 0; b < kFpfhDim; ++b) agg[std::size_t(b)] += spfh[j][std::size_t(b)] / dist;
        ++k;
      }
      for (int b = 0; b < kFpfhDim; ++b)
        f[std::size_t(b)] = spfh[i][std::size_t(b)] + (k > 0 ? agg[std::size_t(b)] / k : 0.0);
      detail::normalize_blocks(f);
      for (double v : f) any = any || v > 0;
    }
    if (!any) out.degenerate[i] = 1;
    out.features[i] = f;
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// RANSAC

struct RansacParams {
  int max_iterations = 100000;
  int sample_size = 4;
  double inlier_threshold = 0.0;  // required
  double confidence = 0.999;
  double edge_ratio = 0.9;  // sampled edge lengths must agree within this ratio
  std::uint64_t seed = 0;
};

struct RansacResult {
  SimilarityTransform transform;
  std::size_t correspondences = 0;
  std::size_t inliers = 0;
  double inlier_rmse = 0.0;
  double fitness = 0.0;  // share of src points within the inlier threshold of dst
  int iterations = 0;
};

/// Mutual nearest neighbors in feature space (one-way matches when fewer than 10 are mutual).
inline std::vector<std::pair<std::size_t, std::size_t>> match_features(const FpfhFeatures& a, const FpfhFeatures& b) {
  auto nearest = [](const FpfhFeatures& from, std::size_t i, const FpfhFeatures& to) {
    std::size_t best = to.features.size();
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < to.features.size(); ++j) {
      if (to.degenerate[j]) continue;
      double d = 0.0;
      for (int k = 0; k < kFpfhDim; ++k) {
        const double e = from.features[i][std::size_t(k)] - to.features[j][std::size_t(k)];
        d += e * e;
      }
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    return best;
  };
  std::vector<std::pair<std::size_t, std::size_t>> one_way, mutual;
  std::vector<std::size_t> back(b.features.size(), a.features.size());
  for (std::size_t j = 0; j < b.features.size(); ++j)
    if (!b.degenerate[j]) back[j] = nearest(b, j, a);
  for (std::size_t i = 0; i < a.features.size(); ++i) {
    if (a.degenerate[i]) continue;
    const std::size_t j = nearest(a, i, b);
    if (j == b.features.size()) continue;
    one_way.emplace_back(i, j);
    if (back[j] == i) mutual.emplace_back(i, j);
  }
  return mutual.size() >= 10 ? mutual : one_way;
}

/// Rigid transform (s = 1) mapping src onto dst from feature-matched correspondence samples.
/// Hypotheses are ranked by geometric fitness (share of src points with a dst neighbor within
/// the inlier threshold), then by inlier RMSE; correspondence inliers drive early termination.
inline RansacResult ransac_register(const PointCloud& src, const PointCloud& dst, const FpfhFeatures& src_f,
                                    const FpfhFeatures& dst_f, const RansacParams& p) {
  MV3D_REQUIRE(p.inlier_threshold > 0.0, "RANSAC inlier threshold must be positive");
  MV3D_REQUIRE(p.sample_size >= 3 && p.sample_size <= 4, "RANSAC sample size must be 3 or 4");
  MV3D_REQUIRE(p.max_iterations > 0, "RANSAC iteration budget must be positive");
  MV3D_REQUIRE(src_f.features.size() == src.size() && dst_f.features.size() == dst.size(),
               "features do not match their clouds");
  const auto corr = match_features(src_f, dst_f);
  if (corr.size() < 3)
    throw DegenerateConfiguration("registration failure: only " + std::to_string(corr.size()) +
                                  " feature correspondences");
  const std::size_t k = std::min<std::size_t>(std::size_t(p.sample_size), corr.size());
  const double thr2 = p.inlier_threshold * p.inlier_threshold;
  const KdTree tree(dst.points);
  auto fitness = [&](const SimilarityTransform& T, double& err) {
    std::size_t n = 0;
    err = 0.0;
    for (const auto& x : src.points) {
      const double d = tree.nearest(T.apply(x)).sq_dist;
      if (d < thr2) {
        ++n;
        err += d;
      }
    }
    return n;
  };
  auto corr_inliers = [&](const SimilarityTransform& T) {
    std::vector<std::size_t> inl;
    for (std::size_t c = 0; c < corr.size(); ++c)
      if ((dst.points[corr[c].second] - T.apply(src.points[corr[c].first])).squaredNorm() < thr2) inl.push_back(c);
    return inl;
  };
  Rng rng(p.seed);
  RansacResult best;
  best.correspondences = corr.size();
  std::size_t best_fit = 0;
  double best_err = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> best_inliers;
  long long needed = p.max_iterations;
  std::vector<Vec3> a(k), b(k);
  int it = 0;
  for (; it < p.max_iterations && it < needed; ++it) {
    std::vector<std::size_t> pick;
    while (pick.size() < k) {
      const std::size_t c = rng.index(corr.size());
      if (std::find(pick.begin(), pick.end(), c) == pick.end()) pick.push_back(c);
    }
    bool ok = true;
    for (std::size_t u = 0; u < k; ++u) {
      a[u] = src.points[corr[pick[u]].first];
      b[u] = dst.points[corr[pick[u]].second];
    }
    for (std::size_t u = 0; u < k && ok; ++u)
      for (std::size_t v = u + 1; v < k && ok; ++v) {
        const double la = (a[u] - a[v]).norm(), lb = (b[u] - b[v]).norm();
        ok = la >= p.edge_ratio * lb && lb >= p.edge_ratio * la;
      }
    if (!ok) continue;
    SimilarityTransform T;
    try {
      T = umeyama(a, b, nullptr, false);
    } catch (const DegenerateConfiguration&) {
      continue;
    }
    std::vector<std::size_t> inl = corr_inliers(T);
    if (inl.size() < 3) continue;
    double err = 0.0;
    const std::size_t fit = fitness(T, err);
    if (fit > best_fit || (fit == best_fit && err < best_err)) {
      best_fit = fit;
      best_err = err;
      best_inliers = std::move(inl);
      best.transform = T;
      const double w = double(best_inliers.size()) / double(corr.size());
      const double miss = 1.0 - std::pow(w, double(k));
      if (miss <= 0.0)
        needed = it + 1;
      else if (miss < 1.0)
        needed = std::min<long long>(p.max_iterations,
                                     (long long)std::ceil(std::log(1.0 - p.confidence) / std::log(miss)));
    }
  }
  best.iterations = it;
  if (best_inliers.size() < 3)
    throw DegenerateConfiguration("registration failure: no hypothesis reached 3 inliers of " +
                                  std::to_string(corr.size()) + " correspondences");
  std::vector<Vec3> ia, ib;
  for (auto c : best_inliers) {
    ia.push_back(src.points[corr[c].first]);
    ib.push_back(dst.points[corr[c].second]);
  }
  try {
    const SimilarityTransform refit = umeyama(ia, ib, nullptr, false);
    double err = 0.0;
    const std::size_t fit = fitness(refit, err);
    if (fit > best_fit || (fit == best_fit && err <= best_err)) best.transform = refit;
  } catch (const DegenerateConfiguration&) {
  }
  best.inliers = 0;
  double err = 0.0;
  for (const auto& [i, j] : corr) {
    const double d = (dst.points[j] - best.transform.apply(src.points[i])).squaredNorm();
    if (d < thr2) {
      ++best.inliers;
      err += d;
    }
  }
  best.inlier_rmse = best.inliers ? std::sqrt(err / double(best.inliers)) : 0.0;
  best.fitness = double(fitness(best.transform, err)) / double(src.size());
  return best;
}

// ---------------------------------------------------------------------------------------------
// ICP

struct IcpParams {
  int max_iterations = 50;
  double max_correspondence_distance = 0.0;  // required
  double tolerance = 1e-6;                   // relative change of the objective
};

struct IcpResult {
  SimilarityTransform transform;
  std::vector<double> objective;  // per iteration, starting with the initial pose
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // final (src, dst) pairings
  double fitness = 0.0;                                    // paired fraction of src
  double inlier_rmse = 0.0;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

// Mean over src of min(d^2, cap^2): pair-then-fit steps can only lower it.
inline double icp_pairing(const std::vector<Vec3>& moved, const KdTree& tree, double cap2,
                          std::vector<std::pair<std::size_t, std::size_t>>& pairs, double& inlier_sq) {
  pairs.clear();
  double obj = 0.0;
  inlier_sq = 0.0;
  for (std::size_t i = 0; i < moved.size(); ++i) {
    const auto h = tree.nearest(moved[i]);
    if (h.sq_dist <= cap2) {
      pairs.emplace_back(i, h.index);
      obj += h.sq_dist;
      inlier_sq += h.sq_dist;
    } else {
      obj += cap2;
    }
  }
  return obj / double(moved.size());
}

}  // namespace detail

/// Point-to-point ICP. The rotation and translation are refined; init.s is held fixed.
inline IcpResult icp_refine(const PointCloud& src, const PointCloud& dst, const SimilarityTransform& init,
                            const IcpParams& p) {
  MV3D_REQUIRE(p.max_correspondence_distance > 0.0, "ICP correspondence distance must be positive");
  MV3D_REQUIRE(p.max_iterations >= 0, "ICP iteration budget must be non-negative");
  if (src.empty() || dst.empty()) throw DegenerateConfiguration("ICP on an empty cloud");
  const KdTree tree(dst.points);
  const double cap2 = p.max_correspondence_distance * p.max_correspondence_distance;
  std::vector<Vec3> scaled(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) scaled[i] = init.s * src.points[i];
  SimilarityTransform rigid;
  rigid.R = init.R;
  rigid.t = init.t;
  auto move = [&](const SimilarityTransform& T) {
    std::vector<Vec3> m(scaled.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = T.apply(scaled[i]);
    return m;
  };
  IcpResult r;
  double inlier_sq = 0.0;
  double obj = detail::icp_pairing(move(rigid), tree, cap2, r.pairs, inlier_sq);
  if (r.pairs.empty())
    throw DegenerateConfiguration("ICP: no correspondences within " + std::to_string(p.max_correspondence_distance) +
                                  " (objective " + std::to_string(obj) + ")");
  r.objective.push_back(obj);
  for (int it = 0; it < p.max_iterations; ++it) {
    if (r.pairs.size() < 3) break;
    std::vector<Vec3> a, b;
    for (const auto& [i, j] : r.pairs) {
      a.push_back(scaled[i]);
      b.push_back(dst.points[j]);
    }
    SimilarityTransform next;
    try {
      next = umeyama(a, b, nullptr, false);
    } catch (const DegenerateConfiguration&) {
      break;
    }
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    double isq = 0.0;
    const double nobj = detail::icp_pairing(move(next), tree, cap2, pairs, isq);
    r.iterations = it + 1;
    if (nobj > obj) {  // rounding; keep the better pose
      r.converged = true;
      break;
    }
    const double rel = obj > 0 ? (obj - nobj) / obj : 0.0;
    rigid = next;
    r.pairs = std::move(pairs);
    inlier_sq = isq;
    obj = nobj;
    r.objective.push_back(obj);
    if (rel < p.tolerance) {
      r.converged = true;
      break;
    }
  }
  r.transform = rigid;
  r.transform.s = init.s;
  r.fitness = double(r.pairs.size()) / double(src.size());
  r.inlier_rmse = r.pairs.empty() ? 0.0 : std::sqrt(inlier_sq / double(r.pairs.size()));
  return r;
}

}  // namespace mv3d
