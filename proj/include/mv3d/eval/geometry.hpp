#pragma once

#include <sstream>

#include "mv3d/eval/chamfer.hpp"
#include "mv3d/eval/registration.hpp"
#include "mv3d/scene/scene.hpp"

namespace mv3d {

struct GeometryParams {
  double voxel_fraction = 1.0 / 64.0;  // of the normalized gt diagonal (= 1)
  double min_voxel_spacing = 2.0;      // voxel >= this times the gt mean nearest-neighbor spacing
  double normal_radius_voxels = 2.0;
  double feature_radius_voxels = 5.0;
  RansacParams ransac;  // inlier_threshold 0: 1.5 voxels
  IcpParams icp;        // max_correspondence_distance 0: 2 voxels
  int scale_rounds = 3;  // ICP / Umeyama alternations
  int ransac_restarts = 1;  // seeds ransac.seed, ransac.seed + 1, ...; lowest final objective wins
  int lift_stride = 1;
};

struct StageLog {
  std::string stage;
  double residual = 0.0;
  std::string detail;
};

struct GeometryReport {
  ChamferReport chamfer;             // normalized frame (gt bounding-box diagonal = 1)
  SimilarityTransform transform;     // gen -> gt in the original units
  double gt_scale = 1.0;             // normalization factor applied to both clouds
  double voxel = 0.0;                // normalized units
  double scale_hypothesis = 1.0;     // gen prescale chosen before rigid registration
  std::vector<StageLog> stages;      // for the chosen hypothesis
  std::vector<double> icp_objective;  // concatenated over alternation rounds
};

namespace detail {

inline double rms_radius(const PointCloud& c) {
  const Vec3 mu = c.centroid();
  double s = 0.0;
  for (const auto& p : c.points) s += (p - mu).squaredNorm();
  return std::sqrt(s / double(c.size()));
}

inline double mean_spacing(const PointCloud& c) {
  if (c.size() < 2) return 0.0;
  const KdTree tree(c.points);
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += std::sqrt(tree.nearest(c.points[i], i).sq_dist);
  return s / double(c.size());
}

inline PointCloud scaled(const PointCloud& c, double k) {
  SimilarityTransform T;
  T.s = k;
  return T.apply(c);
}

struct Attempt {
  SimilarityTransform T;  // prescaled gen (normalized) -> gt (normalized), prescale folded in
  double objective = 0.0;
  std::vector<StageLog> stages;
  std::vector<double> icp_objective;
};

template <class F>
auto run_stage(const char* name, std::vector<StageLog>& log, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const DegenerateConfiguration& e) {
    std::ostringstream os;
    os << "geometry_pipeline stage '" << name << "' failed: " << e.what();
    for (const auto& s : log) os << "; " << s.stage << " residual " << s.residual;
    throw DegenerateConfiguration(os.str());
  }
}

inline Attempt register_once(const PointCloud& gen, const PointCloud& gt, const PointCloud& gt_down,
                             const FpfhFeatures& gt_f, double prescale, double voxel, const GeometryParams& p) {
  Attempt a;
  const PointCloud src = scaled(gen, prescale);
  const PointCloud src_down = run_stage("downsample", a.stages, [&] { return voxel_downsample(src, voxel); });
  const FpfhFeatures src_f = run_stage("fpfh", a.stages, [&] {
    return fpfh(src_down, p.normal_radius_voxels * voxel, p.feature_radius_voxels * voxel);
  });
  RansacParams rp = p.ransac;
  if (rp.inlier_threshold <= 0) rp.inlier_threshold = 1.5 * voxel;
  const RansacResult rr = run_stage("ransac", a.stages, [&] { return ransac_register(src_down, gt_down, src_f, gt_f, rp); });
  a.stages.push_back({"ransac", rr.inlier_rmse,
                      std::to_string(rr.inliers) + "/" + std::to_string(rr.correspondences) + " inliers, " +
                          std::to_string(rr.iterations) + " iterations"});
  IcpParams ip = p.icp;
  if (ip.max_correspondence_distance <= 0) ip.max_correspondence_distance = 2.0 * voxel;
  SimilarityTransform T = rr.transform;  // acts on src
  double objective = 0.0;
  for (int round = 0; round < std::max(1, p.scale_rounds); ++round) {
    const IcpResult ir = run_stage("icp", a.stages, [&] { return icp_refine(src, gt, T, ip); });
    a.icp_objective.insert(a.icp_objective.end(), ir.objective.begin(), ir.objective.end());
    a.stages.push_back({"icp", ir.inlier_rmse,
                        "round " + std::to_string(round) + ", fitness " + std::to_string(ir.fitness) + ", " +
                            std::to_string(ir.iterations) + " iterations"});
    T = ir.transform;
    objective = ir.objective.back();
    std::vector<Vec3> xs, ys;
    for (const auto& [i, j] : ir.pairs) {
      xs.push_back(src.points[i]);
      ys.push_back(gt.points[j]);
    }
    const SimilarityTransform U = run_stage("umeyama", a.stages, [&] { return umeyama(xs, ys); });
    a.stages.push_back({"umeyama", std::sqrt(mean_squared_residual(U, xs, ys)), "scale " + std::to_string(U.s)});
    T = U;
  }
  SimilarityTransform pre;
  pre.s = prescale;
  a.T = T.compose(pre);
  a.objective = objective;
  return a;
}

}  // namespace detail

/// lift -> normalize (gt diagonal = 1, same factor on gen) -> voxel downsample -> FPFH ->
/// RANSAC -> ICP -> Umeyama on the final pairings -> Chamfer on the full clouds. Rigid
/// registration is tried with gen at its own scale and prescaled to the gt RMS radius, each
/// with a few RANSAC seeds; the attempt with the lowest final ICP objective wins.
inline GeometryReport geometry_pipeline(const PointCloud& gen, const PointCloud& gt, const GeometryParams& p = {}) {
  if (gen.empty() || gt.empty()) throw DegenerateConfiguration("geometry_pipeline stage 'lift' failed: empty cloud");
  GeometryReport rep;
  const double diag = gt.bbox_diagonal();
  if (!(diag > 0)) throw DegenerateConfiguration("geometry_pipeline stage 'normalize' failed: gt cloud has zero extent");
  rep.gt_scale = 1.0 / diag;
  const PointCloud gen_n = detail::scaled(gen, rep.gt_scale), gt_n = detail::scaled(gt, rep.gt_scale);
  const double voxel = std::max(p.voxel_fraction, p.min_voxel_spacing * detail::mean_spacing(gt_n));
  std::vector<StageLog> pre_log;
  const PointCloud gt_down = detail::run_stage("downsample", pre_log, [&] { return voxel_downsample(gt_n, voxel); });
  const FpfhFeatures gt_f = detail::run_stage("fpfh", pre_log, [&] {
    return fpfh(gt_down, p.normal_radius_voxels * voxel, p.feature_radius_voxels * voxel);
  });
  rep.voxel = voxel;
  std::vector<double> hyps{1.0};
  const double ratio = detail::rms_radius(gt_n) / std::max(detail::rms_radius(gen_n), 1e-300);
  if (std::abs(ratio - 1.0) > 1e-3) hyps.push_back(ratio);
  std::optional<detail::Attempt> best;
  std::string failures;
  if (p.ransac_restarts < 1) throw ContractViolation("ransac_restarts must be at least 1");
  for (double h : hyps)
    for (int r = 0; r < p.ransac_restarts; ++r) {
      GeometryParams q = p;
      q.ransac.seed = p.ransac.seed + std::uint64_t(r);
      try {
        detail::Attempt a = detail::register_once(gen_n, gt_n, gt_down, gt_f, h, voxel, q);
        if (!best || a.objective < best->objective) {
          best = std::move(a);
          rep.scale_hypothesis = h;
        }
      } catch (const DegenerateConfiguration& e) {
        failures += std::string(failures.empty() ? "" : " | ") + e.what();
      }
    }
  if (!best) throw DegenerateConfiguration(failures);
  rep.stages = best->stages;
  rep.icp_objective = best->icp_objective;
  rep.chamfer = chamfer(best->T.apply(gen_n), gt_n);
  rep.stages.push_back({"chamfer", rep.chamfer.cd, ""});
  // gen -> gt in original units: x -> N^-1 T N x
  SimilarityTransform N;
  N.s = rep.gt_scale;
  rep.transform = N.inverse().compose(best->T.compose(N));
  return rep;
}

inline GeometryReport geometry_pipeline(const std::vector<ViewRecord>& gen_views, const std::vector<ViewRecord>& gt_views,
                                        const GeometryParams& p = {}) {
  std::vector<StageLog> log;
  const PointCloud gen = detail::run_stage("lift", log, [&] { return lift_to_pointcloud(gen_views, p.lift_stride); });
  const PointCloud gt = detail::run_stage("lift", log, [&] { return lift_to_pointcloud(gt_views, p.lift_stride); });
  return geometry_pipeline(gen, gt, p);
}

}  // namespace mv3d
