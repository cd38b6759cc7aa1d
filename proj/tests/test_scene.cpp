#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mv3d/eval/chamfer.hpp"
#include "mv3d/io/dataset.hpp"
#include "mv3d/scene/scene.hpp"

using namespace mv3d;
namespace fs = std::filesystem;

namespace {

SceneSpec sphere_scene(int views = 8, int size = 32) {
  SceneSpec s = default_scene(0, views, size);
  s.object = sphere_recipe(1.0);
  return s;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mv3d_scene_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Camera, RotationIsOrthonormal) {
  const Intrinsics K = intrinsics_for_fov(16, 16, 45.0);
  for (double az : {0.0, 37.0, 190.0, 359.0})
    for (double el : {-30.0, 0.0, 20.0, 60.0}) {
      const Camera c = ring_camera(K, 3.0, az, el);
      EXPECT_LT((c.R * c.R.transpose() - Mat3::Identity()).norm(), 1e-12);
      EXPECT_NEAR(c.R.determinant(), 1.0, 1e-12);
      EXPECT_NEAR(c.center().norm(), 3.0, 1e-12);
      // optical axis points at the origin
      EXPECT_LT((c.to_camera(Vec3::Zero()) - Vec3(0, 0, 3)).norm(), 1e-12);
    }
}

TEST(Camera, ProjectUnprojectRoundTrip) {
  const Camera c = ring_camera(intrinsics_for_fov(16, 16, 45.0), 3.0, 75.0, 20.0);
  Rng rng(1);
  for (int k = 0; k < 100; ++k) {
    const Vec3 w(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Vec3 p = project(c, w);
    EXPECT_LT((unproject(c, p.x(), p.y(), p.z()) - w).norm(), 1e-12);
  }
  EXPECT_LT((project(c, Vec3::Zero()) - Vec3(8, 8, 3)).norm(), 1e-12);
}

TEST(Render, SphereCenterDepth) {
  const SceneSpec spec = sphere_scene(4, 16);
  for (const auto& v : render_views(spec)) {
    EXPECT_NEAR(v.depth[8 * 16 + 8], 2.0, 1e-6);
    EXPECT_GT(v.mask_count(), 0u);
    EXPECT_LT(v.mask_count(), 256u);
  }
}

TEST(Render, MaskMatchesDepth) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& v : render_views(subject_scene(seed, 6, 16))) {
      EXPECT_GT(v.mask_count(), 0u);
      for (std::size_t p = 0; p < v.mask.size(); ++p) {
        EXPECT_EQ(v.mask[p] != 0, v.depth[p] > 0.0f);
        if (v.logo[p]) {
          EXPECT_TRUE(v.mask[p]);
        }
      }
      for (float c : v.rgb.vec()) EXPECT_EQ(c, std::round(c * 255.0f) / 255.0f);
    }
  }
}

TEST(Render, Deterministic) {
  const SceneSpec spec = subject_scene(7, 5, 16);
  const auto a = render_views(spec), b = render_views(spec);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].rgb, b[i].rgb);
    EXPECT_EQ(a[i].depth, b[i].depth);
  }
}

TEST(Render, SubjectsDiffer) {
  const auto a = render_views(subject_scene(1, 1, 16)), b = render_views(subject_scene(2, 1, 16));
  EXPECT_NE(a[0].rgb, b[0].rgb);
  EXPECT_EQ(default_scene(3).ring.azimuths_deg.size(), 30u);
  SceneSpec bad = sphere_scene();
  bad.ring.radius = 0.5;
  EXPECT_THROW(render_views(bad), ContractViolation);
}

TEST(Lift, FrontoParallelPlane) {
  SceneSpec spec = default_scene(0, 1, 16);
  ObjectRecipe r;
  Primitive box;
  box.kind = PrimitiveKind::Box;
  box.half = Vec3(2.0, 2.0, 0.1);
  r.parts.push_back(box);
  spec.object = r;
  const Camera cam = ring_camera(spec.K, 3.0, 0.0, 0.0);
  const ViewRecord v = render_view(spec, cam);
  EXPECT_EQ(v.mask_count(), 256u);
  for (float d : v.depth) EXPECT_NEAR(d, 2.9, 1e-5);
  const PointCloud c = lift_to_pointcloud({v});
  ASSERT_EQ(c.size(), 256u);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_NEAR(c.points[i].z(), 0.1, 1e-5);
    // pixel (i, j) back-projects to x = (j - cx) * depth / f, y = -(i - cy) * depth / f
    const int row = int(i) / 16, col = int(i) % 16;
    EXPECT_NEAR(c.points[i].x(), (col - spec.K.cx) * 2.9 / spec.K.fx, 1e-5);
    EXPECT_NEAR(c.points[i].y(), -(row - spec.K.cy) * 2.9 / spec.K.fy, 1e-5);
  }
}

TEST(Lift, SpherePointsOnSurface) {
  const auto views = render_views(sphere_scene(6, 32));
  const PointCloud c = lift_to_pointcloud(views);
  std::size_t masked = 0;
  for (const auto& v : views) masked += v.mask_count();
  EXPECT_EQ(c.size(), masked);
  EXPECT_EQ(c.colors.size(), c.size());
  for (const auto& p : c.points) EXPECT_NEAR(p.norm(), 1.0, 1e-5);
}

TEST(Lift, StrideCounts) {
  const auto views = render_views(sphere_scene(3, 32));
  std::size_t expect = 0;
  for (const auto& v : views)
    for (int i = 0; i < v.height; i += 2)
      for (int j = 0; j < v.width; j += 2) expect += v.mask[std::size_t(i * v.width + j)];
  EXPECT_EQ(lift_to_pointcloud(views, 2).size(), expect);
  EXPECT_THROW(lift_to_pointcloud(views, 0), ContractViolation);
}

TEST(Lift, EmptyMaskIsDegenerate) {
  ViewRecord v = render_views(sphere_scene(1, 16))[0];
  std::fill(v.mask.begin(), v.mask.end(), 0);
  EXPECT_THROW(lift_to_pointcloud({v}), DegenerateConfiguration);
}

TEST(Lift, DisjointViewSubsetsAgree) {
  const auto views = render_views(sphere_scene(12, 32));
  std::vector<ViewRecord> even, odd;
  for (std::size_t i = 0; i < views.size(); ++i) (i % 2 ? odd : even).push_back(views[i]);
  const ChamferReport r = chamfer(lift_to_pointcloud(even), lift_to_pointcloud(odd));
  // both sample the same unit sphere; the gap is on the order of the pixel footprint
  EXPECT_LT(r.cd, 0.05);
  const ChamferReport self = chamfer(lift_to_pointcloud(even), lift_to_pointcloud(even));
  EXPECT_EQ(self.cd, 0.0);
}

TEST(Io, DepthRoundTripAndLayout) {
  const fs::path dir = scratch("depth");
  const std::vector<float> d{0.0f, 1.5f, 2.25f, -0.0f, 3.0f, 1e-30f};
  write_depth(dir / "a.dpth", 3, 2, d);
  int w = 0, h = 0;
  EXPECT_EQ(read_depth(dir / "a.dpth", w, h), d);
  EXPECT_EQ(w, 3);
  EXPECT_EQ(h, 2);
  std::ifstream f(dir / "a.dpth", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  ASSERT_EQ(bytes.size(), 16u + 24u);
  EXPECT_EQ(bytes.substr(0, 4), "DPTH");
  EXPECT_EQ(bytes[4], 3);
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[12], 0);
  std::ofstream(dir / "bad.dpth", std::ios::binary) << "DPTH\x03\0\0\0";
  EXPECT_THROW(read_depth(dir / "bad.dpth", w, h), IoError);
  EXPECT_THROW(write_depth(dir / "c.dpth", 2, 2, d), ContractViolation);
  fs::remove_all(dir);
}

TEST(Io, PngRoundTrip) {
  const fs::path dir = scratch("png");
  const ViewRecord v = render_views(subject_scene(2, 1, 16))[0];
  write_png(dir / "a.png", to_image8(v.rgb));
  EXPECT_EQ(from_image8(read_png(dir / "a.png", 3)), v.rgb);
  write_mask_png(dir / "m.png", v.width, v.height, v.mask);
  const Image8 m = read_png(dir / "m.png", 1);
  for (std::size_t i = 0; i < v.mask.size(); ++i) EXPECT_EQ(m.data[i] > 127, v.mask[i] != 0);
  EXPECT_THROW(read_png(dir / "missing.png", 3), IoError);
  fs::remove_all(dir);
}

TEST(Io, SubjectRoundTrip) {
  const fs::path dir = scratch("subject");
  const SceneSpec spec = subject_scene(4, 5, 16);
  const auto views = render_views(spec);
  write_subject(dir, views, "a video of a <V> mug", true);
  const SubjectFiles back = read_subject(dir);
  EXPECT_EQ(back.prompt, "a video of a <V> mug");
  ASSERT_EQ(back.views.size(), views.size());
  for (std::size_t i = 0; i < views.size(); ++i) {
    EXPECT_EQ(back.views[i].rgb, views[i].rgb);
    EXPECT_EQ(back.views[i].depth, views[i].depth);
    EXPECT_EQ(back.views[i].mask, views[i].mask);
    EXPECT_EQ(back.views[i].logo, views[i].logo);
    EXPECT_DOUBLE_EQ(back.views[i].camera.azimuth_deg, views[i].camera.azimuth_deg);
    EXPECT_EQ(back.views[i].camera.R, views[i].camera.R);
    EXPECT_EQ(back.views[i].camera.t, views[i].camera.t);
    EXPECT_DOUBLE_EQ(back.views[i].camera.K.fx, views[i].camera.K.fx);
  }
  const PointCloud a = lift_to_pointcloud(views), b = lift_to_pointcloud(back.views);
  EXPECT_EQ(a.points, b.points);
  EXPECT_THROW(read_subject(dir / "nope"), IoError);
  fs::remove_all(dir);
}
