#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "mv3d/core/rng.hpp"
#include "mv3d/core/tensor.hpp"
#include "mv3d/eval/pointcloud.hpp"
#include "mv3d/model/config.hpp"

namespace mv3d {

enum class PrimitiveKind { Box, Sphere };
enum class Pattern { Solid, Stripes, Checker };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Box;
  Vec3 center = Vec3::Zero();
  Vec3 half = Vec3::Constant(0.5);  // boxes
  double radius = 0.5;              // spheres
  Vec3 color = Vec3::Constant(0.7);
  Vec3 color2 = Vec3::Constant(0.3);
  Pattern pattern = Pattern::Solid;
  double freq = 2.0;
};

/// A 3x3 grid of saturated cells on one box face, in face coordinates [-1, 1]^2.
struct LogoPatch {
  int part = 0;
  int axis = 2;
  int sign = 1;
  double extent = 0.6;
  std::array<Vec3, 9> cells;
};

struct ObjectRecipe {
  std::vector<Primitive> parts;
  std::optional<LogoPatch> logo;
  int class_index = 0;

  int class_token() const { return vocab::class_id(class_index); }
};

struct Intrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

  Mat3 matrix() const {
    Mat3 K;
    K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return K;
  }
};

struct Camera {
  Intrinsics K;
  Mat3 R = Mat3::Identity();  // world -> camera
  Vec3 t = Vec3::Zero();
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;

  Vec3 center() const { return -R.transpose() * t; }
  Vec3 to_camera(const Vec3& w) const { return R * w + t; }
  Vec3 to_world(const Vec3& c) const { return R.transpose() * (c - t); }
};

enum class Background { White, Noise, Gradient };

struct CameraRing {
  double radius = 3.0;
  double elevation_deg = 20.0;
  std::vector<double> azimuths_deg;

  static std::vector<double> uniform(int n) {
    std::vector<double> a;
    for (int i = 0; i < n; ++i) a.push_back(360.0 * i / n);
    return a;
  }
};

struct SceneSpec {
  ObjectRecipe object;
  std::uint64_t seed = 0;
  CameraRing ring;
  int width = 16;
  int height = 16;
  Intrinsics K;
  Background background = Background::White;
  std::uint64_t background_seed = 0;
};

struct ViewRecord {
  Tensor rgb;                  // [H x W x 3], 8-bit levels in [0, 1]
  std::vector<float> depth;    // H*W camera-frame z, 0 where nothing was hit
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> logo;  // pixels showing the logo patch
  Camera camera;
  int width = 0, height = 0;

  std::size_t mask_count() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return n;
  }
};

/// Pinhole intrinsics for a horizontal field of view, principal point at (W/2, H/2) in the
/// integer pixel convention (pixel (row i, col j) has image coordinates (u, v) = (j, i)).
inline Intrinsics intrinsics_for_fov(int width, int height, double fov_deg) {
  Intrinsics K;
  K.fx = K.fy = 0.5 * width / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
  K.cx = 0.5 * width;
  K.cy = 0.5 * height;
  return K;
}

/// Looks at the origin from the ring position; camera y points down in the image.
inline Camera ring_camera(const Intrinsics& K, double radius, double azimuth_deg, double elevation_deg) {
  const double az = azimuth_deg * std::numbers::pi / 180.0, el = elevation_deg * std::numbers::pi / 180.0;
  const Vec3 c(radius * std::cos(el) * std::sin(az), radius * std::sin(el), radius * std::cos(el) * std::cos(az));
  const Vec3 f = (-c).normalized();
  const Vec3 up(0, 1, 0);
  const Vec3 x = f.cross(up).normalized();
  const Vec3 y = f.cross(x);
  Camera cam;
  cam.K = K;
  cam.R.row(0) = x.transpose();
  cam.R.row(1) = y.transpose();
  cam.R.row(2) = f.transpose();
  cam.t = -cam.R * c;
  cam.azimuth_deg = azimuth_deg;
  cam.elevation_deg = elevation_deg;
  return cam;
}

namespace detail {

inline Vec3 hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = int(h) % 6;
  const double f = h - std::floor(h), p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline double max_extent(const Primitive& p) {
  if (p.kind == PrimitiveKind::Sphere) return p.center.norm() + p.radius;
  return (p.center.cwiseAbs() + p.half).norm();
}

}  // namespace detail

/// Seeded union of a main box and 1-3 attached parts, scaled into the unit sphere, with a
/// logo on the main box's +z face.
inline ObjectRecipe random_recipe(std::uint64_t seed, int class_index) {
  MV3D_REQUIRE(class_index >= 0 && class_index < vocab::num_classes(), "class index out of range");
  Rng rng(seed * 7919 + 17);
  ObjectRecipe r;
  r.class_index = class_index;
  const double hue = (class_index + rng.uniform(-0.2, 0.2)) / vocab::num_classes();
  auto pick_pattern = [&](Primitive& p) {
    const double u = rng.uniform();
    p.pattern = u < 0.4 ? Pattern::Solid : u < 0.7 ? Pattern::Stripes : Pattern::Checker;
    p.freq = std::floor(rng.uniform(1.0, 3.0));
    p.color = detail::hsv(hue + rng.uniform(-0.08, 0.08), rng.uniform(0.4, 0.8), rng.uniform(0.55, 0.9));
    p.color2 = detail::hsv(hue + 0.5 + rng.uniform(-0.1, 0.1), rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7));
  };

  Primitive body;
  body.kind = PrimitiveKind::Box;
  body.half = Vec3(rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5));
  pick_pattern(body);
  r.parts.push_back(body);

  const int extra = 1 + int(rng.index(3));
  for (int e = 0; e < extra; ++e) {
    Primitive p;
    p.kind = rng.uniform() < 0.5 ? PrimitiveKind::Sphere : PrimitiveKind::Box;
    p.radius = rng.uniform(0.15, 0.3);
    p.half = Vec3(rng.uniform(0.1, 0.25), rng.uniform(0.1, 0.25), rng.uniform(0.1, 0.25));
    // Attach to a face other than the logo face.
    int axis, sign;
    do {
      axis = int(rng.index(3));
      sign = rng.uniform() < 0.5 ? -1 : 1;
    } while (axis == 2 && sign == 1);
    const double size = p.kind == PrimitiveKind::Sphere ? p.radius : p.half[axis];
    for (int a = 0; a < 3; ++a) p.center[a] = rng.uniform(-0.6, 0.6) * body.half[a];
    p.center[axis] = sign * (body.half[axis] + 0.5 * size);
    pick_pattern(p);
    r.parts.push_back(p);
  }

  double reach = 0.0;
  for (const auto& p : r.parts) reach = std::max(reach, detail::max_extent(p));
  if (reach > 0.95) {
    const double s = 0.95 / reach;
    for (auto& p : r.parts) {
      p.center *= s;
      p.half *= s;
      p.radius *= s;
    }
  }

  LogoPatch logo;
  for (auto& c : logo.cells) c = detail::hsv(rng.uniform(), 1.0, rng.uniform() < 0.5 ? 1.0 : 0.35);
  r.logo = logo;
  return r;
}

inline ObjectRecipe sphere_recipe(double radius = 1.0, Vec3 color = Vec3(0.8, 0.4, 0.2)) {
  ObjectRecipe r;
  Primitive p;
  p.kind = PrimitiveKind::Sphere;
  p.radius = radius;
  p.color = color;
  r.parts.push_back(p);
  return r;
}

/// Default scene: 30 views at uniform azimuth, 20 degrees elevation, radius 3, 45 degree
/// field of view.
inline SceneSpec default_scene(std::uint64_t seed, int views = 30, int size = 16) {
  SceneSpec s;
  s.seed = seed;
  s.object = random_recipe(seed, int(seed % std::uint64_t(vocab::num_classes())));
  s.ring.azimuths_deg = CameraRing::uniform(views);
  s.width = s.height = size;
  s.K = intrinsics_for_fov(size, size, 45.0);
  return s;
}

/// Personalization subject: default_scene on a smooth per-subject gradient backdrop, so the
/// background-masked conditioning views differ from the raw captures.
inline SceneSpec subject_scene(std::uint64_t seed, int views = 30, int size = 16) {
  SceneSpec s = default_scene(seed, views, size);
  s.background = Background::Gradient;
  s.background_seed = seed;
  return s;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  int part = -1;
  Vec3 normal = Vec3::Zero();
  int axis = -1;  // box face axis
  int sign = 0;
};

inline bool inside(const Primitive& p, const Vec3& x) {
  if (p.kind == PrimitiveKind::Sphere) return (x - p.center).norm() < p.radius;
  return ((x - p.center).cwiseAbs() - p.half).maxCoeff() < 0.0;
}

inline Hit intersect(const std::vector<Primitive>& parts, const Vec3& o, const Vec3& d) {
  Hit best;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Primitive& p = parts[i];
    if (p.kind == PrimitiveKind::Sphere) {
      const Vec3 oc = o - p.center;
      const double b = oc.dot(d), c = oc.squaredNorm() - p.radius * p.radius, a = d.squaredNorm();
      const double disc = b * b - a * c;
      if (disc < 0) continue;
      const double t = (-b - std::sqrt(disc)) / a;
      if (t > 1e-9 && t < best.t) {
        best.t = t;
        best.part = int(i);
        best.normal = (o + t * d - p.center).normalized();
        best.axis = -1;
      }
    } else {
      double tmin = -std::numeric_limits<double>::infinity(), tmax = std::numeric_limits<double>::infinity();
      int axis = -1, sign = 0;
      bool miss = false;
      for (int a = 0; a < 3; ++a) {
        const double lo = p.center[a] - p.half[a], hi = p.center[a] + p.half[a];
        if (std::abs(d[a]) < 1e-15) {
          if (o[a] < lo || o[a] > hi) miss = true;
          continue;
        }
        double t0 = (lo - o[a]) / d[a], t1 = (hi - o[a]) / d[a];
        int s0 = -1;
        if (t0 > t1) {
          std::swap(t0, t1);
          s0 = 1;
        }
        if (t0 > tmin) {
          tmin = t0;
          axis = a;
          sign = s0;
        }
        tmax = std::min(tmax, t1);
      }
      if (miss || tmin > tmax || tmin <= 1e-9 || axis < 0) continue;
      if (tmin < best.t) {
        best.t = tmin;
        best.part = int(i);
        best.normal = Vec3::Zero();
        best.normal[axis] = sign;
        best.axis = axis;
        best.sign = sign;
      }
    }
  }
  return best;
}

namespace detail {

inline bool pattern_on(Pattern pat, double freq, double u, double v) {
  const int iu = int(std::floor(freq * (u + 1.0))), iv = int(std::floor(freq * (v + 1.0)));
  switch (pat) {
    case Pattern::Solid: return false;
    case Pattern::Stripes: return (iu & 1) != 0;
    case Pattern::Checker: return ((iu + iv) & 1) != 0;
  }
  return false;
}

// Surface albedo at a hit; sets is_logo when the point lies in the logo patch.
inline Vec3 albedo(const ObjectRecipe& obj, const Hit& h, const Vec3& x, bool& is_logo) {
  const Primitive& p = obj.parts[std::size_t(h.part)];
  is_logo = false;
  double u, v;
  if (p.kind == PrimitiveKind::Sphere) {
    const Vec3 n = (x - p.center) / p.radius;
    u = std::atan2(n.x(), n.z()) / std::numbers::pi;
    v = std::asin(std::clamp(n.y(), -1.0, 1.0)) * 2.0 / std::numbers::pi;
  } else {
    const int a1 = (h.axis + 1) % 3, a2 = (h.axis + 2) % 3;
    u = (x[a1] - p.center[a1]) / p.half[a1];
    v = (x[a2] - p.center[a2]) / p.half[a2];
    if (obj.logo && obj.logo->part == h.part && obj.logo->axis == h.axis && obj.logo->sign == h.sign) {
      const double e = obj.logo->extent;
      // Face coordinates of the +z face: u along x, v along y.
      if (std::abs(u) < e && std::abs(v) < e) {
        is_logo = true;
        const int cu = std::clamp(int((u + e) / (2 * e) * 3), 0, 2);
        const int cv = std::clamp(int((v + e) / (2 * e) * 3), 0, 2);
        return obj.logo->cells[std::size_t(cv * 3 + cu)];
      }
    }
  }
  return pattern_on(p.pattern, p.freq, u, v) ? p.color2 : p.color;
}

inline float quantize8(double v) { return float(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f; }

inline Vec3 background_color(Background bg, std::uint64_t seed, int i, int j, int h, int w) {
  switch (bg) {
    case Background::White: return Vec3::Ones();
    case Background::Noise: {
      Rng rng(seed * 1000003 + std::uint64_t(i * w + j));
      return Vec3(rng.uniform(), rng.uniform(), rng.uniform());
    }
    case Background::Gradient: {
      Rng rng(seed);
      const Vec3 a(rng.uniform(), rng.uniform(), rng.uniform()), b(rng.uniform(), rng.uniform(), rng.uniform());
      const double s = 0.5 * (double(i) / std::max(1, h - 1) + double(j) / std::max(1, w - 1));
      return (1 - s) * a + s * b;
    }
  }
  return Vec3::Ones();
}

}  // namespace detail

inline ViewRecord render_view(const SceneSpec& spec, const Camera& cam) {
  for (const auto& p : spec.object.parts)
    MV3D_REQUIRE(!inside(p, cam.center()), "camera lies inside the object");
  ViewRecord v;
  v.width = spec.width;
  v.height = spec.height;
  v.camera = cam;
  const std::size_t n = std::size_t(spec.width * spec.height);
  v.rgb = Tensor({std::size_t(spec.height), std::size_t(spec.width), 3});
  v.depth.assign(n, 0.0f);
  v.mask.assign(n, 0);
  v.logo.assign(n, 0);
  const Mat3 Kinv = cam.K.matrix().inverse();
  const Vec3 o = cam.center();
  const Mat3 Rt = cam.R.transpose();
  for (int i = 0; i < spec.height; ++i)
    for (int j = 0; j < spec.width; ++j) {
      const std::size_t px = std::size_t(i * spec.width + j);
      const Vec3 dc = Kinv * Vec3(j, i, 1.0);  // camera-frame direction with z = 1
      const Vec3 d = Rt * dc;
      const Hit h = intersect(spec.object.parts, o, d);
      Vec3 color;
      if (h.part >= 0) {
        const Vec3 x = o + h.t * d;
        bool is_logo;
        const Vec3 a = detail::albedo(spec.object, h, x, is_logo);
        const double lambert = std::max(0.0, -h.normal.dot(d.normalized()));
        color = a * (0.35 + 0.65 * lambert);
        v.depth[px] = float(h.t);  // direction has unit camera z, so t is the depth
        v.mask[px] = 1;
        v.logo[px] = is_logo ? 1 : 0;
      } else {
        color = detail::background_color(spec.background, spec.background_seed, i, j, spec.height, spec.width);
      }
      for (int c = 0; c < 3; ++c) v.rgb[px * 3 + std::size_t(c)] = detail::quantize8(color[c]);
    }
  return v;
}

inline std::vector<ViewRecord> render_views(const SceneSpec& spec) {
  MV3D_REQUIRE(spec.width > 0 && spec.height > 0, "image size must be positive");
  MV3D_REQUIRE(spec.ring.radius > 1.0, "camera ring must lie outside the unit sphere");
  MV3D_REQUIRE(!spec.ring.azimuths_deg.empty(), "camera ring has no views");
  std::vector<ViewRecord> out;
  for (double az : spec.ring.azimuths_deg)
    out.push_back(render_view(spec, ring_camera(spec.K, spec.ring.radius, az, spec.ring.elevation_deg)));
  return out;
}

/// Image coordinates (u, v) and camera depth of a world point.
inline Vec3 project(const Camera& cam, const Vec3& world) {
  const Vec3 c = cam.to_camera(world);
  const Vec3 p = cam.K.matrix() * c;
  return Vec3(p.x() / p.z(), p.y() / p.z(), c.z());
}

inline Vec3 unproject(const Camera& cam, double u, double v, double depth) {
  const Vec3 c = depth * (cam.K.matrix().inverse() * Vec3(u, v, 1.0));
  return cam.to_world(c);
}

/// Back-projects every `stride`-th masked pixel of every view into world coordinates, with
/// the pixel color attached.
inline PointCloud lift_to_pointcloud(const std::vector<ViewRecord>& views, int stride = 1) {
  MV3D_REQUIRE(stride >= 1, "stride must be at least 1");
  PointCloud cloud;
  for (const auto& v : views) {
    const Mat3 Kinv = v.camera.K.matrix().inverse();
    for (int i = 0; i < v.height; i += stride)
      for (int j = 0; j < v.width; j += stride) {
        const std::size_t px = std::size_t(i * v.width + j);
        if (!v.mask[px]) continue;
        const double z = v.depth[px];
        MV3D_REQUIRE(z > 0 && std::isfinite(z), "masked pixel without positive depth");
        cloud.points.push_back(v.camera.to_world(z * (Kinv * Vec3(j, i, 1.0))));
        cloud.colors.push_back(Vec3(v.rgb[px * 3], v.rgb[px * 3 + 1], v.rgb[px * 3 + 2]));
      }
  }
  if (cloud.empty()) throw DegenerateConfiguration("empty cloud: no masked pixels in any view");
  return cloud;
}

}  // namespace mv3d
