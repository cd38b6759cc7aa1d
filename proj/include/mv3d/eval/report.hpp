#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mv3d/core/tensor.hpp"
#include "mv3d/eval/pointcloud.hpp"

namespace mv3d {

/// ASCII PLY with optional 8-bit colors.
inline void write_ply(const std::filesystem::path& path, const PointCloud& c) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "ply\nformat ascii 1.0\nelement vertex " << c.size() << "\nproperty float x\nproperty float y\nproperty float z\n";
  if (c.has_colors()) f << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  f << "end_header\n";
  char buf[128];
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Vec3& p = c.points[i];
    int n = std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g", p[0], p[1], p[2]);
    if (c.has_colors()) {
      auto u8 = [](double v) { return int(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
      std::snprintf(buf + n, sizeof buf - std::size_t(n), " %d %d %d", u8(c.colors[i][0]), u8(c.colors[i][1]),
                    u8(c.colors[i][2]));
    }
    f << buf << '\n';
  }
  if (!f) throw IoError("write failed: " + path.string());
}

struct MetricsRow {
  std::string subject;
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double completeness = std::numeric_limits<double>::quiet_NaN();
  double cd = std::numeric_limits<double>::quiet_NaN();
  double fidelity_mean = std::numeric_limits<double>::quiet_NaN();
  std::size_t frames = 0;
  std::size_t views = 0;
};

/// Missing metrics are written as empty fields.
inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << "# version 1\nsubject,accuracy,completeness,cd,fidelity_mean,frames,views\n";
  auto num = [](double v) {
    if (std::isnan(v)) return std::string();
    char b[32];
    std::snprintf(b, sizeof b, "%.9g", v);
    return std::string(b);
  };
  for (const auto& r : rows)
    f << r.subject << ',' << num(r.accuracy) << ',' << num(r.completeness) << ',' << num(r.cd) << ','
      << num(r.fidelity_mean) << ',' << r.frames << ',' << r.views << '\n';
  if (!f) throw IoError("write failed: " + path.string());
}

/// PSNR in dB for images in [0, 1]; restricted to pixels with mask != 0 when a mask is given
/// (one entry per pixel, all channels). Infinite for identical inputs.
inline double psnr(const Tensor& a, const Tensor& b, const std::vector<std::uint8_t>* mask = nullptr) {
  MV3D_REQUIRE(a.shape() == b.shape(), "psnr needs equally shaped images");
  const std::size_t ch = a.rank() >= 3 ? a.dim(a.rank() - 1) : 1;
  MV3D_REQUIRE(!mask || mask->size() * ch == a.size(), "psnr mask has the wrong pixel count");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (mask && !(*mask)[i / ch]) continue;
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
    ++n;
  }
  MV3D_REQUIRE(n > 0, "psnr over an empty region");
  return s == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(double(n) / s);
}

}  // namespace mv3d
