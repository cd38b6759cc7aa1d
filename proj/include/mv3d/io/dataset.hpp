#pragma once

// Subject directory layout:
//   views/NNN.png   RGB renders
//   depth/NNN.dpth  "DPTH" | u32 width | u32 height | u32 reserved | f32 depth[h*w] (little-endian)
//   mask/NNN.png    1-bit foreground mask
//   logo/NNN.png    1-bit logo-patch mask (optional on read)
//   cameras.txt     one line per view: view <i> <azimuth> <elevation> K <9 values> Rt <12 values>
//   prompt.txt      the universal prompt

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mv3d/io/png.hpp"
#include "mv3d/scene/scene.hpp"

namespace mv3d {

namespace fs = std::filesystem;

inline std::string view_stem(std::size_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%03zu", i);
  return buf;
}

inline void write_depth(const fs::path& path, int w, int h, const std::vector<float>& depth) {
  MV3D_REQUIRE(depth.size() == std::size_t(w * h), "depth size mismatch");
  std::string out = "DPTH";
  auto put32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
  };
  put32(std::uint32_t(w));
  put32(std::uint32_t(h));
  put32(0);
  for (float d : depth) put32(std::bit_cast<std::uint32_t>(d));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<float> read_depth(const fs::path& path, int& w, int& h) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || bytes.compare(0, 4, "DPTH") != 0) throw IoError("not a DPTH file: " + path.string());
  auto get32 = [&](std::size_t pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes[pos + std::size_t(i)])) << (8 * i);
    return v;
  };
  w = int(get32(4));
  h = int(get32(8));
  const std::size_t n = std::size_t(w) * std::size_t(h);
  if (bytes.size() != 16 + 4 * n) throw IoError("DPTH payload size mismatch: " + path.string());
  std::vector<float> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = std::bit_cast<float>(get32(16 + 4 * i));
  return d;
}

inline Image8 to_image8(const Tensor& rgb) {
  MV3D_REQUIRE(rgb.rank() == 3 && rgb.dim(2) == 3, "expected [H x W x 3] image");
  Image8 img{int(rgb.dim(1)), int(rgb.dim(0)), 3, std::vector<std::uint8_t>(rgb.size())};
  for (std::size_t i = 0; i < rgb.size(); ++i)
    img.data[i] = std::uint8_t(std::lround(std::clamp(rgb[i], 0.0f, 1.0f) * 255.0f));
  return img;
}

inline Tensor from_image8(const Image8& img) {
  MV3D_REQUIRE(img.channels == 3, "expected an RGB image");
  Tensor t({std::size_t(img.height), std::size_t(img.width), 3});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = float(img.data[i]) / 255.0f;
  return t;
}

inline std::string camera_line(std::size_t i, const Camera& c) {
  std::ostringstream os;
  os.precision(17);
  os << "view " << i << ' ' << c.azimuth_deg << ' ' << c.elevation_deg << " K";
  const Mat3 K = c.K.matrix();
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) os << ' ' << K(r, k);
  os << " Rt";
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) os << ' ' << c.R(r, k);
    os << ' ' << c.t[r];
  }
  return os.str();
}

inline Camera parse_camera_line(const std::string& line, std::size_t& index) {
  std::istringstream is(line);
  std::string tag, ktag, rttag;
  Camera c;
  Mat3 K;
  is >> tag >> index >> c.azimuth_deg >> c.elevation_deg >> ktag;
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) is >> K(r, k);
  is >> rttag;
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) is >> c.R(r, k);
    is >> c.t[r];
  }
  if (!is || tag != "view" || ktag != "K" || rttag != "Rt") throw IoError("malformed camera line: " + line);
  c.K.fx = K(0, 0);
  c.K.fy = K(1, 1);
  c.K.cx = K(0, 2);
  c.K.cy = K(1, 2);
  return c;
}

/// Writes a subject directory. An existing non-empty directory is refused unless `force`.
inline void write_subject(const fs::path& dir, const std::vector<ViewRecord>& views, const std::string& prompt,
                          bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw ConfigError("output directory " + dir.string() + " exists (use --force to overwrite)");
    fs::remove_all(dir);
  }
  for (const char* sub : {"views", "depth", "mask", "logo"}) fs::create_directories(dir / sub);
  std::ofstream cams(dir / "cameras.txt");
  if (!cams) throw IoError("cannot write " + (dir / "cameras.txt").string());
  cams << "# version 1\n";
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto& v = views[i];
    const std::string stem = view_stem(i);
    write_png(dir / "views" / (stem + ".png"), to_image8(v.rgb));
    write_depth(dir / "depth" / (stem + ".dpth"), v.width, v.height, v.depth);
    write_mask_png(dir / "mask" / (stem + ".png"), v.width, v.height, v.mask);
    write_mask_png(dir / "logo" / (stem + ".png"), v.width, v.height, v.logo);
    cams << camera_line(i, v.camera) << '\n';
  }
  std::ofstream p(dir / "prompt.txt");
  p << prompt << '\n';
  if (!cams || !p) throw IoError("write failed in " + dir.string());
}

struct SubjectFiles {
  std::vector<ViewRecord> views;
  std::string prompt;
};

inline SubjectFiles read_subject(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  SubjectFiles s;
  std::ifstream cams(dir / "cameras.txt");
  if (!cams) throw IoError("missing " + (dir / "cameras.txt").string());
  std::string line;
  while (std::getline(cams, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::size_t idx = 0;
    ViewRecord v;
    v.camera = parse_camera_line(line, idx);
    if (idx != s.views.size()) throw IoError("camera manifest out of order at view " + std::to_string(idx));
    const std::string stem = view_stem(idx);
    v.rgb = from_image8(read_png(dir / "views" / (stem + ".png"), 3));
    v.height = int(v.rgb.dim(0));
    v.width = int(v.rgb.dim(1));
    int dw, dh;
    v.depth = read_depth(dir / "depth" / (stem + ".dpth"), dw, dh);
    if (dw != v.width || dh != v.height) throw IoError("depth size mismatch for view " + stem);
    const Image8 m = read_png(dir / "mask" / (stem + ".png"), 1);
    if (m.width != v.width || m.height != v.height) throw IoError("mask size mismatch for view " + stem);
    v.mask.resize(m.data.size());
    for (std::size_t i = 0; i < m.data.size(); ++i) v.mask[i] = m.data[i] > 127 ? 1 : 0;
    const fs::path logo = dir / "logo" / (stem + ".png");
    v.logo.assign(v.mask.size(), 0);
    if (fs::exists(logo)) {
      const Image8 l = read_png(logo, 1);
      for (std::size_t i = 0; i < l.data.size() && i < v.logo.size(); ++i) v.logo[i] = l.data[i] > 127 ? 1 : 0;
    }
    s.views.push_back(std::move(v));
  }
  if (s.views.empty()) throw IoError("no views listed in " + (dir / "cameras.txt").string());
  std::ifstream p(dir / "prompt.txt");
  if (!p) throw IoError("missing " + (dir / "prompt.txt").string());
  std::getline(p, s.prompt);
  return s;
}

}  // namespace mv3d
