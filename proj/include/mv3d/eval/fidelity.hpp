#pragma once

#include <cmath>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "mv3d/core/tensor.hpp"

namespace mv3d {

using FeatureVector = std::vector<double>;

struct FidelityReport {
  std::vector<double> per_frame;  // max cosine over condition views
  double mean = 0.0;
  std::string embedder;
};

inline double cosine_similarity(const FeatureVector& a, const FeatureVector& b) {
  MV3D_REQUIRE(a.size() == b.size(), "feature dimensions differ: " + std::to_string(a.size()) + " vs " +
                                         std::to_string(b.size()));
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  MV3D_REQUIRE(aa > 0.0 && bb > 0.0, "cosine similarity of a zero feature vector");
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

/// Per frame, the best cosine match among the condition views; the video score averages
/// those maxima.
inline FidelityReport max_cosine_fidelity(const std::vector<FeatureVector>& frames,
                                          const std::vector<FeatureVector>& conditions, std::string embedder = "") {
  MV3D_REQUIRE(!frames.empty(), "fidelity needs at least one frame");
  MV3D_REQUIRE(!conditions.empty(), "fidelity needs at least one condition view");
  FidelityReport r;
  r.embedder = std::move(embedder);
  double sum = 0.0;
  for (const auto& f : frames) {
    double best = -1.0;
    for (const auto& c : conditions) best = std::max(best, cosine_similarity(f, c));
    r.per_frame.push_back(best);
    sum += best;
  }
  r.mean = sum / double(frames.size());
  return r;
}

/// Image -> feature vector. Images are [H x W x 3] in [0, 1].
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::string id() const = 0;
  virtual FeatureVector embed(const Tensor& rgb) const = 0;
};

/// 4x4x4 joint color histogram (64 bins) followed by an 8-bin gradient-orientation histogram
/// weighted by luminance gradient magnitude; each part sums to 1.
class HandcraftedEmbedder final : public Embedder {
 public:
  static constexpr int kColorBins = 4;
  static constexpr int kOrientBins = 8;

  std::string id() const override { return "handcrafted"; }

  FeatureVector embed(const Tensor& rgb) const override {
    MV3D_REQUIRE(rgb.rank() == 3 && rgb.dim(2) == 3, "embedder expects an [H x W x 3] image");
    const std::size_t h = rgb.dim(0), w = rgb.dim(1);
    FeatureVector f(kColorBins * kColorBins * kColorBins + kOrientBins, 0.0);
    auto q = [](float v) { return std::clamp(int(std::clamp(v, 0.0f, 1.0f) * kColorBins), 0, kColorBins - 1); };
    for (std::size_t p = 0; p < h * w; ++p)
      f[std::size_t((q(rgb[p * 3]) * kColorBins + q(rgb[p * 3 + 1])) * kColorBins + q(rgb[p * 3 + 2]))] += 1.0;
    for (int b = 0; b < kColorBins * kColorBins * kColorBins; ++b) f[std::size_t(b)] /= double(h * w);
    auto lum = [&](std::size_t y, std::size_t x) {
      const std::size_t i = (y * w + x) * 3;
      return 0.299 * rgb[i] + 0.587 * rgb[i + 1] + 0.114 * rgb[i + 2];
    };
    double total = 0.0;
    const std::size_t base = kColorBins * kColorBins * kColorBins;
    for (std::size_t y = 1; y + 1 < h; ++y)
      for (std::size_t x = 1; x + 1 < w; ++x) {
        const double gx = lum(y, x + 1) - lum(y, x - 1), gy = lum(y + 1, x) - lum(y - 1, x);
        const double m = std::hypot(gx, gy);
        if (m == 0.0) continue;
        double a = std::atan2(gy, gx);
        if (a < 0) a += 2 * std::numbers::pi;
        const int b = std::min(int(a / (2 * std::numbers::pi) * kOrientBins), kOrientBins - 1);
        f[base + std::size_t(b)] += m;
        total += m;
      }
    if (total > 0)
      for (int b = 0; b < kOrientBins; ++b) f[base + std::size_t(b)] /= total;
    return f;
  }
};

/// "handcrafted" is built in; "clip" and "dinov2" are reserved plug-in names.
inline std::unique_ptr<Embedder> make_embedder(const std::string& name) {
  if (name == "handcrafted") return std::make_unique<HandcraftedEmbedder>();
  if (name == "clip" || name == "dinov2")
    throw ConfigError("embedder '" + name + "' is a plug-in slot with no implementation in this build");
  throw ConfigError("unknown embedder '" + name + "' (expected handcrafted, clip or dinov2)");
}

inline std::vector<FeatureVector> embed_all(const Embedder& e, const std::vector<Tensor>& images) {
  std::vector<FeatureVector> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(e.embed(im));
  return out;
}

}  // namespace mv3d
