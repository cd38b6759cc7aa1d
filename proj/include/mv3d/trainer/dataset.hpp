#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "mv3d/flow/flow.hpp"
#include "mv3d/io/dataset.hpp"
#include "mv3d/scene/scene.hpp"

namespace mv3d {

inline double circular_distance_deg(double a, double b) {
  double d = std::fmod(std::abs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

/// Greedy farthest-angle selection: index 0 first, then repeatedly the view whose minimum
/// circular distance to the chosen set is largest (lowest index on ties).
inline std::vector<int> select_conditioning_views(const std::vector<double>& azimuths_deg, int n_c) {
  MV3D_REQUIRE(n_c >= 0, "conditioning view count must be non-negative");
  MV3D_REQUIRE(std::size_t(n_c) <= azimuths_deg.size(),
               "cannot select " + std::to_string(n_c) + " of " + std::to_string(azimuths_deg.size()) + " views");
  std::vector<int> chosen;
  if (n_c == 0) return chosen;
  chosen.push_back(0);
  while (int(chosen.size()) < n_c) {
    int best = -1;
    double best_d = -1.0;
    for (std::size_t i = 0; i < azimuths_deg.size(); ++i) {
      if (std::find(chosen.begin(), chosen.end(), int(i)) != chosen.end()) continue;
      double d = 1e300;
      for (int c : chosen) d = std::min(d, circular_distance_deg(azimuths_deg[i], azimuths_deg[std::size_t(c)]));
      if (d > best_d) {
        best_d = d;
        best = int(i);
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

/// Background pixels (mask 0) become white; image is [H x W x 3] in [0, 1].
inline Tensor mask_background(const Tensor& image, const std::vector<std::uint8_t>& mask) {
  MV3D_REQUIRE(image.rank() == 3 && image.dim(2) == 3, "expected an [H x W x 3] image");
  MV3D_REQUIRE(mask.size() == image.dim(0) * image.dim(1),
               "mask has " + std::to_string(mask.size()) + " pixels, image has " +
                   std::to_string(image.dim(0) * image.dim(1)));
  Tensor out = image;
  for (std::size_t p = 0; p < mask.size(); ++p)
    if (!mask[p])
      for (std::size_t c = 0; c < 3; ++c) out[p * 3 + c] = 1.0f;
  return out;
}

inline Tensor as_frame(const Tensor& hwc) {
  Tensor f = hwc;
  f.reshape_inplace({1, hwc.dim(0), hwc.dim(1), hwc.dim(2)});
  return f;
}

/// One subject: all views S, the conditioning subset X (REF(k) is view cond[k-1]) and the
/// universal prompt.
struct SubjectDataset {
  std::vector<Tensor> images;       // [H x W x 3] in [0, 1], as rendered
  std::vector<Tensor> frames;       // model range [1 x H x W x 3]
  std::vector<Tensor> conditioned;  // background-masked, model range [1 x H x W x 3]
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<std::vector<std::uint8_t>> logos;
  std::vector<Camera> cameras;
  std::vector<int> cond;
  std::vector<int> prompt;
  int class_token = vocab::kFirstClass;

  std::size_t size() const { return images.size(); }

  std::vector<double> azimuths() const {
    std::vector<double> a;
    for (const auto& c : cameras) a.push_back(c.azimuth_deg);
    return a;
  }

  void check_conditioning() const {
    for (int c : cond)
      MV3D_REQUIRE(c >= 0 && std::size_t(c) < size(),
                   "conditioning view " + std::to_string(c) + " is not a member of the subject's views");
  }

  /// Conditioning references for a target, with the target itself removed when it belongs
  /// to X. Slot tags are kept so remaining views keep their temporal indices.
  void references_for(int target, std::vector<Tensor>& refs, std::vector<int>& tags) const {
    check_conditioning();
    refs.clear();
    tags.clear();
    for (std::size_t k = 0; k < cond.size(); ++k) {
      if (cond[k] == target) continue;
      refs.push_back(conditioned[std::size_t(cond[k])]);
      tags.push_back(int(k) + 1);
    }
  }

  static SubjectDataset from_views(const std::vector<ViewRecord>& views, const std::vector<int>& prompt, int n_c) {
    MV3D_REQUIRE(!views.empty(), "subject has no views");
    SubjectDataset d;
    for (const auto& v : views) {
      d.images.push_back(v.rgb);
      d.frames.push_back(as_frame(to_model_range(v.rgb)));
      d.conditioned.push_back(as_frame(to_model_range(mask_background(v.rgb, v.mask))));
      d.masks.push_back(v.mask);
      d.logos.push_back(v.logo);
      d.cameras.push_back(v.camera);
    }
    d.prompt = prompt;
    d.class_token = prompt.empty() ? vocab::kFirstClass : prompt.back();
    d.cond = select_conditioning_views(d.azimuths(), n_c);
    return d;
  }

  static SubjectDataset load(const std::filesystem::path& dir, int n_c) {
    SubjectFiles f = read_subject(dir);
    std::vector<int> prompt;
    try {
      prompt = vocab::tokenize(f.prompt);
    } catch (const ContractViolation& e) {
      throw ConfigError("bad prompt in " + (dir / "prompt.txt").string() + ": " + e.what());
    }
    return from_views(f.views, prompt, n_c);
  }
};

/// Prompt written into a generated subject: the universal "a video of a <V> C".
inline std::string subject_prompt_text(const ObjectRecipe& r) {
  return vocab::detokenize(vocab::subject_prompt(r.class_token()));
}

// ---------------------------------------------------------------------------------------------
// Generic corpora standing in for large pretraining data. Object seeds start at
// kCorpusSeedBase so they never coincide with subject seeds used for personalization.

inline constexpr std::uint64_t kCorpusSeedBase = 1000000;

struct PretrainPair {
  Tensor reference;  // model range [1 x H x W x 3], white background
  Tensor target;     // model range [1 x H x W x 3], noise or gradient background
  std::vector<int> prompt;
  int slot = 1;  // reference slot tag in [1, slots]
};

struct PairMix {
  int slots = 1;  // reference slot drawn from [1, slots]
  double turn_prob = 0.75;
  double max_turn_deg = 135.0;
  double white_prob = 0.0;  // target keeps the white background
  double noise_prob = 0.5;  // random-noise background; the rest get a gradient
};

/// Reference: white-background render of a corpus object. Target: the same object composited
/// onto a random-noise or gradient background (or left on white with probability white_prob),
/// from the same pose or, with probability turn_prob, turned by up to +-max_turn_deg.
inline PretrainPair make_pretrain_pair(Rng& rng, int size, int corpus_objects, const PairMix& mix = {}) {
  const std::uint64_t obj = kCorpusSeedBase + rng.index(std::size_t(corpus_objects));
  SceneSpec spec = default_scene(obj, 1, size);
  const double az = rng.uniform(0.0, 360.0);
  const double turn = rng.uniform(-mix.max_turn_deg, mix.max_turn_deg);
  const double az2 = rng.uniform() < mix.turn_prob ? az + turn : az;
  const Camera c1 = ring_camera(spec.K, spec.ring.radius, az, spec.ring.elevation_deg);
  const Camera c2 = ring_camera(spec.K, spec.ring.radius, az2, spec.ring.elevation_deg);
  PretrainPair p;
  p.reference = as_frame(to_model_range(render_view(spec, c1).rgb));
  const double u = rng.uniform();
  spec.background = u < mix.white_prob                    ? Background::White
                    : u < mix.white_prob + mix.noise_prob ? Background::Noise
                                                          : Background::Gradient;
  spec.background_seed = rng.next_u64();
  p.target = as_frame(to_model_range(render_view(spec, c2).rgb));
  p.prompt = vocab::class_prompt(spec.object.class_token());
  p.slot = 1 + int(rng.index(std::size_t(std::max(mix.slots, 1))));
  return p;
}

struct BackboneSample {
  Tensor frames;  // model range [T x H x W x 3]
  std::vector<Tensor> refs;  // clean white-background views [1 x H x W x 3], tagged 1..n
  std::vector<int> prompt;
};

struct BackboneMix {
  int clip_frames = 4;
  double clip_prob = 0.25;
  double cond_prob = 0.5;
  int max_refs = 4;
  double cond_turn_deg = 60.0;
};

/// Class-prompted renders of corpus objects. With probability cond_prob the sample is
/// image-conditioned: 1..max_refs clean views spread around the orbit plus one target view
/// turned by up to +-cond_turn_deg from one of them. Otherwise a single random view, or
/// (with probability clip_prob) a short orbit clip with "orbit" appended to the prompt.
inline BackboneSample make_backbone_sample(Rng& rng, int size, int corpus_objects, const BackboneMix& mix) {
  const std::uint64_t obj = kCorpusSeedBase + rng.index(std::size_t(corpus_objects));
  SceneSpec spec = default_scene(obj, 1, size);
  const double az = rng.uniform(0.0, 360.0);
  auto view = [&](double a) {
    return as_frame(to_model_range(render_view(spec, ring_camera(spec.K, spec.ring.radius, a, spec.ring.elevation_deg)).rgb));
  };
  BackboneSample s;
  s.prompt = vocab::class_prompt(spec.object.class_token());
  if (mix.max_refs > 0 && rng.uniform() < mix.cond_prob) {
    const int n = 1 + int(rng.index(std::size_t(mix.max_refs)));
    for (int k = 0; k < n; ++k) s.refs.push_back(view(az + 360.0 * k / n));
    const int anchor = int(rng.index(std::size_t(n)));
    s.frames = view(az + 360.0 * anchor / n + rng.uniform(-mix.cond_turn_deg, mix.cond_turn_deg));
    return s;
  }
  const bool clip = mix.clip_frames > 1 && rng.uniform() < mix.clip_prob;
  const int n = clip ? mix.clip_frames : 1;
  s.frames = Tensor({std::size_t(n), std::size_t(size), std::size_t(size), 3});
  const std::size_t per = std::size_t(size * size * 3);
  for (int f = 0; f < n; ++f) {
    const Tensor img = view(az + 360.0 * f / 12.0);
    std::copy(img.vec().begin(), img.vec().end(), s.frames.vec().begin() + std::ptrdiff_t(per * std::size_t(f)));
  }
  if (clip) s.prompt = vocab::with_orbit(s.prompt);
  return s;
}

}  // namespace mv3d
