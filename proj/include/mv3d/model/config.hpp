#pragma once

#include <array>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mv3d/core/error.hpp"

namespace mv3d {

/// Fixed vocabulary of the miniature text encoder. Id 1 is the reserved subject identifier:
/// the backbone never sees it, so its meaning comes entirely from adaptation.
namespace vocab {

inline constexpr int kPad = 0;
inline constexpr int kIdentifier = 1;

inline const std::vector<std::string>& words() {
  static const std::vector<std::string> w = {
      "<pad>", "<V>",   "a",     "video", "of",   "orbit", "on",    "white", "background",
      "toy",   "mug",   "lamp",  "robot", "vase", "chair", "house", "plushie"};
  return w;
}

inline constexpr int kFirstClass = 9;
inline int size() { return static_cast<int>(words().size()); }
inline int num_classes() { return size() - kFirstClass; }

inline int id(std::string_view word) {
  const auto& w = words();
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i] == word) return static_cast<int>(i);
  throw ContractViolation("unknown vocabulary word '" + std::string(word) + "'");
}

inline int class_id(int class_index) {
  MV3D_REQUIRE(class_index >= 0 && class_index < num_classes(), "class index out of range");
  return kFirstClass + class_index;
}

inline std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  std::istringstream is{std::string(text)};
  std::string tok;
  while (is >> tok) ids.push_back(id(tok));
  return ids;
}

inline std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  for (int i : ids) {
    MV3D_REQUIRE(i >= 0 && i < size(), "token id out of range");
    if (!out.empty()) out += ' ';
    out += words()[static_cast<std::size_t>(i)];
  }
  return out;
}

// "a video of a C"
inline std::vector<int> class_prompt(int class_token) {
  return {id("a"), id("video"), id("of"), id("a"), class_token};
}

// "a video of a <V> C", the universal prompt shared by every view of a subject.
inline std::vector<int> subject_prompt(int class_token) {
  return {id("a"), id("video"), id("of"), id("a"), kIdentifier, class_token};
}

inline std::vector<int> with_orbit(std::vector<int> prompt) {
  prompt.push_back(id("orbit"));
  return prompt;
}

}  // namespace vocab

struct ModelConfig {
  int height = 16;
  int width = 16;
  int channels = 3;
  int patch = 4;
  int hidden = 64;
  int heads = 4;
  int blocks = 4;
  int mlp_ratio = 4;
  int vocab_size = vocab::size();
  int max_text = 8;
  int max_views = 4;
  double rope_base = 10000.0;

  int head_dim() const { return hidden / heads; }
  // Per-head split among (temporal, vertical, horizontal) = (1/2, 1/4, 1/4).
  int rope_t_dim() const { return head_dim() / 2; }
  int rope_y_dim() const { return head_dim() / 4; }
  int rope_x_dim() const { return head_dim() / 4; }
  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  int n_img() const { return grid_h() * grid_w(); }
  int patch_dim() const { return patch * patch * channels; }
  int mlp_hidden() const { return hidden * mlp_ratio; }
  int full_length(int n_views) const { return (1 + n_views) * n_img() + max_text; }

  void validate() const {
    MV3D_REQUIRE(height > 0 && width > 0 && patch > 0, "frame and patch sizes must be positive");
    MV3D_REQUIRE(height % patch == 0 && width % patch == 0, "patch size must divide frame height and width");
    MV3D_REQUIRE(heads > 0 && hidden % heads == 0, "hidden width must be divisible by head count");
    MV3D_REQUIRE(head_dim() % 8 == 0, "per-head dim must split into three even rotary sub-dims");
    MV3D_REQUIRE(blocks > 0 && mlp_ratio > 0, "block count and MLP ratio must be positive");
    MV3D_REQUIRE(max_text > 0 && max_views >= 0, "text length must be positive");
    MV3D_REQUIRE(vocab_size >= vocab::size(), "vocab size smaller than the built-in vocabulary");
  }

  // Stored in checkpoints to detect loading against a different architecture.
  std::vector<float> fingerprint() const {
    return {float(height), float(width), float(channels), float(patch), float(hidden), float(heads),
            float(blocks), float(mlp_ratio), float(vocab_size), float(max_text), float(max_views),
            float(rope_base)};
  }
};

}  // namespace mv3d
