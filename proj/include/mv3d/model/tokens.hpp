#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mv3d/adapters/lora.hpp"
#include "mv3d/core/ops.hpp"
#include "mv3d/model/config.hpp"
#include "mv3d/model/params.hpp"

namespace mv3d {

/// Text tokens sit on a reserved temporal index. It is a sentinel, not a frame position:
/// their temporal rotary sub-dimensions are masked instead of rotated.
inline constexpr int kTextTime = -1;

struct Position {
  int t = 0, y = 0, x = 0;
  friend bool operator==(const Position&, const Position&) = default;
};

struct SegmentTag {
  SegmentKind kind = SegmentKind::Target;
  int view = 0;  // k for REF(k), 1-based; 0 otherwise

  std::string label() const {
    if (kind == SegmentKind::Ref) return "ref" + std::to_string(view);
    return to_string(kind);
  }
  friend bool operator==(const SegmentTag&, const SegmentTag&) = default;
};

struct TokenLayout {
  std::vector<Position> pos;
  std::vector<SegmentTag> seg;

  std::size_t size() const { return pos.size(); }
  void append(const TokenLayout& o) {
    pos.insert(pos.end(), o.pos.begin(), o.pos.end());
    seg.insert(seg.end(), o.seg.begin(), o.seg.end());
  }
  // Contiguous [begin, end) row range of the given kind; rows of one kind must be adjacent.
  std::pair<std::size_t, std::size_t> range(SegmentKind kind) const {
    std::size_t b = seg.size(), e = 0;
    for (std::size_t i = 0; i < seg.size(); ++i)
      if (seg[i].kind == kind) {
        b = std::min(b, i);
        e = i + 1;
      }
    if (b >= e) return {0, 0};
    for (std::size_t i = b; i < e; ++i)
      MV3D_REQUIRE(seg[i].kind == kind, "segment rows are not contiguous");
    return {b, e};
  }
};

template <class T>
struct TokenSequence {
  Var<T> tokens;  // [L x d]
  TokenLayout layout;
  std::size_t size() const { return layout.size(); }
};

/// Positions for `frames` frames of a patch grid, frame f at temporal index t_offset + f.
inline TokenLayout frame_layout(const ModelConfig& cfg, int frames, SegmentTag tag, int t_offset) {
  MV3D_REQUIRE(frames >= 1, "need at least one frame");
  TokenLayout l;
  for (int f = 0; f < frames; ++f)
    for (int y = 0; y < cfg.grid_h(); ++y)
      for (int x = 0; x < cfg.grid_w(); ++x) {
        l.pos.push_back({t_offset + f, y, x});
        l.seg.push_back(tag);
      }
  return l;
}

inline TokenLayout text_layout(const ModelConfig& cfg) {
  TokenLayout l;
  for (int i = 0; i < cfg.max_text; ++i) {
    l.pos.push_back({kTextTime, i, i});
    l.seg.push_back({SegmentKind::Text, 0});
  }
  return l;
}

/// Flat source index for every element of the patch layout [T*gh*gw x p*p*C] of frames
/// stored [T x H x W x C]. Row order (f, gy, gx), column order (py, px, c).
inline std::vector<std::size_t> patchify_index(const ModelConfig& cfg, int frames) {
  const int p = cfg.patch, C = cfg.channels, H = cfg.height, W = cfg.width;
  std::vector<std::size_t> idx;
  idx.reserve(std::size_t(frames) * H * W * C);
  for (int f = 0; f < frames; ++f)
    for (int gy = 0; gy < cfg.grid_h(); ++gy)
      for (int gx = 0; gx < cfg.grid_w(); ++gx)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            for (int c = 0; c < C; ++c)
              idx.push_back(((std::size_t(f) * H + gy * p + py) * W + gx * p + px) * C + c);
  return idx;
}

inline std::vector<std::size_t> unpatchify_index(const ModelConfig& cfg, int frames) {
  const auto fwd = patchify_index(cfg, frames);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return inv;
}

inline int frame_count(const ModelConfig& cfg, const Shape& s) {
  MV3D_REQUIRE(s.size() == 4, "frames must be [T x H x W x C], got " + shape_str(s));
  MV3D_REQUIRE(s[1] % std::size_t(cfg.patch) == 0 && s[2] % std::size_t(cfg.patch) == 0,
               "frame size " + shape_str(s) + " not divisible by patch size " + std::to_string(cfg.patch));
  MV3D_REQUIRE(int(s[1]) == cfg.height && int(s[2]) == cfg.width && int(s[3]) == cfg.channels,
               "frame shape " + shape_str(s) + " does not match the model configuration");
  MV3D_REQUIRE(s[0] >= 1, "need at least one frame");
  return int(s[0]);
}

template <class T>
Var<T> patchify(const ModelConfig& cfg, Var<T> frames) {
  const int n = frame_count(cfg, frames.shape());
  return gather(frames, patchify_index(cfg, n),
                Shape{std::size_t(n * cfg.n_img()), std::size_t(cfg.patch_dim())});
}

template <class T>
Var<T> unpatchify(const ModelConfig& cfg, Var<T> patches) {
  const std::size_t per = std::size_t(cfg.n_img());
  MV3D_REQUIRE(patches.value().rank() == 2 && patches.value().rows() % per == 0 &&
                   patches.value().cols() == std::size_t(cfg.patch_dim()),
               "bad patch layout " + shape_str(patches.shape()));
  const int n = int(patches.value().rows() / per);
  return gather(patches, unpatchify_index(cfg, n),
                Shape{std::size_t(n), std::size_t(cfg.height), std::size_t(cfg.width), std::size_t(cfg.channels)});
}

/// Linear projection whose rows are split into segment groups, each optionally carrying a
/// low-rank delta. Rows of a frozen group get exactly the frozen result.
template <class T>
Var<T> routed_linear(Var<T> x, const Linear<Var<T>>& lin, const TokenLayout& layout,
                     const BoundAdapters<T>* adapters, int block, Site site) {
  Var<T> y = add_rowvec(matmul_nt(x, lin.weight), lin.bias);
  if (!adapters) return y;
  const std::size_t L = x.value().rows(), out = y.value().cols();
  MV3D_REQUIRE(layout.size() == L, "layout does not match token count");
  std::vector<Var<T>> parts;
  bool any = false;
  std::size_t cursor = 0;
  for (SegmentKind kind : {SegmentKind::Target, SegmentKind::Ref, SegmentKind::Text}) {
    const auto [b, e] = layout.range(kind);
    if (b == e) continue;
    MV3D_REQUIRE(b == cursor, "segments must be ordered target, ref, text");
    cursor = e;
    const LoraPair<Var<T>>* pair = adapters->pair_for(kind, block, site);
    if (!pair) {
      parts.push_back(x.tape->constant(BasicTensor<T>({e - b, out}, T(0))));
      continue;
    }
    Var<T> xs = (b == 0 && e == L) ? x : slice(x, 0, b, e);
    Var<T> d = matmul_nt(matmul_nt(xs, pair->down), pair->up);
    parts.push_back(scale(d, T(adapters->lora.scale())));
    any = true;
  }
  MV3D_REQUIRE(cursor == L, "layout has untagged rows");
  if (!any) return y;
  return add(y, parts.size() == 1 ? parts[0] : concat(parts, 0));
}

inline TokenLayout tokenize_frames_layout(const ModelConfig& cfg, const Shape& frames, SegmentTag tag,
                                          int t_offset) {
  return frame_layout(cfg, frame_count(cfg, frames), tag, t_offset);
}

/// Patch embedding of frames [T x H x W x C] (pixel range [-1, 1]) with positions
/// (t_offset + f, y, x), through the routed input projection.
template <class T>
TokenSequence<T> tokenize_frames(const BoundModel<T>& model, Var<T> frames, SegmentTag tag, int t_offset,
                                 const BoundAdapters<T>* adapters = nullptr) {
  const ModelConfig& cfg = *model.config;
  TokenSequence<T> s;
  s.layout = tokenize_frames_layout(cfg, frames.shape(), tag, t_offset);
  s.tokens = routed_linear(patchify(cfg, frames), model.w.patch_in, s.layout, adapters, -1, Site::Input);
  return s;
}

inline std::vector<int> pad_prompt(const ModelConfig& cfg, const std::vector<int>& prompt) {
  MV3D_REQUIRE(int(prompt.size()) <= cfg.max_text, "prompt longer than max text length");
  std::vector<int> ids(std::size_t(cfg.max_text), vocab::kPad);
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    MV3D_REQUIRE(prompt[i] >= 0 && prompt[i] < cfg.vocab_size, "unknown token id " + std::to_string(prompt[i]));
    ids[i] = prompt[i];
  }
  return ids;
}

template <class T>
TokenSequence<T> embed_text(const BoundModel<T>& model, const std::vector<int>& prompt,
                            const BoundAdapters<T>* adapters = nullptr) {
  const ModelConfig& cfg = *model.config;
  const auto ids = pad_prompt(cfg, prompt);
  TokenSequence<T> s;
  s.layout = text_layout(cfg);
  Var<T> e = take_rows(model.w.text_embed, std::vector<std::size_t>(ids.begin(), ids.end()));
  s.tokens = routed_linear(e, model.w.text_in, s.layout, adapters, -1, Site::Input);
  return s;
}

/// Sinusoidal embedding of t in [0, 1] (scaled by 1000), width d.
template <class T>
BasicTensor<T> timestep_embedding(double t, int d) {
  BasicTensor<T> e({std::size_t(d)});
  const int half = d / 2;
  for (int j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * j / half);
    e[std::size_t(j)] = T(std::sin(1000.0 * t * freq));
    e[std::size_t(j + half)] = T(std::cos(1000.0 * t * freq));
  }
  return e;
}

}  // namespace mv3d
