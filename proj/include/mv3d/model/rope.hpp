#pragma once

#include <cmath>

#include "mv3d/core/ops.hpp"
#include "mv3d/model/config.hpp"
#include "mv3d/model/tokens.hpp"

namespace mv3d {

namespace detail {

template <class T>
void fill_rope(const ModelConfig& cfg, const TokenLayout& layout, BasicTensor<T>& cos_t, BasicTensor<T>& sin_t) {
  const int hd = cfg.head_dim(), half = hd / 2, d2 = cfg.hidden / 2;
  const int nt = cfg.rope_t_dim() / 2, ny = cfg.rope_y_dim() / 2;
  cos_t = BasicTensor<T>({layout.size(), std::size_t(d2)});
  sin_t = BasicTensor<T>({layout.size(), std::size_t(d2)});
  for (std::size_t r = 0; r < layout.size(); ++r) {
    const Position& p = layout.pos[r];
    for (int i = 0; i < half; ++i) {
      double angle;
      bool masked = false;
      if (i < nt) {
        angle = p.t * std::pow(cfg.rope_base, -2.0 * i / cfg.rope_t_dim());
        masked = p.t == kTextTime && layout.seg[r].kind == SegmentKind::Text;
      } else if (i < nt + ny) {
        angle = p.y * std::pow(cfg.rope_base, -2.0 * (i - nt) / cfg.rope_y_dim());
      } else {
        angle = p.x * std::pow(cfg.rope_base, -2.0 * (i - nt - ny) / cfg.rope_x_dim());
      }
      const T c = masked ? T(0) : T(std::cos(angle));
      const T s = masked ? T(0) : T(std::sin(angle));
      for (int h = 0; h < cfg.heads; ++h) {
        cos_t.at(r, std::size_t(h * half + i)) = c;
        sin_t.at(r, std::size_t(h * half + i)) = s;
      }
    }
  }
}

}  // namespace detail

/// Rotary encoding of q or k [L x d]: per head, the first half of the pairs rotate with the
/// temporal index, the next quarter with y and the last quarter with x, at angle
/// index * base^(-2j / axis_dim). Text rows have their temporal pairs zeroed.
template <class T>
Var<T> apply_rope(const ModelConfig& cfg, const TokenLayout& layout, Var<T> qk) {
  MV3D_REQUIRE(qk.value().rank() == 2 && qk.value().rows() == layout.size() &&
                   qk.value().cols() == std::size_t(cfg.hidden),
               "apply_rope expects [L x d], got " + shape_str(qk.shape()));
  BasicTensor<T> c, s;
  detail::fill_rope(cfg, layout, c, s);
  return rotate_pairs(qk, c, s);
}

}  // namespace mv3d
