#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "mv3d/adapters/lora.hpp"
#include "mv3d/model/params.hpp"
#include "mv3d/model/rope.hpp"
#include "mv3d/model/tokens.hpp"

namespace mv3d {

/// Softmax probabilities of every (block, head), captured during a forward pass.
struct AttentionRecord {
  TokenLayout layout;
  int blocks = 0;
  int heads = 0;
  std::vector<Tensor> probs;  // block-major, each [L x L]

  const Tensor& at(int block, int head) const {
    MV3D_REQUIRE(block >= 0 && block < blocks && head >= 0 && head < heads, "attention record index out of range");
    return probs[std::size_t(block * heads + head)];
  }
};

/// One velocity evaluation. Reference view k (1-based, as given in ref_views) is placed at
/// temporal index k; target frame f at cond_slots + 1 + f.
template <class T>
struct DitInput {
  Var<T> z;                      // [T x H x W x C]
  double t = 0.0;                // flow time in [0, 1]
  std::vector<Var<T>> refs;      // each [1 x H x W x C]
  std::vector<int> ref_views;    // REF(k) tags; empty means 1..refs.size()
  std::vector<int> prompt;
  int cond_slots = -1;           // N_c used for the target offset; -1 means max(ref_views)
  std::optional<int> target_t0;  // explicit override of the first target temporal index
};

template <class T>
std::vector<int> ref_view_tags(const DitInput<T>& in) {
  if (!in.ref_views.empty()) {
    MV3D_REQUIRE(in.ref_views.size() == in.refs.size(), "ref_views must tag every reference");
    return in.ref_views;
  }
  std::vector<int> v(in.refs.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = int(i) + 1;
  return v;
}

template <class T>
int target_t0(const DitInput<T>& in) {
  if (in.target_t0) return *in.target_t0;
  int slots = in.cond_slots;
  if (slots < 0) {
    slots = 0;
    for (int k : ref_view_tags(in)) slots = std::max(slots, k);
  }
  return slots + 1;
}

/// Concatenates [TARGET | REF(k)... | TEXT] token blocks along the sequence axis and adds the
/// timestep embedding to every row.
template <class T>
TokenSequence<T> assemble_sequence(const BoundModel<T>& model, const BoundAdapters<T>* adapters,
                                   const DitInput<T>& in) {
  const ModelConfig& cfg = *model.config;
  MV3D_REQUIRE(in.t >= 0.0 && in.t <= 1.0, "timestep must lie in [0, 1]");
  MV3D_REQUIRE(int(in.refs.size()) <= cfg.max_views,
               "at most " + std::to_string(cfg.max_views) + " conditioning views");
  const auto tags = ref_view_tags(in);

  std::vector<Var<T>> parts;
  TokenLayout layout;
  auto push = [&](TokenSequence<T> s) {
    parts.push_back(s.tokens);
    layout.append(s.layout);
  };
  push(tokenize_frames(model, in.z, SegmentTag{SegmentKind::Target, 0}, target_t0(in), adapters));
  for (std::size_t r = 0; r < in.refs.size(); ++r) {
    MV3D_REQUIRE(in.refs[r].shape().size() == 4 && in.refs[r].shape()[0] == 1,
                 "each reference must be a single frame [1 x H x W x C]");
    MV3D_REQUIRE(tags[r] >= 1, "reference view tags are 1-based");
    push(tokenize_frames(model, in.refs[r], SegmentTag{SegmentKind::Ref, tags[r]}, tags[r], adapters));
  }
  push(embed_text(model, in.prompt, adapters));

  Var<T> x = concat(parts, 0);
  Var<T> temb = model.w.text_embed.tape->constant(timestep_embedding<T>(in.t, cfg.hidden));
  return {add_rowvec(x, temb), std::move(layout)};
}

/// Multi-head bidirectional attention over the whole joint sequence (Q, K, V through routed
/// projections, rotary encoding on Q and K), followed by the routed output projection.
template <class T>
Var<T> joint_attention(const ModelConfig& cfg, const TokenLayout& layout, Var<T> h, const Block<Var<T>>& blk,
                       const BoundAdapters<T>* adapters, int block, AttentionRecord* capture) {
  Var<T> q = routed_linear(h, blk.q, layout, adapters, block, Site::Q);
  Var<T> k = routed_linear(h, blk.k, layout, adapters, block, Site::K);
  Var<T> v = routed_linear(h, blk.v, layout, adapters, block, Site::V);
  q = apply_rope(cfg, layout, q);
  k = apply_rope(cfg, layout, k);
  const std::size_t hd = std::size_t(cfg.head_dim());
  const T inv_sqrt = T(1.0 / std::sqrt(double(hd)));
  std::vector<Var<T>> heads;
  for (int hh = 0; hh < cfg.heads; ++hh) {
    const std::size_t b = std::size_t(hh) * hd;
    Var<T> qh = slice(q, 1, b, b + hd);
    Var<T> kh = slice(k, 1, b, b + hd);
    Var<T> vh = slice(v, 1, b, b + hd);
    Var<T> p = softmax(scale(matmul_nt(qh, kh), inv_sqrt));
    if (capture) capture->probs.push_back(Tensor::cast(p.value()));
    heads.push_back(matmul(p, vh));
  }
  Var<T> a = heads.size() == 1 ? heads[0] : concat(heads, 1);
  return routed_linear(a, blk.o, layout, adapters, block, Site::O);
}

/// Pre-norm residual blocks over the joint sequence; the velocity head reads target rows only.
/// Returns a tensor shaped like in.z.
template <class T>
Var<T> dit_forward(const BoundModel<T>& model, const BoundAdapters<T>* adapters, const DitInput<T>& in,
                   AttentionRecord* capture = nullptr) {
  const ModelConfig& cfg = *model.config;
  TokenSequence<T> seq = assemble_sequence(model, adapters, in);
  if (capture) {
    capture->layout = seq.layout;
    capture->blocks = cfg.blocks;
    capture->heads = cfg.heads;
    capture->probs.clear();
  }
  Var<T> x = seq.tokens;
  for (int b = 0; b < cfg.blocks; ++b) {
    const auto& blk = model.w.blocks[std::size_t(b)];
    Var<T> h = layer_norm(x, blk.ln1.gain, blk.ln1.bias);
    x = add(x, joint_attention(cfg, seq.layout, h, blk, adapters, b, capture));
    Var<T> h2 = layer_norm(x, blk.ln2.gain, blk.ln2.bias);
    Var<T> f = gelu(routed_linear(h2, blk.fc1, seq.layout, adapters, b, Site::Fc1));
    x = add(x, routed_linear(f, blk.fc2, seq.layout, adapters, b, Site::Fc2));
  }
  const auto [tb, te] = seq.layout.range(SegmentKind::Target);
  Var<T> xt = slice(x, 0, tb, te);
  xt = layer_norm(xt, model.w.ln_out.gain, model.w.ln_out.bias);
  Var<T> v = add_rowvec(matmul_nt(xt, model.w.head.weight), model.w.head.bias);
  return unpatchify(cfg, v);
}

/// Untracked velocity evaluation on stored tensors.
inline Tensor predict_velocity(const ModelParams<float>& params, const AdapterSet<float>* adapters,
                               const Tensor& z, double t, const std::vector<Tensor>& refs,
                               const std::vector<int>& ref_views, const std::vector<int>& prompt,
                               int cond_slots = -1, AttentionRecord* capture = nullptr) {
  Tape<float> tape;
  BoundModel<float> m = bind_model(tape, params, false);
  std::optional<BoundAdapters<float>> a;
  if (adapters) a = bind_adapters(tape, *adapters, false, false);
  DitInput<float> in;
  in.z = tape.constant(z);
  in.t = t;
  for (const auto& r : refs) in.refs.push_back(tape.constant(r));
  in.ref_views = ref_views;
  in.prompt = prompt;
  in.cond_slots = cond_slots;
  return dit_forward(m, a ? &*a : nullptr, in, capture).value();
}

}  // namespace mv3d
