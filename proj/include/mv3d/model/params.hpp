#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mv3d/core/checkpoint.hpp"
#include "mv3d/core/rng.hpp"
#include "mv3d/core/tape.hpp"
#include "mv3d/model/config.hpp"

namespace mv3d {

// Weight structures are generic over the leaf type so the same layout holds tensors
// (storage) and tape variables (a bound forward pass). Visitors walk several instances in
// lockstep and hand each field's name plus one reference per instance to a callback.

template <class L>
struct Linear {
  L weight;  // [out x in]
  L bias;    // [out]
};

template <class L>
struct Norm {
  L gain;
  L bias;
};

template <class L>
struct Block {
  Norm<L> ln1;
  Linear<L> q, k, v, o;
  Norm<L> ln2;
  Linear<L> fc1, fc2;
};

template <class L>
struct DitWeights {
  Linear<L> patch_in;  // image input projection [d x p*p*c]
  L text_embed;        // [vocab x d]
  Linear<L> text_in;   // text input projection [d x d]
  std::vector<Block<L>> blocks;
  Norm<L> ln_out;
  Linear<L> head;  // velocity head [p*p*c x d]
};

namespace fields {

template <class F, class... O>
void visit_linear(F& f, const std::string& p, O&... o) {
  f(p + ".weight", o.weight...);
  f(p + ".bias", o.bias...);
}

template <class F, class... O>
void visit_norm(F& f, const std::string& p, O&... o) {
  f(p + ".gain", o.gain...);
  f(p + ".bias", o.bias...);
}

template <class F, class... O>
void visit_block(F& f, const std::string& p, O&... o) {
  visit_norm(f, p + ".ln1", o.ln1...);
  visit_linear(f, p + ".q", o.q...);
  visit_linear(f, p + ".k", o.k...);
  visit_linear(f, p + ".v", o.v...);
  visit_linear(f, p + ".o", o.o...);
  visit_norm(f, p + ".ln2", o.ln2...);
  visit_linear(f, p + ".fc1", o.fc1...);
  visit_linear(f, p + ".fc2", o.fc2...);
}

template <class F, class First, class... O>
void visit_dit(F& f, const std::string& p, First& first, O&... o) {
  visit_linear(f, p + ".patch_in", first.patch_in, o.patch_in...);
  f(p + ".text_embed", first.text_embed, o.text_embed...);
  visit_linear(f, p + ".text_in", first.text_in, o.text_in...);
  for (std::size_t b = 0; b < first.blocks.size(); ++b)
    visit_block(f, p + ".block" + std::to_string(b), first.blocks[b], o.blocks[b]...);
  visit_norm(f, p + ".ln_out", first.ln_out, o.ln_out...);
  visit_linear(f, p + ".head", first.head, o.head...);
}

}  // namespace fields

/// Frozen backbone parameters (theta).
template <class T>
struct ModelParams {
  ModelConfig config;
  DitWeights<BasicTensor<T>> w;

  template <class F>
  void for_each(F&& f) {
    auto g = [&](const std::string& n, BasicTensor<T>& t) { f(n, t); };
    fields::visit_dit(g, "theta/dit", w);
  }
  template <class F>
  void for_each(F&& f) const {
    auto g = [&](const std::string& n, const BasicTensor<T>& t) { f(n, t); };
    fields::visit_dit(g, "theta/dit", w);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const BasicTensor<T>& t) { n += t.size(); });
    return n;
  }
};

namespace detail {

template <class T>
Linear<BasicTensor<T>> init_linear(Rng& rng, int out, int in, double gain = 1.0) {
  Linear<BasicTensor<T>> l;
  l.weight = rng.normal_tensor<T>({std::size_t(out), std::size_t(in)}, gain / std::sqrt(double(in)));
  l.bias = BasicTensor<T>({std::size_t(out)}, T(0));
  return l;
}

template <class T>
Norm<BasicTensor<T>> init_norm(int n) {
  return {BasicTensor<T>({std::size_t(n)}, T(1)), BasicTensor<T>({std::size_t(n)}, T(0))};
}

}  // namespace detail

/// Seeded fresh initialization. Residual-branch outputs are scaled down by sqrt(2*blocks).
template <class T>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams<T> m;
  m.config = cfg;
  const int d = cfg.hidden;
  const double resid = 1.0 / std::sqrt(2.0 * cfg.blocks);
  m.w.patch_in = detail::init_linear<T>(rng, d, cfg.patch_dim());
  m.w.text_embed = rng.normal_tensor<T>({std::size_t(cfg.vocab_size), std::size_t(d)}, 1.0);
  m.w.text_in = detail::init_linear<T>(rng, d, d);
  for (int b = 0; b < cfg.blocks; ++b) {
    Block<BasicTensor<T>> blk;
    blk.ln1 = detail::init_norm<T>(d);
    blk.q = detail::init_linear<T>(rng, d, d);
    blk.k = detail::init_linear<T>(rng, d, d);
    blk.v = detail::init_linear<T>(rng, d, d);
    blk.o = detail::init_linear<T>(rng, d, d, resid);
    blk.ln2 = detail::init_norm<T>(d);
    blk.fc1 = detail::init_linear<T>(rng, cfg.mlp_hidden(), d);
    blk.fc2 = detail::init_linear<T>(rng, d, cfg.mlp_hidden(), resid);
    m.w.blocks.push_back(std::move(blk));
  }
  m.w.ln_out = detail::init_norm<T>(d);
  m.w.head = detail::init_linear<T>(rng, cfg.patch_dim(), d);
  return m;
}

/// Backbone tensors bound to a tape, tracked or not.
template <class T>
struct BoundModel {
  const ModelConfig* config = nullptr;
  DitWeights<Var<T>> w;
};

template <class T>
BoundModel<T> bind_model(Tape<T>& tape, const ModelParams<T>& params, bool track) {
  BoundModel<T> b;
  b.config = &params.config;
  b.w.blocks.resize(params.w.blocks.size());
  auto f = [&](const std::string&, const BasicTensor<T>& src, Var<T>& dst) {
    dst = track ? tape.leaf(src, true) : tape.constant(src);
  };
  fields::visit_dit(f, "theta/dit", params.w, b.w);
  return b;
}

/// Gradient of every backbone tensor, in for_each order; absent when untracked.
template <class T>
std::vector<std::pair<std::string, std::optional<BasicTensor<T>>>> model_grads(
    const Tape<T>& tape, const ModelParams<T>& params, const BoundModel<T>& bound) {
  std::vector<std::pair<std::string, std::optional<BasicTensor<T>>>> out;
  auto f = [&](const std::string& n, const BasicTensor<T>&, const Var<T>& v) {
    out.emplace_back(n, tape.grad(v));
  };
  fields::visit_dit(f, "theta/dit", params.w, bound.w);
  return out;
}

inline Checkpoint model_to_checkpoint(const ModelParams<float>& m) {
  Checkpoint ck;
  const auto fp = m.config.fingerprint();
  ck.push_back({"theta/config", Tensor({fp.size()}, fp)});
  m.for_each([&](const std::string& n, const Tensor& t) { ck.push_back({n, t}); });
  return ck;
}

inline ModelParams<float> model_from_checkpoint(const Checkpoint& ck, const ModelConfig& cfg) {
  const Tensor* fp = find_tensor(ck, "theta/config");
  if (!fp || fp->vec() != cfg.fingerprint())
    throw ConfigError("backbone checkpoint does not match the model configuration");
  ModelParams<float> m = init_model<float>(cfg, 0);
  m.for_each([&](const std::string& n, Tensor& t) {
    const Tensor* src = find_tensor(ck, n);
    if (!src) throw ConfigError("backbone checkpoint is missing " + n);
    if (src->shape() != t.shape()) throw ConfigError("backbone checkpoint shape mismatch for " + n);
    t = *src;
  });
  return m;
}

}  // namespace mv3d
