#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "mv3d/core/rng.hpp"
#include "mv3d/model/dit.hpp"

namespace mv3d {

// Rectified flow: z_t = (1 - t) x + t eps, target velocity eps - x. Pixels live in [-1, 1]
// inside the model.

template <class T>
struct NoiseDraw {
  double t = 0.0;
  BasicTensor<T> eps;
  std::uint64_t seed = 0;
};

/// t ~ U[0, 1], eps ~ N(0, I) shaped like the clean target, both from `seed`.
template <class T>
NoiseDraw<T> draw_noise(std::uint64_t seed, const Shape& shape) {
  Rng rng(seed);
  NoiseDraw<T> d;
  d.seed = seed;
  d.t = rng.uniform();
  d.eps = rng.normal_tensor<T>(shape);
  return d;
}

template <class T>
struct Corrupted {
  BasicTensor<T> z;
  BasicTensor<T> v;  // target velocity
};

template <class T>
Corrupted<T> corrupt(const BasicTensor<T>& x, const NoiseDraw<T>& draw) {
  MV3D_REQUIRE(draw.t >= 0.0 && draw.t <= 1.0, "flow time must lie in [0, 1]");
  MV3D_REQUIRE(x.shape() == draw.eps.shape(), "noise shape " + shape_str(draw.eps.shape()) +
                                                  " does not match " + shape_str(x.shape()));
  Corrupted<T> c{BasicTensor<T>(x.shape()), BasicTensor<T>(x.shape())};
  const T t = T(draw.t);
  for (std::size_t i = 0; i < x.size(); ++i) {
    c.z[i] = (T(1) - t) * x[i] + t * draw.eps[i];
    c.v[i] = draw.eps[i] - x[i];
  }
  return c;
}

inline Tensor to_model_range(const Tensor& img01) {
  Tensor out = img01;
  for (auto& v : out.vec()) v = 2.0f * v - 1.0f;
  return out;
}

inline Tensor to_unit_range(const Tensor& model) {
  Tensor out = model;
  for (auto& v : out.vec()) v = std::clamp(0.5f * (v + 1.0f), 0.0f, 1.0f);
  return out;
}

/// Shared body of the three objectives: mean squared error between the predicted and
/// target velocity of one noisy target.
template <class T>
Var<T> velocity_loss(const BoundModel<T>& model, const BoundAdapters<T>* adapters, const BasicTensor<T>& x,
                     const NoiseDraw<T>& draw, const std::vector<Var<T>>& refs, const std::vector<int>& ref_views,
                     int cond_slots, const std::vector<int>& prompt) {
  Tape<T>& tape = *model.w.head.weight.tape;
  const Corrupted<T> c = corrupt(x, draw);
  DitInput<T> in;
  in.z = tape.constant(c.z);
  in.t = draw.t;
  in.refs = refs;
  in.ref_views = ref_views;
  in.cond_slots = cond_slots;
  in.prompt = prompt;
  return mse(dit_forward(model, adapters, in), tape.constant(c.v));
}

/// Single-frame identity objective: no references, 3DB on target and text rows.
template <class T>
Var<T> loss_3db(const BoundModel<T>& model, const BoundAdapters<T>& adapters, const BasicTensor<T>& view,
                const std::vector<int>& prompt, const NoiseDraw<T>& draw) {
  MV3D_REQUIRE(view.rank() == 4 && view.dim(0) == 1, "the identity objective takes single-frame inputs only");
  return velocity_loss(model, &adapters, view, draw, {}, {}, 0, prompt);
}

/// Single-view pretraining objective: one white-background reference through the 3Dapter.
template <class T>
Var<T> loss_3dapter_pretrain(const BoundModel<T>& model, const BoundAdapters<T>& adapters,
                             const BasicTensor<T>& reference, const BasicTensor<T>& target,
                             const std::vector<int>& prompt, const NoiseDraw<T>& draw, int slot = 1,
                             int cond_slots = 1) {
  MV3D_REQUIRE(reference.rank() == 4 && reference.dim(0) == 1,
               "single-view pretraining takes exactly one reference frame");
  MV3D_REQUIRE(target.rank() == 4 && target.dim(0) == 1, "pretraining targets are single frames");
  Tape<T>& tape = *model.w.head.weight.tape;
  return velocity_loss(model, &adapters, target, draw, {tape.constant(reference)}, {slot}, cond_slots, prompt);
}

/// Multi-view objective on one target given conditioning references tagged by slot.
template <class T>
Var<T> loss_joint_views(const BoundModel<T>& model, const BoundAdapters<T>& adapters, const BasicTensor<T>& target,
                        const std::vector<BasicTensor<T>>& refs, const std::vector<int>& ref_views, int cond_slots,
                        const std::vector<int>& prompt, const NoiseDraw<T>& draw) {
  MV3D_REQUIRE(target.rank() == 4 && target.dim(0) == 1, "joint targets are single frames");
  Tape<T>& tape = *model.w.head.weight.tape;
  std::vector<Var<T>> rv;
  for (const auto& r : refs) rv.push_back(tape.constant(r));
  return velocity_loss(model, &adapters, target, draw, rv, ref_views, cond_slots, prompt);
}

// ---------------------------------------------------------------------------------------------
// Sampling

struct SamplerConfig {
  int steps = 16;
  std::uint64_t seed = 0;
  int frames = 1;
  std::vector<Tensor> refs;  // model range, each [1 x H x W x C]
  std::vector<int> ref_views;
  int cond_slots = -1;
  std::vector<int> prompt;
};

using VelocityField = std::function<Tensor(const Tensor& z, double t)>;

/// Euler integration of dz/dt = v from t = 1 down to t = 0 in equal steps.
inline Tensor euler_integrate(Tensor z, int steps, const VelocityField& field) {
  MV3D_REQUIRE(steps >= 1, "sampler needs at least one step");
  const double dt = 1.0 / steps;
  for (int s = 0; s < steps; ++s) {
    const double t = 1.0 - s * dt;
    const Tensor v = field(z, t);
    MV3D_REQUIRE(v.shape() == z.shape(), "velocity field changed the latent shape");
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= float(dt) * v[i];
  }
  return z;
}

/// Frames [T x H x W x C] in model range, clamped to [-1, 1].
inline Tensor sample(const ModelParams<float>& params, const AdapterSet<float>* adapters, const SamplerConfig& cfg) {
  MV3D_REQUIRE(cfg.steps >= 1, "sampler needs at least one step");
  MV3D_REQUIRE(cfg.frames >= 1, "sampler needs at least one frame");
  const ModelConfig& mc = params.config;
  Rng rng(cfg.seed);
  Tensor z1 = rng.normal_tensor<float>(
      {std::size_t(cfg.frames), std::size_t(mc.height), std::size_t(mc.width), std::size_t(mc.channels)});
  Tensor out = euler_integrate(std::move(z1), cfg.steps, [&](const Tensor& z, double t) {
    return predict_velocity(params, adapters, z, t, cfg.refs, cfg.ref_views, cfg.prompt, cfg.cond_slots);
  });
  for (auto& v : out.vec()) v = std::clamp(v, -1.0f, 1.0f);
  return out;
}

}  // namespace mv3d
