#pragma once

// Independent reference computations shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mv3d/flow/flow.hpp"

namespace mv3d::oracle {

using Tensor64 = BasicTensor<double>;

struct FdResult {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose gradient is numerically
/// zero from dividing roundoff by roundoff.
inline double rel_error(double a, double n, double floor = 1e-3) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Central differences on `per_tensor` random entries of every tensor (all entries when 0).
/// `loss` recomputes the scalar objective from the current tensor values.
/// Only tensors whose index is congruent to `phase` modulo `stride` are probed.
inline FdResult fd_check(const std::vector<Tensor64*>& params, const std::vector<Tensor64>& analytic,
                         const std::function<double()>& loss, Rng& rng, std::size_t per_tensor,
                         std::size_t stride = 1, std::size_t phase = 0, double h = 1e-3) {
  FdResult r;
  for (std::size_t p = phase % stride; p < params.size(); p += stride) {
    Tensor64& t = *params[p];
    std::vector<std::size_t> idx;
    if (per_tensor == 0 || per_tensor >= t.size()) {
      for (std::size_t i = 0; i < t.size(); ++i) idx.push_back(i);
    } else {
      for (std::size_t k = 0; k < per_tensor; ++k) idx.push_back(rng.index(t.size()));
    }
    for (std::size_t i : idx) {
      const double x0 = t[i];
      t[i] = x0 + h;
      const double lp = loss();
      t[i] = x0 - h;
      const double lm = loss();
      t[i] = x0;
      const double num = (lp - lm) / (2 * h);
      r.max_rel = std::max(r.max_rel, rel_error(analytic[p][i], num));
      ++r.checked;
    }
  }
  return r;
}

/// Full forward pass (two target frames, two references, both adapter families with random
/// weights) in double precision against central differences. With stride k, seed s probes
/// tensors s mod k, s mod k + k, ...; k consecutive seeds cover every tensor.
inline FdResult dit_gradient_check(const ModelConfig& cfg, std::uint64_t seed, std::size_t per_tensor,
                                   std::size_t stride = 1) {
  ModelParams<double> params = init_model<double>(cfg, seed);
  AdapterSet<double> set = init_adapters<double>(cfg, LoraConfig{}, seed + 1);
  Rng rng(seed + 2);
  set.for_each([&](const std::string&, Tensor64& t) { t = rng.normal_tensor<double>(t.shape(), 0.1); });
  const Shape fs{2, std::size_t(cfg.height), std::size_t(cfg.width), std::size_t(cfg.channels)};
  const Shape rs{1, std::size_t(cfg.height), std::size_t(cfg.width), std::size_t(cfg.channels)};
  const Tensor64 z = rng.uniform_tensor<double>(fs, -1, 1);
  const Tensor64 target = rng.uniform_tensor<double>(fs, -1, 1);
  const Tensor64 r1 = rng.uniform_tensor<double>(rs, -1, 1), r2 = rng.uniform_tensor<double>(rs, -1, 1);
  const std::vector<int> prompt = vocab::subject_prompt(vocab::class_id(int(seed % 4)));
  const double t = 0.2 + 0.6 * rng.uniform();

  auto forward = [&](Tape<double>& tape, const BoundModel<double>& m, const BoundAdapters<double>& b) {
    DitInput<double> in;
    in.z = tape.constant(z);
    in.t = t;
    in.refs = {tape.constant(r1), tape.constant(r2)};
    in.ref_views = {1, 3};
    in.cond_slots = 3;
    in.prompt = prompt;
    return mse(dit_forward(m, &b, in), tape.constant(target));
  };

  Tape<double> tape;
  const BoundModel<double> m = bind_model(tape, params, true);
  const BoundAdapters<double> b = bind_adapters(tape, set, true, true);
  Var<double> loss = forward(tape, m, b);
  tape.backward(loss);
  std::vector<Tensor64*> ptrs;
  std::vector<Tensor64> grads;
  for (auto& [n, g] : model_grads(tape, params, m)) grads.push_back(*g);
  for (auto& [n, g] : adapter_grads(tape, set, b)) grads.push_back(*g);
  params.for_each([&](const std::string&, Tensor64& x) { ptrs.push_back(&x); });
  set.for_each([&](const std::string&, Tensor64& x) { ptrs.push_back(&x); });

  auto value = [&] {
    Tape<double> tp;
    const BoundModel<double> mm = bind_model(tp, params, false);
    const BoundAdapters<double> bb = bind_adapters(tp, set, false, false);
    return forward(tp, mm, bb).value().item();
  };
  return fd_check(ptrs, grads, value, rng, per_tensor, stride, std::size_t(seed % stride));
}

/// A differentiable op under test: builds a scalar from leaves on the given tape.
using OpCase = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline FdResult op_gradient_check(const std::vector<Shape>& shapes, const OpCase& op, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor64> inputs;
  for (const auto& s : shapes) inputs.push_back(rng.uniform_tensor<double>(s, -1, 1));
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
  Var<double> out = op(tape, leaves);
  // A random linear readout makes every output element matter.
  const Tensor64 w = rng.uniform_tensor<double>(out.shape(), -1, 1);
  Var<double> loss = sum(mul(out, tape.constant(w)));
  tape.backward(loss);
  std::vector<Tensor64> grads;
  std::vector<Tensor64*> ptrs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    grads.push_back(*tape.grad(leaves[i]));
    ptrs.push_back(&inputs[i]);
  }
  auto value = [&] {
    Tape<double> tp;
    std::vector<Var<double>> l;
    for (const auto& x : inputs) l.push_back(tp.constant(x));
    return sum(mul(op(tp, l), tp.constant(w))).value().item();
  };
  return fd_check(ptrs, grads, value, rng, 0);
}

struct NamedOp {
  const char* name;
  std::vector<Shape> shapes;
  OpCase op;
};

inline std::vector<NamedOp> differentiable_ops() {
  using V = std::vector<Var<double>>;
  using T = Tape<double>;
  std::vector<NamedOp> ops;
  ops.push_back({"matmul", {{3, 4}, {4, 5}}, [](T&, const V& x) { return matmul(x[0], x[1]); }});
  ops.push_back({"matmul_nt", {{3, 4}, {5, 4}}, [](T&, const V& x) { return matmul_nt(x[0], x[1]); }});
  ops.push_back({"transpose", {{3, 4}}, [](T&, const V& x) { return transpose(x[0]); }});
  ops.push_back({"add", {{3, 4}, {3, 4}}, [](T&, const V& x) { return add(x[0], x[1]); }});
  ops.push_back({"sub", {{3, 4}, {3, 4}}, [](T&, const V& x) { return sub(x[0], x[1]); }});
  ops.push_back({"mul", {{3, 4}, {3, 4}}, [](T&, const V& x) { return mul(x[0], x[1]); }});
  ops.push_back({"scale", {{3, 4}}, [](T&, const V& x) { return scale(x[0], 1.7); }});
  ops.push_back({"add_rowvec", {{3, 4}, {4}}, [](T&, const V& x) { return add_rowvec(x[0], x[1]); }});
  ops.push_back({"softmax", {{3, 5}}, [](T&, const V& x) { return softmax(scale(x[0], 2.0)); }});
  ops.push_back({"layer_norm", {{3, 6}, {6}, {6}}, [](T&, const V& x) { return layer_norm(x[0], x[1], x[2]); }});
  ops.push_back({"gelu", {{3, 4}}, [](T&, const V& x) { return gelu(scale(x[0], 2.0)); }});
  ops.push_back({"silu", {{3, 4}}, [](T&, const V& x) { return silu(scale(x[0], 2.0)); }});
  ops.push_back({"reshape", {{3, 4}}, [](T&, const V& x) { return reshape(x[0], Shape{2, 6}); }});
  ops.push_back({"concat0", {{2, 4}, {3, 4}}, [](T&, const V& x) { return concat(x, 0); }});
  ops.push_back({"concat1", {{3, 2}, {3, 5}}, [](T&, const V& x) { return concat(x, 1); }});
  ops.push_back({"slice", {{5, 4}}, [](T&, const V& x) { return slice(x[0], 0, 1, 4); }});
  ops.push_back({"take_rows", {{4, 3}}, [](T&, const V& x) { return take_rows(x[0], {2, 0, 2, 3}); }});
  ops.push_back({"gather", {{2, 3}}, [](T&, const V& x) { return gather(x[0], {5, 0, 0, 3}, Shape{2, 2}); }});
  ops.push_back({"sum", {{3, 4}}, [](T&, const V& x) { return sum(x[0]); }});
  ops.push_back({"mean", {{3, 4}}, [](T&, const V& x) { return mean(x[0]); }});
  ops.push_back({"mse", {{3, 4}, {3, 4}}, [](T&, const V& x) { return mse(x[0], x[1]); }});
  ops.push_back({"rotate_pairs", {{3, 4}}, [](T&, const V& x) {
                   Rng r(11);
                   const Tensor64 a = r.uniform_tensor<double>({3, 2}, -3, 3);
                   Tensor64 c(a.shape()), s(a.shape());
                   for (std::size_t i = 0; i < a.size(); ++i) {
                     c[i] = std::cos(a[i]);
                     s[i] = std::sin(a[i]);
                   }
                   return rotate_pairs(x[0], c, s);
                 }});
  return ops;
}

}  // namespace mv3d::oracle
