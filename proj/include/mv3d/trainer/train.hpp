#pragma once

#include <chrono>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "mv3d/core/optim.hpp"
#include "mv3d/trainer/dataset.hpp"

namespace mv3d {

struct StageConfig {
  Stage stage = Stage::Joint;
  int iters = 400;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  int n_c = 4;
  bool skip_pretrain = false;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  std::filesystem::path out_dir;  // empty: nothing written
  int corpus_objects = 1000000;  // pretraining corpora only
  PairMix pairs;            // 3Dapter pretraining only

  void validate() const {
    if (iters <= 0) throw ConfigError("iters must be positive");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (n_c < 0) throw ConfigError("n_c must be non-negative");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  }
};

struct LossRecord {
  int step = 0;
  std::string stage;
  double loss = 0.0;
  double wall_ms = 0.0;
};

struct LossLog {
  std::vector<LossRecord> rows;

  std::vector<double> losses() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.loss);
    return v;
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << "# version 1\nstep,stage,loss,wall_ms\n";
    char buf[96];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.3f\n", r.step, r.stage.c_str(), r.loss, r.wall_ms);
      f << buf;
    }
    if (!f) throw IoError("write failed: " + path.string());
  }
};

/// Exponential moving average with smoothing 2 / (window + 1), seeded by the first value.
inline std::vector<double> ema(const std::vector<double>& v, int window = 50) {
  std::vector<double> out;
  const double a = 2.0 / (window + 1.0);
  double m = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    m = i == 0 ? v[0] : a * v[i] + (1 - a) * m;
    out.push_back(m);
  }
  return out;
}

namespace detail {

// Gradients of the families a stage trains, aligned with trainable_params(set, stage).
inline std::vector<Tensor> trainable_grads(const Tape<float>& tape, const AdapterSet<float>& set,
                                           const BoundAdapters<float>& bound, Stage stage) {
  std::vector<Tensor> out;
  for (Family fam : kAllFamilies) {
    if (!stage_trains(stage, fam)) continue;
    auto f = [&](const std::string&, const Tensor& p, const Var<float>& v) {
      auto g = tape.grad(v);
      out.push_back(g ? std::move(*g) : Tensor(p.shape(), 0.0f));
    };
    fields::visit_family(f, family_prefix(fam), family_of(set.w, fam), family_of(bound.w, fam));
  }
  return out;
}

inline std::vector<Tensor*> param_ptrs(AdapterSet<float>& set, Stage stage) {
  std::vector<Tensor*> out;
  for (auto& p : trainable_params(set, stage)) out.push_back(p.value);
  return out;
}

using StageLoss = std::function<Var<float>(const BoundModel<float>&, const BoundAdapters<float>&, int step)>;

inline LossLog run_adapter_loop(const StageConfig& cfg, const ModelParams<float>& theta, AdapterSet<float>& set,
                                const StageLoss& loss_fn) {
  MV3D_REQUIRE(set.model.fingerprint() == theta.config.fingerprint(), "adapters were built for another model");
  AdamWConfig oc;
  oc.lr = cfg.lr;
  AdamW<float> opt(oc);
  LossLog log;
  const auto t0 = std::chrono::steady_clock::now();
  const std::string name = to_string(cfg.stage);
  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);
  for (int step = 1; step <= cfg.iters; ++step) {
    Tape<float> tape;
    const BoundModel<float> m = bind_model(tape, theta, false);
    const BoundAdapters<float> b = bind_adapters(tape, set, cfg.stage);
    Var<float> loss = loss_fn(m, b, step);
    tape.backward(loss);
    opt.step(param_ptrs(set, cfg.stage), trainable_grads(tape, set, b, cfg.stage));
    for (auto* p : param_ptrs(set, cfg.stage))
      if (!p->all_finite()) throw NumericFault("non-finite adapter weights after step " + std::to_string(step));
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.rows.push_back({step, name, double(loss.value().item()), ms});
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      save_checkpoint(cfg.out_dir / "last_good.mvck", adapters_to_checkpoint(set));
  }
  return log;
}

}  // namespace detail

/// Per-step draws shared by every arm with the same seed: a view index and a noise seed.
struct StepDraws {
  explicit StepDraws(std::uint64_t seed) : rng_(seed) {}
  void next(std::size_t n_views, int& view, std::uint64_t& noise_seed) {
    view = int(rng_.index(n_views));
    noise_seed = rng_.next_u64();
  }

 private:
  Rng rng_;
};

/// Copies the 3Dapter family of a pretraining checkpoint into `set` and verifies the copy
/// byte for byte. The 3DB family of `set` is left as initialized.
inline void restore_dapter(AdapterSet<float>& set, const AdapterSet<float>& pretrained) {
  if (set.model.fingerprint() != pretrained.model.fingerprint())
    throw ConfigError("pretrained 3Dapter was built for another model");
  if (set.lora.rank != pretrained.lora.rank || set.lora.alpha != pretrained.lora.alpha)
    throw ConfigError("pretrained 3Dapter has a different LoRA rank or alpha");
  std::vector<const Tensor*> src;
  pretrained.for_each_in(Family::Dapter, [&](const std::string&, const Tensor& t) { src.push_back(&t); });
  std::size_t i = 0;
  set.for_each_in(Family::Dapter, [&](const std::string& n, Tensor& t) {
    t = *src[i];
    if (t.shape() != src[i]->shape() ||
        std::memcmp(t.vec().data(), src[i]->vec().data(), t.size() * sizeof(float)) != 0)
      throw IoError("restored 3Dapter tensor " + n + " differs from the checkpoint");
    ++i;
  });
  set.dapter_pretrained = pretrained.dapter_pretrained;
}

/// 3DB-only or joint optimization on one subject.
inline LossLog run_subject_stage(const StageConfig& cfg, const ModelParams<float>& theta, AdapterSet<float>& set,
                                 const SubjectDataset& data) {
  cfg.validate();
  MV3D_REQUIRE(cfg.stage == Stage::DreamBoothOnly || cfg.stage == Stage::Joint,
               "subject stages are opt_3db_only and joint");
  if (cfg.stage == Stage::Joint && !set.dapter_pretrained && !cfg.skip_pretrain)
    throw ConfigError("joint stage needs a pretrained 3Dapter (run pretrain first or set skip_pretrain=true)");
  data.check_conditioning();
  set.dapter_active = cfg.stage == Stage::Joint;
  set.db_active = true;
  StepDraws draws(cfg.seed);
  LossLog log = detail::run_adapter_loop(
      cfg, theta, set, [&](const BoundModel<float>& m, const BoundAdapters<float>& b, int) {
        int i;
        std::uint64_t ns;
        draws.next(data.size(), i, ns);
        const Tensor& x = data.frames[std::size_t(i)];
        const NoiseDraw<float> nd = draw_noise<float>(ns, x.shape());
        if (cfg.stage == Stage::DreamBoothOnly) return loss_3db(m, b, x, data.prompt, nd);
        std::vector<Tensor> refs;
        std::vector<int> tags;
        data.references_for(i, refs, tags);
        return loss_joint_views(m, b, x, refs, tags, int(data.cond.size()), data.prompt, nd);
      });
  if (!cfg.out_dir.empty()) save_checkpoint(cfg.out_dir / "adapters.mvck", adapters_to_checkpoint(set));
  return log;
}

/// Single-view 3Dapter pretraining on generated reference/target pairs.
inline LossLog run_pretrain_stage(const StageConfig& cfg, const ModelParams<float>& theta, AdapterSet<float>& set) {
  cfg.validate();
  MV3D_REQUIRE(cfg.stage == Stage::Pretrain3Dapter, "pretraining stage expected");
  MV3D_REQUIRE(theta.config.height == theta.config.width, "pair generator renders square frames");
  set.dapter_active = true;
  set.db_active = false;
  Rng rng(cfg.seed);
  PairMix mix = cfg.pairs;
  mix.slots = std::max(theta.config.max_views, 1);
  LossLog log = detail::run_adapter_loop(
      cfg, theta, set, [&](const BoundModel<float>& m, const BoundAdapters<float>& b, int) {
        const PretrainPair p = make_pretrain_pair(rng, theta.config.height, cfg.corpus_objects, mix);
        const NoiseDraw<float> nd = draw_noise<float>(rng.next_u64(), p.target.shape());
        return loss_3dapter_pretrain(m, b, p.reference, p.target, p.prompt, nd, p.slot, mix.slots);
      });
  set.dapter_pretrained = true;
  set.db_active = true;
  if (!cfg.out_dir.empty()) save_checkpoint(cfg.out_dir / "adapters.mvck", adapters_to_checkpoint(set));
  return log;
}

struct BackboneConfig {
  int iters = 3000;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  int corpus_objects = 1000000;
  int checkpoint_every = 0;
  BackboneMix mix;
  std::filesystem::path out_dir;
};

/// Trains the backbone itself on class-prompted corpus renders; it is frozen afterwards.
inline LossLog run_backbone_stage(const BackboneConfig& cfg, ModelParams<float>& theta) {
  if (cfg.iters <= 0) throw ConfigError("iters must be positive");
  if (!(cfg.lr > 0)) throw ConfigError("lr must be positive");
  if (cfg.checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  MV3D_REQUIRE(theta.config.height == theta.config.width, "corpus renders square frames");
  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);
  AdamWConfig oc;
  oc.lr = cfg.lr;
  AdamW<float> opt(oc);
  Rng rng(cfg.seed);
  LossLog log;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Tensor*> ptrs;
  theta.for_each([&](const std::string&, Tensor& t) { ptrs.push_back(&t); });
  for (int step = 1; step <= cfg.iters; ++step) {
    const BackboneSample s = make_backbone_sample(rng, theta.config.height, cfg.corpus_objects, cfg.mix);
    const NoiseDraw<float> nd = draw_noise<float>(rng.next_u64(), s.frames.shape());
    Tape<float> tape;
    const BoundModel<float> m = bind_model(tape, theta, true);
    std::vector<Var<float>> refs;
    std::vector<int> tags;
    for (const auto& r : s.refs) {
      refs.push_back(tape.constant(r));
      tags.push_back(int(tags.size()) + 1);
    }
    Var<float> loss = velocity_loss<float>(m, nullptr, s.frames, nd, refs, tags, int(tags.size()), s.prompt);
    tape.backward(loss);
    std::vector<Tensor> grads;
    for (auto& [name, g] : model_grads(tape, theta, m)) grads.push_back(std::move(*g));
    opt.step(ptrs, grads);
    for (auto* p : ptrs)
      if (!p->all_finite()) throw NumericFault("non-finite backbone weights after step " + std::to_string(step));
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.rows.push_back({step, "backbone", double(loss.value().item()), ms});
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      save_checkpoint(cfg.out_dir / "last_good.mvck", model_to_checkpoint(theta));
  }
  if (!cfg.out_dir.empty()) {
    save_checkpoint(cfg.out_dir / "backbone.mvck", model_to_checkpoint(theta));
  }
  return log;
}

}  // namespace mv3d
