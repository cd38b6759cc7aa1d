#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mv3d/core/checkpoint.hpp"
#include "mv3d/core/ops.hpp"
#include "mv3d/core/rng.hpp"
#include "mv3d/model/params.hpp"

namespace mv3d {

enum class SegmentKind { Target, Ref, Text };
enum class Site { Input, Q, K, V, O, Fc1, Fc2 };
enum class Composition { Frozen, FrozenPlusDapter, FrozenPlusDreamBooth };
enum class Stage { Pretrain3Dapter, DreamBoothOnly, Joint };

inline const char* to_string(SegmentKind s) {
  switch (s) {
    case SegmentKind::Target: return "target";
    case SegmentKind::Ref: return "ref";
    case SegmentKind::Text: return "text";
  }
  return "?";
}

inline const char* to_string(Site s) {
  switch (s) {
    case Site::Input: return "input";
    case Site::Q: return "q";
    case Site::K: return "k";
    case Site::V: return "v";
    case Site::O: return "o";
    case Site::Fc1: return "fc1";
    case Site::Fc2: return "fc2";
  }
  return "?";
}

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::Pretrain3Dapter: return "pretrain_3dapter";
    case Stage::DreamBoothOnly: return "opt_3db_only";
    case Stage::Joint: return "joint";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "pretrain_3dapter" || s == "pretrain") return Stage::Pretrain3Dapter;
  if (s == "opt_3db_only" || s == "3db") return Stage::DreamBoothOnly;
  if (s == "joint") return Stage::Joint;
  throw ContractViolation("unknown stage '" + s + "'");
}

struct LoraConfig {
  int rank = 4;
  double alpha = 8.0;
  double init_std = 0.02;  // std of the down-projection; the up-projection starts at zero

  double scale() const {
    MV3D_REQUIRE(rank > 0, "LoRA rank must be positive");
    return alpha / rank;
  }
};

template <class L>
struct LoraPair {
  L down;  // A: [r x in]
  L up;    // B: [out x r]
};

template <class L>
struct BlockLora {
  LoraPair<L> q, k, v, o, fc1, fc2;
};

/// Block pairs act on whichever rows the routing plan sends through the family. The text
/// input projection is a separate linear in the backbone, so a family that also serves text
/// rows carries one extra pair for it.
template <class L>
struct AdapterFamily {
  LoraPair<L> input;
  std::vector<LoraPair<L>> text_input;  // empty or one pair
  std::vector<BlockLora<L>> blocks;
};

/// phi_3Dapter (image path, one instance shared by every reference view) and phi_3DB (target
/// and text rows).
template <class L>
struct AdapterWeights {
  AdapterFamily<L> dapter;
  AdapterFamily<L> db;
};

namespace fields {

template <class F, class... O>
void visit_pair(F& f, const std::string& p, O&... o) {
  f(p + ".down", o.down...);
  f(p + ".up", o.up...);
}

template <class F, class First, class... O>
void visit_family(F& f, const std::string& p, First& first, O&... o) {
  visit_pair(f, p + ".input", first.input, o.input...);
  for (std::size_t i = 0; i < first.text_input.size(); ++i)
    visit_pair(f, p + ".text_input", first.text_input[i], o.text_input[i]...);
  for (std::size_t b = 0; b < first.blocks.size(); ++b) {
    const std::string bp = p + ".block" + std::to_string(b);
    visit_pair(f, bp + ".q", first.blocks[b].q, o.blocks[b].q...);
    visit_pair(f, bp + ".k", first.blocks[b].k, o.blocks[b].k...);
    visit_pair(f, bp + ".v", first.blocks[b].v, o.blocks[b].v...);
    visit_pair(f, bp + ".o", first.blocks[b].o, o.blocks[b].o...);
    visit_pair(f, bp + ".fc1", first.blocks[b].fc1, o.blocks[b].fc1...);
    visit_pair(f, bp + ".fc2", first.blocks[b].fc2, o.blocks[b].fc2...);
  }
}

}  // namespace fields

enum class Family { Dapter, DreamBooth };

inline const char* family_prefix(Family f) {
  return f == Family::Dapter ? "adapter/3dapter" : "adapter/3db";
}

template <class L>
AdapterFamily<L>& family_of(AdapterWeights<L>& w, Family f) {
  return f == Family::Dapter ? w.dapter : w.db;
}
template <class L>
const AdapterFamily<L>& family_of(const AdapterWeights<L>& w, Family f) {
  return f == Family::Dapter ? w.dapter : w.db;
}

inline constexpr Family kAllFamilies[] = {Family::Dapter, Family::DreamBooth};

template <class T>
struct NamedParam {
  std::string name;
  BasicTensor<T>* value;
};

template <class T>
struct AdapterSet {
  ModelConfig model;
  LoraConfig lora;
  AdapterWeights<BasicTensor<T>> w;
  bool dapter_active = true;
  bool db_active = true;
  bool dapter_pretrained = false;

  template <class F>
  void for_each_in(Family fam, F&& f) {
    auto g = [&](const std::string& n, BasicTensor<T>& t) { f(n, t); };
    fields::visit_family(g, family_prefix(fam), family_of(w, fam));
  }
  template <class F>
  void for_each_in(Family fam, F&& f) const {
    auto g = [&](const std::string& n, const BasicTensor<T>& t) { f(n, t); };
    fields::visit_family(g, family_prefix(fam), family_of(w, fam));
  }
  template <class F>
  void for_each(F&& f) {
    for (Family fam : kAllFamilies) for_each_in(fam, f);
  }
  template <class F>
  void for_each(F&& f) const {
    for (Family fam : kAllFamilies) for_each_in(fam, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const BasicTensor<T>& t) { n += t.size(); });
    return n;
  }
};

namespace detail {

template <class T>
LoraPair<BasicTensor<T>> init_pair(Rng& rng, const LoraConfig& lc, int out, int in) {
  MV3D_REQUIRE(lc.rank > 0, "LoRA rank must be positive");
  return {rng.normal_tensor<T>({std::size_t(lc.rank), std::size_t(in)}, lc.init_std),
          BasicTensor<T>({std::size_t(out), std::size_t(lc.rank)}, T(0))};
}

template <class T>
AdapterFamily<BasicTensor<T>> init_family(Rng& rng, const ModelConfig& mc, const LoraConfig& lc,
                                          bool text_path) {
  AdapterFamily<BasicTensor<T>> f;
  const int d = mc.hidden;
  f.input = init_pair<T>(rng, lc, d, mc.patch_dim());
  if (text_path) f.text_input.push_back(init_pair<T>(rng, lc, d, d));
  for (int b = 0; b < mc.blocks; ++b) {
    BlockLora<BasicTensor<T>> bl;
    bl.q = init_pair<T>(rng, lc, d, d);
    bl.k = init_pair<T>(rng, lc, d, d);
    bl.v = init_pair<T>(rng, lc, d, d);
    bl.o = init_pair<T>(rng, lc, d, d);
    bl.fc1 = init_pair<T>(rng, lc, mc.mlp_hidden(), d);
    bl.fc2 = init_pair<T>(rng, lc, d, mc.mlp_hidden());
    f.blocks.push_back(std::move(bl));
  }
  return f;
}

}  // namespace detail

/// Gaussian down-projections, zero up-projections: a fresh set leaves the backbone unchanged.
template <class T>
AdapterSet<T> init_adapters(const ModelConfig& mc, const LoraConfig& lc, std::uint64_t seed) {
  mc.validate();
  MV3D_REQUIRE(lc.rank > 0, "LoRA rank must be positive");
  Rng rng(seed);
  AdapterSet<T> s;
  s.model = mc;
  s.lora = lc;
  s.w.dapter = detail::init_family<T>(rng, mc, lc, false);
  s.w.db = detail::init_family<T>(rng, mc, lc, true);
  return s;
}

/// Exactly the families named by a stage's objective; backbone tensors are never included.
template <class T>
std::vector<NamedParam<T>> trainable_params(AdapterSet<T>& set, Stage stage) {
  std::vector<NamedParam<T>> out;
  auto push = [&](Family fam) {
    set.for_each_in(fam, [&](const std::string& n, BasicTensor<T>& t) { out.push_back({n, &t}); });
  };
  switch (stage) {
    case Stage::Pretrain3Dapter:
      push(Family::Dapter);
      break;
    case Stage::DreamBoothOnly:
      push(Family::DreamBooth);
      break;
    case Stage::Joint:
      push(Family::Dapter);
      push(Family::DreamBooth);
      break;
    default:
      throw ContractViolation("unknown stage");
  }
  return out;
}

inline bool stage_trains(Stage stage, Family fam) {
  switch (stage) {
    case Stage::Pretrain3Dapter: return fam == Family::Dapter;
    case Stage::DreamBoothOnly: return fam != Family::Dapter;
    case Stage::Joint: return true;
  }
  return false;
}

// ---------------------------------------------------------------------------------------------
// Routing

struct RouteEntry {
  SegmentKind segment;
  int block;  // -1 for the input projection
  Site site;
  Composition composition;
};

/// Which weight composition each (segment, projection site) uses. Reference tokens go through
/// the shared 3Dapter; target and text tokens go through 3DB; nothing else is adapted.
struct RoutingPlan {
  bool dapter = false;
  bool dreambooth = false;
  std::vector<RouteEntry> entries;  // adapted pairs only

  Composition lookup(SegmentKind seg) const {
    if (seg == SegmentKind::Ref) return dapter ? Composition::FrozenPlusDapter : Composition::Frozen;
    return dreambooth ? Composition::FrozenPlusDreamBooth : Composition::Frozen;
  }
  std::size_t size() const { return entries.size(); }
};

inline RoutingPlan make_routing_plan(const ModelConfig& mc, bool dapter_active, bool db_active) {
  RoutingPlan plan;
  plan.dapter = dapter_active;
  plan.dreambooth = db_active;
  constexpr Site kBlockSites[] = {Site::Q, Site::K, Site::V, Site::O, Site::Fc1, Site::Fc2};
  for (SegmentKind seg : {SegmentKind::Target, SegmentKind::Ref, SegmentKind::Text}) {
    const Composition c = plan.lookup(seg);
    if (c == Composition::Frozen) continue;
    plan.entries.push_back({seg, -1, Site::Input, c});
    for (int b = 0; b < mc.blocks; ++b)
      for (Site s : kBlockSites) plan.entries.push_back({seg, b, s, c});
  }
  return plan;
}

inline Family family_for(Composition c) {
  MV3D_REQUIRE(c != Composition::Frozen, "frozen composition has no adapter family");
  return c == Composition::FrozenPlusDapter ? Family::Dapter : Family::DreamBooth;
}

template <class L>
const LoraPair<L>& pair_at(const AdapterFamily<L>& fam, SegmentKind seg, int block, Site site) {
  if (site == Site::Input) {
    if (seg != SegmentKind::Text) return fam.input;
    MV3D_REQUIRE(!fam.text_input.empty(), "adapter family has no text input projection pair");
    return fam.text_input[0];
  }
  MV3D_REQUIRE(block >= 0 && std::size_t(block) < fam.blocks.size(), "adapter block index out of range");
  const auto& b = fam.blocks[std::size_t(block)];
  switch (site) {
    case Site::Q: return b.q;
    case Site::K: return b.k;
    case Site::V: return b.v;
    case Site::O: return b.o;
    case Site::Fc1: return b.fc1;
    case Site::Fc2: return b.fc2;
    default: break;
  }
  throw ContractViolation("bad adapter site");
}

/// Adapters bound to a tape for one forward pass.
template <class T>
struct BoundAdapters {
  LoraConfig lora;
  RoutingPlan plan;
  AdapterWeights<Var<T>> w;
  bool have[2] = {false, false};  // indexed by Family

  const LoraPair<Var<T>>* pair_for(SegmentKind seg, int block, Site site) const {
    const Composition c = plan.lookup(seg);
    if (c == Composition::Frozen) return nullptr;
    const Family fam = family_for(c);
    MV3D_REQUIRE(have[int(fam)], std::string("routing plan references absent adapter ") + family_prefix(fam));
    return &pair_at(family_of(w, fam), seg, block, site);
  }
};

/// Binds the active families. Families whose stage does not train them are bound as constants.
template <class T>
BoundAdapters<T> bind_adapters(Tape<T>& tape, const AdapterSet<T>& set, bool track_dapter, bool track_db) {
  BoundAdapters<T> b;
  b.lora = set.lora;
  b.plan = make_routing_plan(set.model, set.dapter_active, set.db_active);
  for (Family fam : kAllFamilies) {
    const bool active = fam == Family::Dapter ? set.dapter_active : set.db_active;
    if (!active) continue;
    const bool track = fam == Family::Dapter ? track_dapter : track_db;
    auto& dst = family_of(b.w, fam);
    const auto& src = family_of(set.w, fam);
    dst.blocks.resize(src.blocks.size());
    dst.text_input.resize(src.text_input.size());
    auto f = [&](const std::string&, const BasicTensor<T>& s, Var<T>& d) {
      d = track ? tape.leaf(s, true) : tape.constant(s);
    };
    fields::visit_family(f, family_prefix(fam), src, dst);
    b.have[int(fam)] = true;
  }
  return b;
}

template <class T>
BoundAdapters<T> bind_adapters(Tape<T>& tape, const AdapterSet<T>& set, Stage stage) {
  return bind_adapters(tape, set, stage_trains(stage, Family::Dapter),
                       stage_trains(stage, Family::DreamBooth));
}

/// Gradients for every adapter tensor of a bound set, in for_each order. Inactive families
/// report nullopt, as do families bound untracked.
template <class T>
std::vector<std::pair<std::string, std::optional<BasicTensor<T>>>> adapter_grads(
    const Tape<T>& tape, const AdapterSet<T>& set, const BoundAdapters<T>& bound) {
  std::vector<std::pair<std::string, std::optional<BasicTensor<T>>>> out;
  for (Family fam : kAllFamilies) {
    if (!bound.have[int(fam)]) {
      set.for_each_in(fam, [&](const std::string& n, const BasicTensor<T>&) { out.emplace_back(n, std::nullopt); });
      continue;
    }
    auto f = [&](const std::string& n, const BasicTensor<T>&, const Var<T>& v) {
      out.emplace_back(n, tape.grad(v));
    };
    fields::visit_family(f, family_prefix(fam), family_of(set.w, fam), family_of(bound.w, fam));
  }
  return out;
}

/// x W^T + b + (alpha/r) x A^T B^T; the frozen path alone when no pair is given.
template <class T>
Var<T> lora_apply(Var<T> x, Var<T> weight, std::optional<Var<T>> bias, const LoraPair<Var<T>>* pair,
                  double lora_scale) {
  Var<T> y = matmul_nt(x, weight);
  if (bias) y = add_rowvec(y, *bias);
  if (!pair) return y;
  MV3D_REQUIRE(pair->down.value().rows() > 0, "LoRA rank 0");
  Var<T> delta = matmul_nt(matmul_nt(x, pair->down), pair->up);
  return add(y, scale(delta, T(lora_scale)));
}

// ---------------------------------------------------------------------------------------------
// Dense-equivalence check

struct MergeEntry {
  std::string name;
  double discrepancy = 0.0;
};

struct MergeReport {
  std::vector<MergeEntry> entries;
  double max_discrepancy = 0.0;
  std::size_t coverage() const { return entries.size(); }
};

/// For every adapted site in the routing plan, compares the low-rank path against a dense
/// multiply by (W + (alpha/r) B A) on a random input.
template <class T>
MergeReport merge_check(const AdapterSet<T>& set, const ModelParams<T>& params, std::uint64_t seed = 7) {
  MV3D_REQUIRE(set.model.fingerprint() == params.config.fingerprint(), "adapter/model config mismatch");
  MergeReport rep;
  Rng rng(seed);
  const RoutingPlan plan = make_routing_plan(set.model, set.dapter_active, set.db_active);
  const double s = set.lora.scale();
  for (const RouteEntry& e : plan.entries) {
    const Family fam = family_for(e.composition);
    const auto& pair = pair_at(family_of(set.w, fam), e.segment, e.block, e.site);
    const Linear<BasicTensor<T>>* lin = nullptr;
    if (e.site == Site::Input) {
      lin = e.segment == SegmentKind::Text ? &params.w.text_in : &params.w.patch_in;
    } else {
      const auto& blk = params.w.blocks[std::size_t(e.block)];
      switch (e.site) {
        case Site::Q: lin = &blk.q; break;
        case Site::K: lin = &blk.k; break;
        case Site::V: lin = &blk.v; break;
        case Site::O: lin = &blk.o; break;
        case Site::Fc1: lin = &blk.fc1; break;
        case Site::Fc2: lin = &blk.fc2; break;
        default: break;
      }
    }
    const std::size_t out = lin->weight.rows(), in = lin->weight.cols(), r = pair.down.rows();
    BasicTensor<T> x = rng.uniform_tensor<T>({5, in}, -1.0, 1.0);

    Tape<T> tape;
    LoraPair<Var<T>> pv{tape.constant(pair.down), tape.constant(pair.up)};
    Var<T> y = lora_apply(tape.constant(x), tape.constant(lin->weight), std::optional<Var<T>>{},
                          &pv, s);

    BasicTensor<T> merged = lin->weight;
    for (std::size_t i = 0; i < out; ++i)
      for (std::size_t j = 0; j < in; ++j) {
        T acc = 0;
        for (std::size_t k = 0; k < r; ++k) acc += pair.up.at(i, k) * pair.down.at(k, j);
        merged.at(i, j) += T(s) * acc;
      }
    double worst = 0.0;
    for (std::size_t n = 0; n < 5; ++n)
      for (std::size_t i = 0; i < out; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < in; ++j) acc += x.at(n, j) * merged.at(i, j);
        worst = std::max(worst, double(std::abs(acc - y.value().at(n, i))));
      }
    std::string name = std::string(to_string(e.segment)) + "/" + family_prefix(fam) + "/" +
                       (e.block < 0 ? std::string("input") : "block" + std::to_string(e.block)) + "." +
                       to_string(e.site);
    rep.entries.push_back({std::move(name), worst});
    rep.max_discrepancy = std::max(rep.max_discrepancy, worst);
  }
  return rep;
}

// ---------------------------------------------------------------------------------------------
// Serialization under the "adapter/" prefix

inline Checkpoint adapters_to_checkpoint(const AdapterSet<float>& set) {
  Checkpoint ck;
  auto meta = set.model.fingerprint();
  meta.push_back(float(set.lora.rank));
  meta.push_back(float(set.lora.alpha));
  ck.push_back({"adapter/config", Tensor({meta.size()}, meta)});
  ck.push_back({"adapter/flags", Tensor({1}, std::vector<float>{set.dapter_pretrained ? 1.0f : 0.0f})});
  set.for_each([&](const std::string& n, const Tensor& t) { ck.push_back({n, t}); });
  return ck;
}

inline AdapterSet<float> adapters_from_checkpoint(const Checkpoint& ck, const ModelConfig& mc) {
  const Tensor* meta = find_tensor(ck, "adapter/config");
  if (!meta) throw ConfigError("not an adapter checkpoint (missing adapter/config)");
  auto fp = mc.fingerprint();
  if (meta->size() != fp.size() + 2 || !std::equal(fp.begin(), fp.end(), meta->vec().begin()))
    throw ConfigError("adapter checkpoint was trained for a different model configuration");
  LoraConfig lc;
  lc.rank = int((*meta)[fp.size()]);
  lc.alpha = (*meta)[fp.size() + 1];
  AdapterSet<float> set = init_adapters<float>(mc, lc, 0);
  set.for_each([&](const std::string& n, Tensor& t) {
    const Tensor* src = find_tensor(ck, n);
    if (!src) throw ConfigError("adapter checkpoint is missing " + n);
    if (src->shape() != t.shape()) throw ConfigError("adapter checkpoint shape mismatch for " + n);
    t = *src;
  });
  if (const Tensor* flags = find_tensor(ck, "adapter/flags")) set.dapter_pretrained = (*flags)[0] != 0.0f;
  return set;
}

}  // namespace mv3d
