#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mv3d/io/dataset.hpp"
#include "mv3d/trainer/config.hpp"
#include "mv3d/trainer/dataset.hpp"
#include "mv3d/trainer/train.hpp"

using namespace mv3d;
namespace fs = std::filesystem;

namespace {

double min_pairwise(const std::vector<double>& az, const std::vector<int>& idx) {
  double m = 1e300;
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b)
      m = std::min(m, circular_distance_deg(az[std::size_t(idx[a])], az[std::size_t(idx[b])]));
  return m;
}

// Best achievable minimum pairwise distance over all 4-subsets.
double brute_force_best4(const std::vector<double>& az) {
  const int n = int(az.size());
  double best = -1;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      for (int c = b + 1; c < n; ++c)
        for (int d = c + 1; d < n; ++d) best = std::max(best, min_pairwise(az, {a, b, c, d}));
  return best;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mv3d_trainer_" + name);
  fs::remove_all(p);
  return p;
}

SubjectDataset small_subject(int views = 8, int n_c = 3) {
  const SceneSpec spec = subject_scene(3, views, 16);
  return SubjectDataset::from_views(render_views(spec), vocab::subject_prompt(spec.object.class_token()), n_c);
}

}  // namespace

TEST(Selection, UniformRingsMatchBruteForce) {
  for (int n : {8, 12, 30}) {
    const auto az = CameraRing::uniform(n);
    const auto chosen = select_conditioning_views(az, 4);
    ASSERT_EQ(chosen.size(), 4u);
    EXPECT_EQ(chosen[0], 0);
    EXPECT_DOUBLE_EQ(min_pairwise(az, chosen), brute_force_best4(az)) << n << " views";
  }
}

TEST(Selection, RandomRingsWithinFactorTwo) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> az;
    for (int i = 0; i < 10; ++i) az.push_back(rng.uniform(0, 360));
    const auto chosen = select_conditioning_views(az, 4);
    // farthest-point insertion is a 2-approximation of max-min dispersion
    EXPECT_GE(2 * min_pairwise(az, chosen) + 1e-9, brute_force_best4(az));
    std::vector<int> sorted = chosen;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(std::unique(sorted.begin(), sorted.end()), sorted.end());
  }
}

TEST(Selection, EdgeCases) {
  const auto az = CameraRing::uniform(6);
  EXPECT_TRUE(select_conditioning_views(az, 0).empty());
  EXPECT_EQ(select_conditioning_views(az, 1), std::vector<int>{0});
  EXPECT_EQ(select_conditioning_views(az, 2), (std::vector<int>{0, 3}));
  auto all = select_conditioning_views(az, 6);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<int>{0, 1, 2, 3, 4, 5}));
  EXPECT_THROW(select_conditioning_views(az, 7), ContractViolation);
  EXPECT_THROW(select_conditioning_views(az, -1), ContractViolation);
  EXPECT_DOUBLE_EQ(circular_distance_deg(350, 10), 20);
  EXPECT_DOUBLE_EQ(circular_distance_deg(-90, 630), 0);
}

TEST(Masking, ForegroundKeptBackgroundWhite) {
  const Tensor img = Rng(2).uniform_tensor<float>({2, 2, 3}, 0, 1);
  const Tensor out = mask_background(img, {1, 0, 0, 1});
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(out[c], img[c]);
    EXPECT_EQ(out[3 + c], 1.0f);
    EXPECT_EQ(out[6 + c], 1.0f);
    EXPECT_EQ(out[9 + c], img[9 + c]);
  }
  EXPECT_EQ(mask_background(img, {1, 1, 1, 1}), img);
  EXPECT_THROW(mask_background(img, {1, 0, 0}), ContractViolation);
}

TEST(Masking, EqualsWhiteBackgroundRender) {
  SceneSpec spec = subject_scene(5, 6, 16);
  const auto gradient = render_views(spec);
  spec.background = Background::White;
  const auto white = render_views(spec);
  for (std::size_t i = 0; i < gradient.size(); ++i) {
    EXPECT_NE(gradient[i].rgb, white[i].rgb);
    EXPECT_EQ(mask_background(gradient[i].rgb, gradient[i].mask), white[i].rgb);
  }
}

TEST(Dataset, ConditioningAndReferences) {
  const SubjectDataset d = small_subject(8, 3);
  EXPECT_EQ(d.size(), 8u);
  EXPECT_EQ(d.cond.size(), 3u);
  std::vector<Tensor> refs;
  std::vector<int> tags;
  d.references_for(d.cond[1], refs, tags);
  EXPECT_EQ(tags, (std::vector<int>{1, 3}));
  EXPECT_EQ(refs[1], d.conditioned[std::size_t(d.cond[2])]);
  d.references_for(-1, refs, tags);
  EXPECT_EQ(tags, (std::vector<int>{1, 2, 3}));
  SubjectDataset bad = d;
  bad.cond.push_back(42);
  EXPECT_THROW(bad.check_conditioning(), ContractViolation);
  for (float v : d.frames[0].vec()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Dataset, LoadMatchesInMemory) {
  const fs::path dir = scratch("load");
  const SceneSpec spec = subject_scene(4, 5, 16);
  const auto views = render_views(spec);
  write_subject(dir, views, subject_prompt_text(spec.object), false);
  const SubjectDataset a = SubjectDataset::load(dir, 2);
  const SubjectDataset b = SubjectDataset::from_views(views, vocab::subject_prompt(spec.object.class_token()), 2);
  EXPECT_EQ(a.prompt, b.prompt);
  EXPECT_EQ(a.cond, b.cond);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.frames[i], b.frames[i]);
    EXPECT_EQ(a.conditioned[i], b.conditioned[i]);
  }
  EXPECT_THROW(write_subject(dir, views, "x", false), ConfigError);
  fs::remove_all(dir);
}

TEST(Sampling, ViewCoverageIsUniform) {
  StepDraws draws(7);
  const int n = 30, total = 30000;
  std::vector<int> counts(n, 0);
  for (int k = 0; k < total; ++k) {
    int v;
    std::uint64_t s;
    draws.next(std::size_t(n), v, s);
    ++counts[std::size_t(v)];
  }
  const double p = 1.0 / n, mu = total * p, sd = std::sqrt(total * p * (1 - p));
  for (int c : counts) EXPECT_NEAR(c, mu, 5 * sd);
}

TEST(Sampling, SameSeedSameDraws) {
  StepDraws a(3), b(3);
  for (int k = 0; k < 50; ++k) {
    int va, vb;
    std::uint64_t sa, sb;
    a.next(10, va, sa);
    b.next(10, vb, sb);
    EXPECT_EQ(va, vb);
    EXPECT_EQ(sa, sb);
  }
}

TEST(Sampling, PretrainPairs) {
  Rng rng(4);
  PairMix mix;
  mix.slots = 4;
  for (int k = 0; k < 20; ++k) {
    const PretrainPair p = make_pretrain_pair(rng, 16, 100, mix);
    EXPECT_EQ(p.reference.shape(), (Shape{1, 16, 16, 3}));
    EXPECT_EQ(p.target.shape(), p.reference.shape());
    EXPECT_GE(p.slot, 1);
    EXPECT_LE(p.slot, 4);
    EXPECT_EQ(p.prompt.size(), 5u);
    EXPECT_EQ(p.reference[0], 1.0f);  // corner pixel of a white-background render
  }
}

TEST(Sampling, BackboneSamples) {
  Rng rng(5);
  BackboneMix mix;
  int conditioned = 0, clips = 0;
  for (int k = 0; k < 200; ++k) {
    const BackboneSample s = make_backbone_sample(rng, 16, 50, mix);
    EXPECT_LE(int(s.refs.size()), mix.max_refs);
    if (!s.refs.empty()) {
      ++conditioned;
      EXPECT_EQ(s.frames.dim(0), 1u);
    }
    if (s.frames.dim(0) == std::size_t(mix.clip_frames)) {
      ++clips;
      EXPECT_EQ(s.prompt.back(), vocab::id("orbit"));
    }
  }
  EXPECT_NEAR(conditioned, 100, 5 * std::sqrt(50.0));
  EXPECT_NEAR(clips, 25, 5 * std::sqrt(200 * 0.125 * 0.875));
}

TEST(Ema, SmoothingFactor) {
  const auto e = ema({1.0, 3.0, 3.0}, 3);
  EXPECT_DOUBLE_EQ(e[0], 1.0);
  EXPECT_DOUBLE_EQ(e[1], 0.5 * 3 + 0.5 * 1);
  EXPECT_DOUBLE_EQ(e[2], 0.5 * 3 + 0.5 * 2);
  EXPECT_TRUE(ema({}).empty());
}

class Training : public ::testing::Test {
 protected:
  ModelConfig cfg;
  ModelParams<float> theta = init_model<float>(cfg, 1);
  SubjectDataset data = small_subject(6, 2);

  StageConfig stage(Stage s, const fs::path& out = {}) {
    StageConfig c;
    c.stage = s;
    c.iters = 3;
    c.lr = 1e-3;
    c.seed = 9;
    c.out_dir = out;
    return c;
  }
};

TEST_F(Training, JointNeedsPretrainedDapter) {
  AdapterSet<float> set = init_adapters<float>(cfg, LoraConfig{}, 2);
  EXPECT_THROW(run_subject_stage(stage(Stage::Joint), theta, set, data), ConfigError);
  StageConfig c = stage(Stage::Joint);
  c.skip_pretrain = true;
  EXPECT_EQ(run_subject_stage(c, theta, set, data).rows.size(), 3u);
}

TEST_F(Training, RejectsBadSettings) {
  AdapterSet<float> set = init_adapters<float>(cfg, LoraConfig{}, 2);
  StageConfig c = stage(Stage::DreamBoothOnly);
  c.iters = 0;
  EXPECT_THROW(run_subject_stage(c, theta, set, data), ConfigError);
  c = stage(Stage::DreamBoothOnly);
  c.lr = -1;
  EXPECT_THROW(run_subject_stage(c, theta, set, data), ConfigError);
  EXPECT_THROW(run_subject_stage(stage(Stage::Pretrain3Dapter), theta, set, data), ContractViolation);
  BackboneConfig b;
  b.iters = 0;
  EXPECT_THROW(run_backbone_stage(b, theta), ConfigError);
}

TEST_F(Training, DreamBoothOnlyLeavesDapterUntouched) {
  AdapterSet<float> set = init_adapters<float>(cfg, LoraConfig{}, 2);
  const AdapterSet<float> before = set;
  run_subject_stage(stage(Stage::DreamBoothOnly), theta, set, data);
  std::vector<Tensor> a, b;
  set.for_each_in(Family::Dapter, [&](const std::string&, const Tensor& t) { a.push_back(t); });
  before.for_each_in(Family::Dapter, [&](const std::string&, const Tensor& t) { b.push_back(t); });
  EXPECT_EQ(a, b);
  double moved = 0;
  std::vector<Tensor> c, d;
  set.for_each_in(Family::DreamBooth, [&](const std::string&, const Tensor& t) { c.push_back(t); });
  before.for_each_in(Family::DreamBooth, [&](const std::string&, const Tensor& t) { d.push_back(t); });
  for (std::size_t i = 0; i < c.size(); ++i) moved += max_abs_diff(c[i], d[i]);
  EXPECT_GT(moved, 0.0);
}

TEST_F(Training, CheckpointsAreDeterministic) {
  std::string bytes[2], csv[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path out = scratch("det" + std::to_string(run));
    AdapterSet<float> set = init_adapters<float>(cfg, LoraConfig{}, 2);
    StageConfig c = stage(Stage::Joint, out);
    c.skip_pretrain = true;
    c.checkpoint_every = 2;
    const LossLog log = run_subject_stage(c, theta, set, data);
    log.write_csv(out / "loss.csv");
    EXPECT_TRUE(fs::exists(out / "last_good.mvck"));
    bytes[run] = read_file(out / "adapters.mvck");
    std::string stripped;
    std::istringstream is(read_file(out / "loss.csv"));
    for (std::string line; std::getline(is, line);) stripped += line.substr(0, line.rfind(',')) + "\n";
    csv[run] = stripped;
    fs::remove_all(out);
  }
  EXPECT_EQ(bytes[0], bytes[1]);
  EXPECT_EQ(csv[0], csv[1]);
  EXPECT_NE(csv[0].find("step,stage,loss\n"), std::string::npos);
}

TEST_F(Training, PretrainThenRestore) {
  const fs::path out = scratch("pre");
  AdapterSet<float> pre = init_adapters<float>(cfg, LoraConfig{}, 3);
  StageConfig c = stage(Stage::Pretrain3Dapter, out);
  c.corpus_objects = 20;
  run_pretrain_stage(c, theta, pre);
  EXPECT_TRUE(pre.dapter_pretrained);
  const AdapterSet<float> loaded = adapters_from_checkpoint(load_checkpoint(out / "adapters.mvck"), cfg);
  EXPECT_TRUE(loaded.dapter_pretrained);

  AdapterSet<float> set = init_adapters<float>(cfg, LoraConfig{}, 4);
  const AdapterSet<float> fresh = set;
  restore_dapter(set, loaded);
  EXPECT_TRUE(set.dapter_pretrained);
  std::vector<Tensor> a, b, c2, d;
  set.for_each_in(Family::Dapter, [&](const std::string&, const Tensor& t) { a.push_back(t); });
  pre.for_each_in(Family::Dapter, [&](const std::string&, const Tensor& t) { b.push_back(t); });
  EXPECT_EQ(a, b);
  set.for_each_in(Family::DreamBooth, [&](const std::string&, const Tensor& t) { c2.push_back(t); });
  fresh.for_each_in(Family::DreamBooth, [&](const std::string&, const Tensor& t) { d.push_back(t); });
  EXPECT_EQ(c2, d);
  EXPECT_EQ(run_subject_stage(stage(Stage::Joint), theta, set, data).rows.size(), 3u);

  AdapterSet<float> other = init_adapters<float>(cfg, LoraConfig{8, 16.0}, 4);
  EXPECT_THROW(restore_dapter(other, loaded), ConfigError);
  fs::remove_all(out);
}

TEST_F(Training, BackboneStageWritesDeterministicCheckpoints) {
  std::string bytes[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path out = scratch("bb" + std::to_string(run));
    ModelParams<float> m = init_model<float>(cfg, 1);
    BackboneConfig b;
    b.iters = 2;
    b.seed = 5;
    b.corpus_objects = 10;
    b.checkpoint_every = 1;
    b.out_dir = out;
    const LossLog log = run_backbone_stage(b, m);
    EXPECT_EQ(log.rows.size(), 2u);
    EXPECT_TRUE(fs::exists(out / "last_good.mvck"));
    bytes[run] = read_file(out / "backbone.mvck");
    fs::remove_all(out);
  }
  EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(ConfigFile, ParsesKeyValueLines) {
  Config c({{"iters", "400", ""}, {"lr", "1e-4", ""}, {"force", "false", ""}, {"views", "", ""}});
  c.parse("# comment\n iters = 12 \n\nlr=0.5 # trailing\nforce=yes\nviews=1, 2,3\n");
  EXPECT_EQ(c.integer("iters"), 12);
  EXPECT_DOUBLE_EQ(c.real("lr"), 0.5);
  EXPECT_TRUE(c.boolean("force"));
  EXPECT_EQ(c.int_list("views"), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(c.dump(), "iters=12\nlr=0.5\nforce=yes\nviews=1, 2,3\n");
}

TEST(ConfigFile, RejectsBadInput) {
  Config c({{"iters", "400", ""}, {"lr", "1e-4", ""}});
  EXPECT_THROW(c.parse("bogus=1\n"), ConfigError);
  EXPECT_THROW(c.parse("iters\n"), ConfigError);
  c.set("iters", "12x");
  EXPECT_THROW(c.integer("iters"), ConfigError);
  c.set("lr", "fast");
  EXPECT_THROW(c.real("lr"), ConfigError);
  EXPECT_THROW(c.boolean("lr"), ConfigError);
  EXPECT_THROW(c.str("nope"), ConfigError);
  EXPECT_THROW(c.load("/nonexistent/mv3d.cfg"), ConfigError);
}
