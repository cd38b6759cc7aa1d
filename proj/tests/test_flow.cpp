#include <gtest/gtest.h>

#include <cmath>

#include "mv3d/flow/flow.hpp"

using namespace mv3d;

namespace {

Tensor frames(std::uint64_t seed, std::size_t n = 1) { return Rng(seed).uniform_tensor<float>({n, 16, 16, 3}, -1, 1); }

}  // namespace

TEST(Corrupt, Endpoints) {
  const Tensor x = frames(1);
  NoiseDraw<float> d = draw_noise<float>(2, x.shape());
  d.t = 0.0;
  EXPECT_EQ(corrupt(x, d).z, x);
  d.t = 1.0;
  EXPECT_EQ(corrupt(x, d).z, d.eps);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(corrupt(x, d).v[i], d.eps[i] - x[i]);
}

TEST(Corrupt, PointLiesOnTheLine) {
  const BasicTensor<double> x = Rng(3).uniform_tensor<double>({1, 16, 16, 3}, -1, 1);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto d = draw_noise<double>(s, x.shape());
    const auto c = corrupt(x, d);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(c.z[i], x[i] + d.t * c.v[i], 1e-12);
  }
}

TEST(Corrupt, MonteCarloMoments) {
  const Tensor x({1, 4, 4, 1}, std::vector<float>(16, 0.5f));
  const double t = 0.3;
  const int n = 4000;
  double s = 0, s2 = 0;
  for (int k = 0; k < n; ++k) {
    NoiseDraw<float> d = draw_noise<float>(std::uint64_t(k), x.shape());
    d.t = t;
    const Corrupted<float> c = corrupt(x, d);
    for (float z : c.z.vec()) {
      s += z;
      s2 += z * z;
    }
  }
  const double N = double(n) * 16, mean = s / N, var = s2 / N - mean * mean;
  EXPECT_NEAR(mean, (1 - t) * 0.5, 5 * t / std::sqrt(N));
  EXPECT_NEAR(var, t * t, 5 * t * t * std::sqrt(2.0 / N));
}

TEST(Corrupt, TimeIsUniform) {
  const int n = 5000;
  double s = 0, lo = 1, hi = 0;
  for (int k = 0; k < n; ++k) {
    const double t = draw_noise<float>(std::uint64_t(k), {1}).t;
    s += t;
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  EXPECT_NEAR(s / n, 0.5, 5 * std::sqrt(1.0 / 12.0 / n));
  EXPECT_GE(lo, 0.0);
  EXPECT_LE(hi, 1.0);
}

TEST(Corrupt, ShapeAndTimeChecked) {
  NoiseDraw<float> d = draw_noise<float>(1, {1, 16, 16, 3});
  EXPECT_THROW(corrupt(frames(1, 2), d), ContractViolation);
  d.t = 1.5;
  EXPECT_THROW(corrupt(frames(1), d), ContractViolation);
}

TEST(Range, RoundTrip) {
  const Tensor u = Rng(4).uniform_tensor<float>({1, 16, 16, 3}, 0, 1);
  EXPECT_LT(max_abs_diff(to_unit_range(to_model_range(u)), u), 1e-6f);
  const Tensor wild({2}, std::vector<float>{-3.0f, 3.0f});
  EXPECT_EQ(to_unit_range(wild).vec(), (std::vector<float>{0.0f, 1.0f}));
}

TEST(Euler, OneStepOnExactFieldRecoversData) {
  const Tensor x = frames(5);
  const Tensor eps = Rng(6).normal_tensor<float>(x.shape());
  const Tensor out = euler_integrate(eps, 1, [&](const Tensor& z, double) {
    Tensor v = z;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = z[i] - x[i];
    return v;
  });
  EXPECT_LT(max_abs_diff(out, x), 1e-6f);
}

TEST(Euler, StraightPathIsExactForAnyStepCount) {
  const Tensor x = frames(7);
  const Tensor eps = Rng(8).normal_tensor<float>(x.shape());
  for (int steps : {2, 5, 16}) {
    int calls = 0;
    double last_t = 2;
    const Tensor out = euler_integrate(eps, steps, [&](const Tensor& z, double t) {
      ++calls;
      EXPECT_LT(t, last_t);
      last_t = t;
      Tensor v = z;
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = float((z[i] - x[i]) / t);
      return v;
    });
    EXPECT_EQ(calls, steps);
    EXPECT_NEAR(last_t, 1.0 / steps, 1e-12);
    EXPECT_LT(max_abs_diff(out, x), 1e-5f);
  }
  EXPECT_THROW(euler_integrate(eps, 0, [](const Tensor& z, double) { return z; }), ContractViolation);
}

class Sampler : public ::testing::Test {
 protected:
  ModelConfig cfg;
  ModelParams<float> params = init_model<float>(cfg, 3);
  SamplerConfig sc = [] {
    SamplerConfig s;
    s.steps = 4;
    s.seed = 11;
    s.prompt = vocab::subject_prompt(vocab::class_id(0));
    return s;
  }();
};

TEST_F(Sampler, DeterministicAndSeeded) {
  const Tensor a = sample(params, nullptr, sc);
  EXPECT_EQ(a, sample(params, nullptr, sc));
  SamplerConfig other = sc;
  other.seed = 12;
  EXPECT_NE(a, sample(params, nullptr, other));
  for (float v : a.vec()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST_F(Sampler, FramesAndReferences) {
  SamplerConfig s = sc;
  s.frames = 3;
  s.refs = {frames(1), frames(2)};
  s.ref_views = {1, 2};
  EXPECT_EQ(sample(params, nullptr, s).shape(), (Shape{3, 16, 16, 3}));
}

TEST_F(Sampler, RejectsBadConfig) {
  SamplerConfig s = sc;
  s.steps = 0;
  EXPECT_THROW(sample(params, nullptr, s), ContractViolation);
  s = sc;
  s.frames = 0;
  EXPECT_THROW(sample(params, nullptr, s), ContractViolation);
}

class Objectives : public ::testing::Test {
 protected:
  ModelConfig cfg;
  ModelParams<float> params = init_model<float>(cfg, 4);
  AdapterSet<float> set = [this] {
    AdapterSet<float> s = init_adapters<float>(cfg, LoraConfig{}, 5);
    Rng rng(6);
    s.for_each([&](const std::string&, Tensor& t) { t = rng.normal_tensor<float>(t.shape(), 0.05); });
    return s;
  }();
  std::vector<int> prompt = vocab::subject_prompt(vocab::class_id(2));
};

TEST_F(Objectives, IdentityLossMatchesManualComputation) {
  const Tensor x = frames(9);
  const auto d = draw_noise<float>(10, x.shape());
  Tape<float> tape;
  const auto m = bind_model(tape, params, false);
  const auto b = bind_adapters(tape, set, Stage::DreamBoothOnly);
  const float loss = loss_3db(m, b, x, prompt, d).value().item();
  const auto c = corrupt(x, d);
  const Tensor v = predict_velocity(params, &set, c.z, d.t, {}, {}, prompt, 0);
  double s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) s += double(v[i] - c.v[i]) * (v[i] - c.v[i]);
  EXPECT_NEAR(loss, s / double(v.size()), 1e-5);
}

TEST_F(Objectives, IdentityLossTakesSingleFrames) {
  Tape<float> tape;
  const auto m = bind_model(tape, params, false);
  const auto b = bind_adapters(tape, set, Stage::DreamBoothOnly);
  const Tensor two = frames(1, 2);
  EXPECT_THROW(loss_3db(m, b, two, prompt, draw_noise<float>(1, two.shape())), ContractViolation);
  EXPECT_THROW(loss_3dapter_pretrain(m, b, two, frames(2), prompt, draw_noise<float>(1, {1, 16, 16, 3})),
               ContractViolation);
  EXPECT_THROW(loss_joint_views(m, b, two, {}, {}, 0, prompt, draw_noise<float>(1, two.shape())), ContractViolation);
}

TEST_F(Objectives, IdentityLossNeverReachesTheDapter) {
  Tape<float> tape;
  const auto m = bind_model(tape, params, false);
  const auto b = bind_adapters(tape, set, Stage::Joint);
  const Tensor x = frames(3);
  tape.backward(loss_3db(m, b, x, prompt, draw_noise<float>(4, x.shape())));
  for (const auto& [name, g] : adapter_grads(tape, set, b)) {
    const bool dapter = name.rfind("adapter/3dapter", 0) == 0;
    const float mx = max_abs_diff(*g, Tensor(g->shape(), 0.0f));
    if (dapter) {
      EXPECT_EQ(mx, 0.0f) << name;
    }
  }
}

TEST_F(Objectives, PretrainLossReachesOnlyTheDapter) {
  Tape<float> tape;
  const auto m = bind_model(tape, params, false);
  const auto b = bind_adapters(tape, set, Stage::Pretrain3Dapter);
  const Tensor x = frames(3), r = frames(4);
  tape.backward(loss_3dapter_pretrain(m, b, r, x, prompt, draw_noise<float>(4, x.shape())));
  double dapter = 0;
  for (const auto& [name, g] : adapter_grads(tape, set, b)) {
    if (name.rfind("adapter/3dapter", 0) == 0) {
      ASSERT_TRUE(g.has_value());
      dapter += max_abs_diff(*g, Tensor(g->shape(), 0.0f));
    } else {
      EXPECT_FALSE(g.has_value()) << name;
    }
  }
  EXPECT_GT(dapter, 0.0);
}

TEST_F(Objectives, CommonRandomNumbersGiveEqualLossesForEqualModels) {
  const Tensor x = frames(12), r = frames(13);
  const auto d = draw_noise<float>(14, x.shape());
  auto run = [&] {
    Tape<float> tape;
    const auto m = bind_model(tape, params, false);
    const auto b = bind_adapters(tape, set, Stage::Joint);
    return loss_joint_views(m, b, x, {r}, {2}, 3, prompt, d).value().item();
  };
  EXPECT_EQ(run(), run());
}
