#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "skipgs/optim.hpp"

using namespace skipgs;

namespace {

SceneModel<float> random_scene(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  SceneModel<float> s;
  for (std::size_t i = 0; i < n; ++i) {
    ParamVector<float> p;
    for (float& v : p) v = d(rng);
    s.gaussians.push_back(Gaussian3D<float>::from_params(p));
  }
  return s;
}

GradBuffer<float> constant_grads(std::size_t n, float g) {
  GradBuffer<float> b(n);
  for (auto& p : b.params) p.fill(g);
  return b;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  std::mt19937_64 rng(1);
  auto scene = random_scene(rng, 4);
  const auto before = scene;
  AdamState st(4);
  adam_step(st, scene, constant_grads(4, 0.0f), LearningRates{});
  EXPECT_EQ(scene, before);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::mt19937_64 rng(2);
  auto scene = random_scene(rng, 3);
  const auto before = scene;
  AdamState st(3);
  LearningRates lrs;
  const auto stats = adam_step(st, scene, constant_grads(3, 0.37f), lrs);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto a = before.gaussians[i].to_params(), b = scene.gaussians[i].to_params();
    for (ParamGroup g : kParamGroups) {
      const auto r = group_range(g);
      for (std::size_t k = r.begin; k < r.end; ++k)
        EXPECT_NEAR(a[k] - b[k], lrs.for_group(g), 1e-6 + 1e-3 * lrs.for_group(g)) << group_name(g);
    }
    EXPECT_GT(stats.update_norm[i], 0.0);
  }
}

TEST(Adam, MatchesReferenceRecurrence) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0.0, 1.0);
  auto scene = random_scene(rng, 2);
  AdamState st(2);
  LearningRates lrs;
  std::vector<double> x, m(28, 0), v(28, 0);
  for (const auto& g : scene.gaussians)
    for (float p : g.to_params()) x.push_back(p);
  for (int step = 1; step <= 5; ++step) {
    GradBuffer<float> gb(2);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t k = 0; k < kParamsPerGaussian; ++k) gb.params[i][k] = static_cast<float>(d(rng));
    adam_step(st, scene, gb, lrs);
    for (std::size_t i = 0; i < 2; ++i) {
      for (ParamGroup grp : kParamGroups) {
        const auto r = group_range(grp);
        for (std::size_t k = r.begin; k < r.end; ++k) {
          const std::size_t j = i * kParamsPerGaussian + k;
          const double g = gb.params[i][k];
          m[j] = 0.9 * m[j] + 0.1 * g;
          v[j] = 0.999 * v[j] + 0.001 * g * g;
          const double mh = m[j] / (1 - std::pow(0.9, step)), vh = v[j] / (1 - std::pow(0.999, step));
          x[j] -= lrs.for_group(grp) * mh / (std::sqrt(vh) + 1e-15);
          ASSERT_NEAR(scene.gaussians[i].to_params()[k], x[j], 1e-5);
        }
      }
    }
  }
}

TEST(Adam, StepCountsCalls) {
  std::mt19937_64 rng(4);
  auto scene = random_scene(rng, 2);
  AdamState st(2);
  adam_step(st, scene, constant_grads(2, 0.1f), LearningRates{});
  const auto s0 = st.step;
  adam_step(st, scene, constant_grads(2, 0.1f), LearningRates{});
  adam_step(st, scene, constant_grads(2, 0.1f), LearningRates{});
  EXPECT_EQ(st.step - s0, 2);
}

TEST(Adam, NonFiniteGradientNamesGroupAndIndex) {
  std::mt19937_64 rng(5);
  auto scene = random_scene(rng, 3);
  const auto before = scene;
  AdamState st(3);
  auto g = constant_grads(3, 0.1f);
  g.params[2][8] = std::nanf("");
  try {
    adam_step(st, scene, g, LearningRates{});
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("scale"), std::string::npos);
    EXPECT_NE(msg.find("Gaussian 2"), std::string::npos);
  }
  EXPECT_EQ(scene, before);
  EXPECT_EQ(st.step, 0);
}

TEST(Adam, ShapeMismatchRejected) {
  std::mt19937_64 rng(6);
  auto scene = random_scene(rng, 3);
  AdamState st(2);
  EXPECT_THROW(adam_step(st, scene, constant_grads(3, 0.1f), LearningRates{}), ValidationError);
  AdamState ok(3);
  EXPECT_THROW(adam_step(ok, scene, constant_grads(4, 0.1f), LearningRates{}), ValidationError);
}

TEST(LearningRates, PositionDecaysLogLinearly) {
  LearningRates l;
  EXPECT_NEAR(l.at_iteration(0, 100).position, 1.6e-4, 1e-18);
  EXPECT_NEAR(l.at_iteration(100, 100).position, 1.6e-6, 1e-18);
  EXPECT_NEAR(l.at_iteration(50, 100).position, 1.6e-5, 1e-15);
  EXPECT_EQ(l.at_iteration(50, 100).opacity, l.opacity);
}

TEST(ReshapeAfterDensify, Examples) {
  AdamState st(3);
  for (std::size_t i = 0; i < 3; ++i) {
    st.m[i].fill(float(i + 1));
    st.v[i].fill(float(10 * (i + 1)));
  }
  st.step = 7;

  AdamState pruned = st;
  reshape_after_densify(pruned, 3, {0, 2});
  ASSERT_EQ(pruned.size(), 2u);
  EXPECT_EQ(pruned.m[0], st.m[0]);
  EXPECT_EQ(pruned.m[1], st.m[2]);
  EXPECT_EQ(pruned.step, 7);

  AdamState cloned = st;
  reshape_after_densify(cloned, 3, {0, 1, 2, std::nullopt});
  ASSERT_EQ(cloned.size(), 4u);
  EXPECT_EQ(cloned.m[3], ParamVector<float>{});
  EXPECT_EQ(cloned.v[3], ParamVector<float>{});

  AdamState same = st;
  reshape_after_densify(same, 3, {0, 1, 2});
  EXPECT_EQ(same, st);

  EXPECT_THROW(reshape_after_densify(same, 4, {0}), ValidationError);
  EXPECT_THROW(reshape_after_densify(same, 3, {5}), ValidationError);
}

TEST(AdamJson, RoundTrip) {
  std::mt19937_64 rng(7);
  auto scene = random_scene(rng, 3);
  AdamState st(3);
  adam_step(st, scene, constant_grads(3, 0.25f), LearningRates{});
  const AdamState back = nlohmann::json::parse(nlohmann::json(st).dump()).get<AdamState>();
  EXPECT_EQ(back, st);
}
