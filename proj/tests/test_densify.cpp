#include <gtest/gtest.h>

#include <cmath>

#include "skipgs/densify.hpp"

using namespace skipgs;

namespace {

Gaussian3D<float> gaussian(float alpha, float scale, float x = 0) {
  Gaussian3D<float> g;
  g.mu = Vec3<float>(x, 0, 0);
  g.opacity_logit = logit(alpha);
  g.log_scale = Vec3<float>::Constant(std::log(scale));
  return g;
}

GradStats stats_for(std::vector<double> means) {
  GradStats s;
  s.sum = means;
  s.count.assign(means.size(), 1);
  return s;
}

DensifyConfig config() {
  DensifyConfig c;
  c.t_d = 1000;
  c.scene_extent = 1.0;
  return c;
}

}  // namespace

TEST(GradStats, RunningMean) {
  GradStats s;
  GradBuffer<float> b(2);
  b.visible = {1, 0};
  b.pos_grad_norm2d = {3.0f, 9.0f};
  accumulate_grad_stats(b, s);
  EXPECT_EQ(s.mean(0), 3.0);
  EXPECT_EQ(s.mean(1), 0.0);
  b.pos_grad_norm2d = {5.0f, 9.0f};
  accumulate_grad_stats(b, s);
  EXPECT_EQ(s.mean(0), 4.0);
  GradBuffer<float> wrong(3);
  EXPECT_THROW(accumulate_grad_stats(wrong, s), ValidationError);
}

TEST(Densify, PruneTransparent) {
  SceneModel<float> scene;
  scene.gaussians = {gaussian(0.001f, 0.001f), gaussian(0.5f, 0.001f, 1)};
  GradStats s = stats_for({0, 0});
  const auto r = densify_and_prune(scene, s, config(), 100);
  EXPECT_EQ(r.pruned, 1u);
  ASSERT_EQ(scene.size(), 1u);
  EXPECT_EQ(scene.gaussians[0].mu[0], 1.0f);
  EXPECT_EQ(r.layout, DensifyLayout{1});
}

TEST(Densify, NeverPrunesAboveThreshold) {
  SceneModel<float> scene;
  scene.gaussians = {gaussian(0.0051f, 0.001f), gaussian(0.9f, 0.001f)};
  GradStats s;
  densify_and_prune(scene, s, config(), 100);
  EXPECT_EQ(scene.size(), 2u);
}

TEST(Densify, CloneSmallHighGradient) {
  SceneModel<float> scene;
  scene.gaussians = {gaussian(0.5f, 0.001f), gaussian(0.5f, 0.001f, 2)};
  GradStats s = stats_for({5e-4, 1e-4});
  const auto r = densify_and_prune(scene, s, config(), 100);
  EXPECT_EQ(r.cloned, 1u);
  ASSERT_EQ(scene.size(), 3u);
  EXPECT_EQ(scene.gaussians[2], scene.gaussians[0]);
  EXPECT_EQ(r.layout, (DensifyLayout{0, 1, std::nullopt}));
  EXPECT_TRUE(s.empty());
}

TEST(Densify, SplitLargeHighGradient) {
  SceneModel<float> scene;
  scene.gaussians = {gaussian(0.5f, 0.2f)};
  const auto parent = scene.gaussians[0];
  GradStats s = stats_for({5e-4});
  const auto r = densify_and_prune(scene, s, config(), 100);
  EXPECT_EQ(r.split, 1u);
  ASSERT_EQ(scene.size(), 2u);
  for (const auto& c : scene.gaussians) {
    for (int k = 0; k < 3; ++k) {
      EXPECT_NEAR(std::exp(c.log_scale[k]), 0.2f / 1.6f, 1e-6);
      EXPECT_LT(c.log_scale[k], parent.log_scale[k]);
    }
    EXPECT_EQ(c.opacity_logit, parent.opacity_logit);
  }
  EXPECT_NE(scene.gaussians[0].mu, scene.gaussians[1].mu);
  EXPECT_EQ(r.layout, (DensifyLayout{std::nullopt, std::nullopt}));
}

TEST(Densify, SplitIsSeeded) {
  auto run = [](std::uint64_t seed) {
    SceneModel<float> scene;
    scene.gaussians = {gaussian(0.5f, 0.2f)};
    GradStats s = stats_for({5e-4});
    DensifyConfig c = config();
    c.seed = seed;
    densify_and_prune(scene, s, c, 100);
    return scene;
  };
  EXPECT_EQ(run(3), run(3));
  EXPECT_NE(run(3), run(4));
}

TEST(Densify, NoStatisticsNoGrowth) {
  SceneModel<float> scene;
  scene.gaussians = {gaussian(0.5f, 0.001f), gaussian(0.5f, 0.5f)};
  GradStats s;
  const auto r = densify_and_prune(scene, s, config(), 100);
  EXPECT_EQ(r.after, 2u);
  EXPECT_EQ(r.cloned + r.split, 0u);
}

TEST(Densify, AfterEndIsContractViolation) {
  SceneModel<float> scene;
  scene.gaussians = {gaussian(0.5f, 0.01f)};
  GradStats s;
  EXPECT_THROW(densify_and_prune(scene, s, config(), 1001), ContractViolation);
}

TEST(Densify, EventSchedule) {
  DensifyConfig c = config();
  EXPECT_FALSE(c.is_event(0));
  EXPECT_FALSE(c.is_event(50));
  EXPECT_TRUE(c.is_event(100));
  EXPECT_TRUE(c.is_event(1000));
  EXPECT_FALSE(c.is_event(1100));
}
