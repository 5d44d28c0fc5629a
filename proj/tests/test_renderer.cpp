#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Eigenvalues>

#include "oracles.hpp"
#include "skipgs/renderer.hpp"

using namespace skipgs;

namespace {

Camera<double> centered_camera(int w, int h, double f) {
  Camera<double> cam;
  cam.focal = Vec2<double>(f, f);
  cam.principal = Vec2<double>(w / 2, h / 2);
  cam.width = w;
  cam.height = h;
  return cam;
}

Gaussian3D<double> blob(const Vec3<double>& mu, double scale, double alpha, const Vec3<double>& color) {
  Gaussian3D<double> g;
  g.mu = mu;
  g.log_scale = Vec3<double>::Constant(std::log(scale));
  g.opacity_logit = logit(alpha);
  g.color = color;
  return g;
}

}  // namespace

TEST(Covariance3d, Examples) {
  EXPECT_TRUE(covariance_3d<double>({1, 0, 0, 0}, Vec3<double>::Zero()).isApprox(Mat3<double>::Identity(), 1e-15));
  const Vec3<double> s123(0, std::log(2.0), std::log(3.0));
  EXPECT_TRUE(covariance_3d<double>({1, 0, 0, 0}, s123).isApprox(Vec3<double>(1, 4, 9).asDiagonal().toDenseMatrix(), 1e-14));
  const double h = std::sqrt(0.5);
  const Mat3<double> rz = covariance_3d<double>({h, 0, 0, h}, Vec3<double>(0, std::log(2.0), 0));
  EXPECT_LT((rz - Vec3<double>(4, 1, 1).asDiagonal().toDenseMatrix()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Covariance3d, ZeroQuaternionRejected) {
  EXPECT_THROW(covariance_3d<double>(Vec4<double>::Zero(), Vec3<double>::Zero()), ValidationError);
}

TEST(Covariance3d, SymmetricPsdForRandomInputs) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  for (int i = 0; i < 2000; ++i) {
    const Vec4<double> q(n(rng), n(rng), n(rng), n(rng));
    const Vec3<double> ls(2 * n(rng), 2 * n(rng), 2 * n(rng));
    const Mat3<double> c = covariance_3d(q, ls);
    ASSERT_LT((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-12 * c.cwiseAbs().maxCoeff());
    Eigen::SelfAdjointEigenSolver<Mat3<double>> es(c);
    ASSERT_GE(es.eigenvalues().minCoeff(), -1e-9);
  }
}

TEST(Project, OnAxisIsotropic) {
  // (f sigma / z)^2 + 0.3 with f = 100, sigma = 0.5, z = 5.
  const auto cam = centered_camera(64, 48, 100.0);
  const auto pg = project<double>(Vec3<double>(0, 0, 5), Mat3<double>::Identity() * 0.25, cam);
  ASSERT_TRUE(pg.visible);
  EXPECT_NEAR(pg.cov2d(0, 0), 100.3, 1e-12);
  EXPECT_NEAR(pg.cov2d(1, 1), 100.3, 1e-12);
  EXPECT_NEAR(pg.cov2d(0, 1), 0.0, 1e-12);
  EXPECT_EQ(pg.mean2d, Vec2<double>(32, 24));
  EXPECT_EQ(pg.depth, 5.0);
}

TEST(Project, BehindNearPlaneNotVisible) {
  const auto cam = centered_camera(16, 16, 10.0);
  EXPECT_FALSE(project<double>(Vec3<double>(0, 0, 0.01), Mat3<double>::Identity(), cam).visible);
  EXPECT_FALSE(project<double>(Vec3<double>(0, 0, -2), Mat3<double>::Identity(), cam).visible);
  EXPECT_TRUE(project<double>(Vec3<double>(0, 0, 0.02), Mat3<double>::Identity(), cam).visible);
}

TEST(Project, MatchesFiniteDifferenceJacobian) {
  // The screen covariance is J W Sigma W^T J^T with J the derivative of the pixel map.
  Camera<double> cam = look_at<double>(Vec3<double>(1, 0.5, -4), Vec3<double>::Zero(), Vec3<double>(0, 1, 0), 40, 32, 32, 0);
  const Vec3<double> mu(0.3, -0.2, 0.4);
  const Mat3<double> cov = covariance_3d<double>({0.9, 0.2, -0.3, 0.1}, Vec3<double>(-1, -0.5, -1.5));
  RenderSettings<double> rs;
  rs.dilation = 0;
  const auto pg = project(mu, cov, cam, rs);
  auto pixel = [&](const Vec3<double>& p) {
    const Vec3<double> c = cam.to_camera(p);
    return Vec2<double>(cam.focal[0] * c[0] / c[2] + cam.principal[0], cam.focal[1] * c[1] / c[2] + cam.principal[1]);
  };
  Eigen::Matrix<double, 2, 3> jw;
  for (int k = 0; k < 3; ++k) {
    Vec3<double> e = Vec3<double>::Zero();
    e[k] = 1e-6;
    jw.col(k) = (pixel(mu + e) - pixel(mu - e)) / 2e-6;
  }
  EXPECT_LT((pg.cov2d - jw * cov * jw.transpose()).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((pg.mean2d - pixel(mu)).norm(), 1e-12);
}

TEST(EffectiveOpacity, Examples) {
  EXPECT_EQ(effective_opacity<double>(0.5, Vec2<double>::Zero(), Mat2<double>::Identity()), 0.5);
  EXPECT_EQ(effective_opacity<double>(0.999, Vec2<double>::Zero(), Mat2<double>::Identity()), 0.99);
  RenderSettings<double> unclamped;
  unclamped.alpha_clamp = 1.0;
  EXPECT_NEAR(effective_opacity<double>(1.0, Vec2<double>(std::sqrt(2.0), 0), Mat2<double>::Identity(), unclamped),
              std::exp(-1.0), 1e-15);
  EXPECT_EQ(effective_opacity<double>(0.002, Vec2<double>::Zero(), Mat2<double>::Identity()), 0.0);
}

TEST(CompositePixel, Examples) {
  const Vec3<double> bg(0.2, 0.4, 0.6);
  EXPECT_EQ(composite_pixel<double>({}, bg), bg);
  const Vec3<double> c1(1, 0.5, 0.25), c2(0.1, 0.2, 0.3);
  const std::vector<Contribution<double>> one{{c1, 0.5}};
  EXPECT_TRUE(composite_pixel<double>(one, Vec3<double>::Zero()).isApprox(0.5 * c1));
  const std::vector<Contribution<double>> two{{c1, 0.5}, {c2, 0.5}};
  EXPECT_TRUE(composite_pixel<double>(two, Vec3<double>::Zero()).isApprox(0.5 * c1 + 0.25 * c2));
}

TEST(CompositePixel, EarlyTermination) {
  std::vector<Contribution<double>> many(10, {Vec3<double>::Ones(), 0.9});
  double t_final = 0;
  composite_pixel<double>(many, Vec3<double>::Zero(), {}, &t_final);
  // 0.1^4 = 1e-4 would be reached by the fourth layer; blending stops after three.
  EXPECT_NEAR(t_final, 1e-3, 1e-15);
}

TEST(Render, EmptySceneIsBackground) {
  SceneModel<double> scene;
  scene.background = Vec3<double>(0.1, 0.2, 0.3);
  const auto out = render(scene, centered_camera(8, 6, 10));
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(out.image.at(x, y, c), scene.background[c]);
}

TEST(Render, SingleOnAxisGaussianPeak) {
  // alpha = 0.7 at the centre pixel; exp(0) = 1.
  SceneModel<double> scene;
  scene.gaussians.push_back(blob({0, 0, 4}, 0.3, 0.7, Vec3<double>::Ones()));
  const auto cam = centered_camera(32, 32, 40);
  const auto out = render(scene, cam);
  EXPECT_NEAR(out.image.at(16, 16, 0), 0.7, 1e-15);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      if (x != 16 || y != 16) {
        EXPECT_LT(out.image.at(x, y, 0), out.image.at(16, 16, 0));
      }
}

TEST(Render, MatchesIndependentComposite) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto scene = oracle::tiny_scene(rng, 6);
    const auto cam = oracle::tiny_camera(12);
    const auto out = render(scene, cam);
    std::vector<std::size_t> order(scene.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<ProjectedGaussian<double>> pgs;
    for (const auto& g : scene.gaussians) pgs.push_back(project(g.mu, covariance_3d(g.rot, g.log_scale), cam));
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return pgs[a].depth < pgs[b].depth; });
    for (int y = 0; y < cam.height; ++y) {
      for (int x = 0; x < cam.width; ++x) {
        std::vector<Contribution<double>> contrib;
        for (std::size_t i : order) {
          if (!pgs[i].visible) continue;
          const Vec2<double> d = Vec2<double>(x, y) - pgs[i].mean2d;
          if (std::abs(d[0]) > 3 * std::sqrt(pgs[i].cov2d(0, 0)) || std::abs(d[1]) > 3 * std::sqrt(pgs[i].cov2d(1, 1)))
            continue;
          const double a = effective_opacity(sigmoid(scene.gaussians[i].opacity_logit), d, pgs[i].cov2d);
          if (a > 0) contrib.push_back({scene.gaussians[i].color, a});
        }
        const Vec3<double> expect = composite_pixel<double>(contrib, scene.background);
        for (int c = 0; c < 3; ++c) ASSERT_NEAR(out.image.at(x, y, c), expect[c], 1e-12);
      }
    }
  }
}

TEST(Render, StorageOrderDoesNotMatter) {
  std::mt19937_64 rng(5);
  const auto scene = oracle::tiny_scene(rng, 8);
  auto shuffled = scene;
  std::reverse(shuffled.gaussians.begin(), shuffled.gaussians.end());
  std::swap(shuffled.gaussians[1], shuffled.gaussians[5]);
  const auto cam = oracle::tiny_camera(16);
  EXPECT_EQ(render(scene, cam).image, render(shuffled, cam).image);
}

TEST(Render, PrincipalPointShiftTranslatesImage) {
  SceneModel<double> scene;
  scene.gaussians.push_back(blob({0, 0, 4}, 0.2, 0.8, Vec3<double>(1, 0.5, 0.2)));
  auto cam = centered_camera(40, 40, 30);
  const auto a = render(scene, cam).image;
  cam.principal += Vec2<double>(5, -3);
  const auto b = render(scene, cam).image;
  for (int y = 3; y < 35; ++y)
    for (int x = 0; x < 35; ++x)
      for (int c = 0; c < 3; ++c) ASSERT_EQ(b.at(x + 5, y - 3, c), a.at(x, y, c));
}

TEST(Render, NonFiniteParameterNamesGaussian) {
  std::mt19937_64 rng(6);
  auto scene = oracle::tiny_scene(rng, 4);
  scene.gaussians[2].log_scale[1] = std::nan("");
  try {
    render(scene, oracle::tiny_camera());
    FAIL() << "expected an error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("Gaussian 2"), std::string::npos);
  }
}

TEST(Render, TransmittanceConservation) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto scene = oracle::tiny_scene(rng, 12);
    const auto out = render(scene, oracle::tiny_camera(16));
    ASSERT_LE(oracle::max_conservation_error(out), 1e-12);
  }
}

TEST(Render, ThreadCountDoesNotChangeResults) {
  std::mt19937_64 rng(8);
  SceneModel<float> scene = oracle::tiny_scene(rng, 40).cast<float>();
  Camera<float> cam = oracle::tiny_camera(37).cast<float>();
  Image<float> w = oracle::random_image(rng, 37, 37).cast<float>();
  RenderSettings<float> one, four;
  four.threads = 4;
  const auto a = render(scene, cam, one), b = render(scene, cam, four);
  EXPECT_EQ(a.image, b.image);
  const auto ga = render_backward(scene, cam, a, w, one), gb = render_backward(scene, cam, b, w, four);
  EXPECT_EQ(ga.params, gb.params);
  EXPECT_EQ(ga.pos_grad_norm2d, gb.pos_grad_norm2d);
}

TEST(RenderBackward, ZeroUpstreamGivesZeroGradient) {
  std::mt19937_64 rng(9);
  const auto scene = oracle::tiny_scene(rng);
  const auto cam = oracle::tiny_camera();
  const auto out = render(scene, cam);
  const auto g = render_backward(scene, cam, out, Image<double>(8, 8));
  for (const auto& p : g.params)
    for (double v : p) EXPECT_EQ(v, 0.0);
}

TEST(RenderBackward, InvisibleGaussianHasZeroGradient) {
  std::mt19937_64 rng(10);
  auto scene = oracle::tiny_scene(rng);
  scene.gaussians[1].mu = Vec3<double>(0, 0, -3);     // behind the camera
  scene.gaussians[3].mu = Vec3<double>(40, 0, 4);     // far off screen
  const auto cam = oracle::tiny_camera();
  const auto out = render(scene, cam);
  EXPECT_FALSE(out.visible[1]);
  EXPECT_FALSE(out.visible[3]);
  const auto g = render_backward(scene, cam, out, oracle::random_image(rng, 8, 8));
  for (std::size_t i : {1u, 3u}) {
    for (double v : g.params[i]) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(g.pos_grad_norm2d[i], 0.0);
    EXPECT_FALSE(g.visible[i]);
  }
}

TEST(RenderBackward, ShapeMismatchRejected) {
  std::mt19937_64 rng(11);
  const auto scene = oracle::tiny_scene(rng);
  const auto cam = oracle::tiny_camera();
  const auto out = render(scene, cam);
  EXPECT_THROW(render_backward(scene, cam, out, Image<double>(7, 8)), ValidationError);
  auto bigger = scene;
  bigger.gaussians.push_back(bigger.gaussians[0]);
  EXPECT_THROW(render_backward(bigger, cam, out, Image<double>(8, 8)), ValidationError);
}

TEST(RenderBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  int checked = 0;
  for (int attempt = 0; checked < 25 && attempt < 100; ++attempt) {
    const auto scene = oracle::tiny_scene(rng);
    const auto w = oracle::random_image(rng, 8, 8);
    const auto res = oracle::check_render_gradient(scene, oracle::tiny_camera(), w, 1e-4, 1e-12);
    if (!res.smooth) continue;
    ++checked;
    EXPECT_GT(res.fragments, 0u);
    EXPECT_LE(res.cmp.max_rel, 1e-4) << "scene attempt " << attempt << ", entry " << res.cmp.worst;
  }
  EXPECT_EQ(checked, 25);
}

TEST(RenderBackward, ClampedFragmentsPassNoOpacityGradient) {
  // Opacity so high the centre is clamped: the centre pixel alone carries no
  // opacity gradient, only colour.
  SceneModel<double> scene;
  scene.gaussians.push_back(blob({0, 0, 4}, 0.01, 0.999, Vec3<double>(0.3, 0.6, 0.9)));
  const auto cam = centered_camera(9, 9, 10);
  const auto out = render(scene, cam);
  ASSERT_EQ(out.pixel_fragments(4, 4).size(), 1u);
  EXPECT_TRUE(out.pixel_fragments(4, 4)[0].clamped);
  Image<double> w(9, 9);
  w.at(4, 4, 0) = 1;
  const auto g = render_backward(scene, cam, out, w);
  EXPECT_EQ(g.params[0][10], 0.0);
  EXPECT_EQ(g.params[0][11], 0.99);
}
