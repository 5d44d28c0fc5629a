#pragma once

// CPU differentiable Gaussian splatting: projection to screen space, per-pixel
// front-to-back compositing, and the analytic adjoint of both.
//
// Each pixel gathers the Gaussians whose 3-sigma screen-space bounding box
// covers it, visits them in ascending depth (ties by index) and blends with
// opacity alpha * exp(-0.5 d^T cov2d^-1 d). Rows are processed in fixed bands
// and all per-band partial results are merged in band order, so forward and
// backward are bitwise reproducible for any worker count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <vector>

#include <Eigen/Core>
#include <Eigen/LU>

#include "skipgs/error.hpp"
#include "skipgs/image.hpp"
#include "skipgs/model.hpp"
#include "skipgs/parallel.hpp"

namespace skipgs {

template <typename T>
struct RenderSettings {
  T dilation = T(0.3);         // px^2 added to the screen covariance diagonal
  T alpha_clamp = T(0.99);
  T min_alpha = T(1.0 / 255.0);
  T min_transmittance = T(1e-4);
  T znear = T(0.01);
  T extent_sigmas = T(3);
  int threads = 1;
};

inline constexpr int kBandRows = 4;
inline constexpr int kBlockCols = 16;

template <typename T>
struct ProjectedGaussian {
  Vec2<T> mean2d = Vec2<T>::Zero();
  Mat2<T> cov2d = Mat2<T>::Identity();
  T depth = 0;
  bool visible = false;
};

// Everything the backward pass needs about one projected Gaussian.
template <typename T>
struct ProjectionCache {
  Vec3<T> p_cam = Vec3<T>::Zero();
  Mat3<T> cov_cam = Mat3<T>::Zero();
  Mat3<T> rotation = Mat3<T>::Identity();
  Vec4<T> quat = Vec4<T>(1, 0, 0, 0);  // normalized
  Vec3<T> scale = Vec3<T>::Ones();
  Eigen::Matrix<T, 2, 3> jacobian = Eigen::Matrix<T, 2, 3>::Zero();
  Mat2<T> conic = Mat2<T>::Identity();
  T alpha = 0;
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounding box
};

template <typename T>
struct Fragment {
  std::uint32_t gaussian;
  T alpha;          // effective opacity after clamping
  T transmittance;  // transmittance in front of this fragment
  bool clamped;
};

template <typename T>
struct RenderOutput {
  Image<T> image;
  std::vector<ProjectedGaussian<T>> per_gaussian;
  std::vector<std::uint8_t> visible;
  // Per-pixel fragment lists in compositing order (CSR layout).
  std::vector<std::size_t> pixel_offsets;
  std::vector<Fragment<T>> fragments;
  std::vector<T> final_transmittance;
  std::vector<ProjectionCache<T>> cache;

  std::span<const Fragment<T>> pixel_fragments(int x, int y) const {
    const std::size_t p = static_cast<std::size_t>(y) * image.width + x;
    return {fragments.data() + pixel_offsets[p], pixel_offsets[p + 1] - pixel_offsets[p]};
  }
};

namespace detail {

template <typename T>
Eigen::Matrix<T, 2, 3> projection_jacobian(const Vec3<T>& p, const Camera<T>& cam) {
  const T z = p[2], iz = T(1) / z, iz2 = iz * iz;
  Eigen::Matrix<T, 2, 3> j;
  j << cam.focal[0] * iz, 0, -cam.focal[0] * p[0] * iz2, 0, cam.focal[1] * iz, -cam.focal[1] * p[1] * iz2;
  return j;
}

// Compact copy of what the per-pixel loop reads.
template <typename T>
struct Splat {
  std::uint32_t index;
  T mx, my;
  T ca, cb, cc;  // inverse screen covariance
  T alpha;
  T min_power;
  Vec3<T> color;
  int x0, x1, y0, y1;
};

}  // namespace detail

// Screen-space mean, dilated covariance and depth of a Gaussian. Points at or
// behind the near plane come back with visible = false.
template <typename T>
ProjectedGaussian<T> project(const Vec3<T>& mu, const Mat3<T>& cov3d, const Camera<T>& cam,
                             const RenderSettings<T>& rs = {}) {
  ProjectedGaussian<T> out;
  const Vec3<T> p = cam.to_camera(mu);
  out.depth = p[2];
  if (!(p[2] > rs.znear)) return out;
  out.mean2d = Vec2<T>(cam.focal[0] * p[0] / p[2] + cam.principal[0], cam.focal[1] * p[1] / p[2] + cam.principal[1]);
  const auto j = detail::projection_jacobian(p, cam);
  out.cov2d = j * (cam.rotation * cov3d * cam.rotation.transpose()) * j.transpose();
  out.cov2d(0, 0) += rs.dilation;
  out.cov2d(1, 1) += rs.dilation;
  out.visible = true;
  return out;
}

// Opacity of a Gaussian at pixel offset `delta` from its screen-space mean;
// zero when the contribution falls under the cutoff.
template <typename T>
T effective_opacity(T alpha, const Vec2<T>& delta, const Mat2<T>& cov2d, const RenderSettings<T>& rs = {}) {
  const T det = cov2d.determinant();
  if (!(det > T(0))) throw Error("effective_opacity: singular screen covariance");
  const T power = T(-0.5) * delta.dot(cov2d.inverse() * delta);
  const T a = std::min(rs.alpha_clamp, alpha * std::exp(power));
  return a < rs.min_alpha ? T(0) : a;
}

template <typename T>
struct Contribution {
  Vec3<T> color;
  T alpha;
};

// Front-to-back blend of contributions already sorted by depth. Stops before a
// contribution would push transmittance under the termination threshold.
template <typename T>
Vec3<T> composite_pixel(std::span<const Contribution<T>> sorted, const Vec3<T>& background,
                        const RenderSettings<T>& rs = {}, T* final_transmittance = nullptr) {
  Vec3<T> c = Vec3<T>::Zero();
  T trans = 1;
  for (const auto& k : sorted) {
    const T next = trans * (T(1) - k.alpha);
    if (next < rs.min_transmittance) break;
    c += k.color * (k.alpha * trans);
    trans = next;
  }
  if (final_transmittance) *final_transmittance = trans;
  return c + background * trans;
}

template <typename T>
RenderOutput<T> render(const SceneModel<T>& scene, const Camera<T>& cam, const RenderSettings<T>& rs = {}) {
  cam.validate();
  const std::size_t n = scene.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!scene.gaussians[i].all_finite()) {
      std::ostringstream os;
      os << "render: Gaussian " << i << " has a non-finite parameter";
      throw ValidationError(os.str());
    }
  }

  const int width = cam.width, height = cam.height;
  RenderOutput<T> out;
  out.image = Image<T>(width, height);
  out.per_gaussian.resize(n);
  out.visible.assign(n, 0);
  out.cache.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = scene.gaussians[i];
    auto& pc = out.cache[i];
    pc.quat = normalize_quat(g.rot);
    pc.rotation = quat_to_rotation(pc.quat);
    pc.scale = g.log_scale.array().exp().matrix();
    const Mat3<T> m = pc.rotation * pc.scale.asDiagonal();
    const Mat3<T> cov3d = m * m.transpose();

    auto& pg = out.per_gaussian[i];
    pg = project(g.mu, cov3d, cam, rs);
    pc.p_cam = cam.to_camera(g.mu);
    if (!pg.visible) continue;
    pc.cov_cam = cam.rotation * cov3d * cam.rotation.transpose();
    pc.jacobian = detail::projection_jacobian(pc.p_cam, cam);
    pc.conic = pg.cov2d.inverse();
    pc.alpha = sigmoid(g.opacity_logit);

    // 3-sigma box, shrunk to the ellipse outside of which the opacity is below
    // the cutoff anyway; both give the same image.
    if (!(pc.alpha >= rs.min_alpha)) {
      pg.visible = false;
      continue;
    }
    const T sigmas = std::min(rs.extent_sigmas, std::sqrt(T(2) * std::log(pc.alpha / rs.min_alpha)) + T(1e-3));
    const T rx = sigmas * std::sqrt(pg.cov2d(0, 0));
    const T ry = sigmas * std::sqrt(pg.cov2d(1, 1));
    const T fx0 = std::ceil(pg.mean2d[0] - rx), fx1 = std::floor(pg.mean2d[0] + rx);
    const T fy0 = std::ceil(pg.mean2d[1] - ry), fy1 = std::floor(pg.mean2d[1] + ry);
    if (fx1 < 0 || fy1 < 0 || fx0 > width - 1 || fy0 > height - 1) {
      pg.visible = false;
      continue;
    }
    pc.x0 = static_cast<int>(std::max<T>(fx0, 0));
    pc.x1 = static_cast<int>(std::min<T>(fx1, width - 1));
    pc.y0 = static_cast<int>(std::max<T>(fy0, 0));
    pc.y1 = static_cast<int>(std::min<T>(fy1, height - 1));
    out.visible[i] = 1;
  }

  std::vector<std::uint32_t> order;
  for (std::size_t i = 0; i < n; ++i)
    if (out.visible[i]) order.push_back(static_cast<std::uint32_t>(i));
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const T da = out.per_gaussian[a].depth, db = out.per_gaussian[b].depth;
    return da < db || (da == db && a < b);
  });

  const int bands = (height + kBandRows - 1) / kBandRows;
  struct BandResult {
    std::vector<std::size_t> counts;
    std::vector<Fragment<T>> fragments;
  };
  std::vector<BandResult> results(bands);
  out.final_transmittance.assign(static_cast<std::size_t>(width) * height, T(1));

  parallel_for(bands, rs.threads, [&](int band) {
    const int y_begin = band * kBandRows, y_end = std::min(height, y_begin + kBandRows);
    std::vector<detail::Splat<T>> band_splats;
    for (std::uint32_t i : order) {
      const auto& pc = out.cache[i];
      if (pc.y1 >= y_begin && pc.y0 < y_end) {
        const auto& mean = out.per_gaussian[i].mean2d;
        // Below this exponent the opacity cannot reach the cutoff.
        const T min_power = std::log(rs.min_alpha / pc.alpha) - T(1e-3);
        band_splats.push_back({i, mean[0], mean[1], pc.conic(0, 0), pc.conic(0, 1), pc.conic(1, 1), pc.alpha,
                               min_power, scene.gaussians[i].color, pc.x0, pc.x1, pc.y0, pc.y1});
      }
    }
    auto& res = results[band];
    const std::size_t band_pixels = static_cast<std::size_t>(y_end - y_begin) * width;
    res.counts.assign(band_pixels, 0);
    std::vector<std::size_t> starts(band_pixels, 0);
    std::vector<Fragment<T>> scratch;
    scratch.reserve(band_pixels * 16);
    std::vector<const detail::Splat<T>*> block;
    for (int bx = 0; bx < width; bx += kBlockCols) {
      const int x_end = std::min(width, bx + kBlockCols);
      block.clear();
      for (const auto& sp : band_splats)
        if (sp.x1 >= bx && sp.x0 < x_end) block.push_back(&sp);
      for (int y = y_begin; y < y_end; ++y) {
        for (int x = bx; x < x_end; ++x) {
          const std::size_t local = static_cast<std::size_t>(y - y_begin) * width + x;
          starts[local] = scratch.size();
          Vec3<T> color = Vec3<T>::Zero();
          T trans = 1;
          for (const detail::Splat<T>* sp : block) {
            if (x < sp->x0 || x > sp->x1 || y < sp->y0 || y > sp->y1) continue;
            const T dx = T(x) - sp->mx, dy = T(y) - sp->my;
            const T power = T(-0.5) * (sp->ca * dx * dx + T(2) * sp->cb * dx * dy + sp->cc * dy * dy);
            if (power < sp->min_power) continue;
            const T raw = sp->alpha * std::exp(power);
            const bool clamped = raw > rs.alpha_clamp;
            const T a = clamped ? rs.alpha_clamp : raw;
            if (a < rs.min_alpha) continue;
            const T next = trans * (T(1) - a);
            if (next < rs.min_transmittance) break;
            color += sp->color * (a * trans);
            scratch.push_back({sp->index, a, trans, clamped});
            trans = next;
          }
          color += scene.background * trans;
          for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = color[c];
          out.final_transmittance[static_cast<std::size_t>(y) * width + x] = trans;
          res.counts[local] = scratch.size() - starts[local];
        }
      }
    }
    // Re-pack from block order into row-major pixel order.
    res.fragments.reserve(scratch.size());
    for (std::size_t p = 0; p < band_pixels; ++p)
      res.fragments.insert(res.fragments.end(), scratch.begin() + starts[p], scratch.begin() + starts[p] + res.counts[p]);
  });

  out.pixel_offsets.reserve(static_cast<std::size_t>(width) * height + 1);
  out.pixel_offsets.push_back(0);
  std::size_t total = 0;
  for (const auto& r : results) total += r.fragments.size();
  out.fragments.reserve(total);
  for (auto& r : results) {
    for (std::size_t c : r.counts) out.pixel_offsets.push_back(out.pixel_offsets.back() + c);
    out.fragments.insert(out.fragments.end(), r.fragments.begin(), r.fragments.end());
  }
  return out;
}

namespace detail {

// Screen-space gradients gathered per Gaussian before chaining to parameters.
template <typename T>
struct ScreenGrad {
  Vec2<T> mean2d = Vec2<T>::Zero();
  Mat2<T> conic = Mat2<T>::Zero();  // full symmetric gradient
  T alpha = 0;
  Vec3<T> color = Vec3<T>::Zero();

  ScreenGrad& operator+=(const ScreenGrad& o) {
    mean2d += o.mean2d;
    conic += o.conic;
    alpha += o.alpha;
    color += o.color;
    return *this;
  }
};

// d R(q) / d q contracted with dL/dR, for a unit quaternion (w, x, y, z).
template <typename T>
Vec4<T> rotation_grad_to_quat(const Vec4<T>& q, const Mat3<T>& dr) {
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  Vec4<T> g;
  g[0] = 2 * (-z * dr(0, 1) + y * dr(0, 2) + z * dr(1, 0) - x * dr(1, 2) - y * dr(2, 0) + x * dr(2, 1));
  g[1] = 2 * (y * dr(0, 1) + z * dr(0, 2) + y * dr(1, 0) - 2 * x * dr(1, 1) - w * dr(1, 2) + z * dr(2, 0) +
              w * dr(2, 1) - 2 * x * dr(2, 2));
  g[2] = 2 * (-2 * y * dr(0, 0) + x * dr(0, 1) + w * dr(0, 2) + x * dr(1, 0) + z * dr(1, 2) - w * dr(2, 0) +
              z * dr(2, 1) - 2 * y * dr(2, 2));
  g[3] = 2 * (-2 * z * dr(0, 0) - w * dr(0, 1) + x * dr(0, 2) + w * dr(1, 0) - 2 * z * dr(1, 1) + y * dr(1, 2) +
              x * dr(2, 0) + y * dr(2, 1));
  return g;
}

}  // namespace detail

// Adjoint of render(): given dL/dimage, returns dL/dparameter for every
// Gaussian. `output` must come from render() on the same scene and camera.
template <typename T>
GradBuffer<T> render_backward(const SceneModel<T>& scene, const Camera<T>& cam, const RenderOutput<T>& output,
                              const Image<T>& dl_dimage, const RenderSettings<T>& rs = {}) {
  const std::size_t n = scene.size();
  const int width = cam.width, height = cam.height;
  if (dl_dimage.width != width || dl_dimage.height != height || output.image.width != width ||
      output.image.height != height || output.cache.size() != n || output.visible.size() != n) {
    throw ValidationError("render_backward: shape mismatch between scene, camera, render output and gradient");
  }

  const int bands = (height + kBandRows - 1) / kBandRows;
  std::vector<std::vector<detail::ScreenGrad<T>>> band_grads(bands);

  parallel_for(bands, rs.threads, [&](int band) {
    auto& acc = band_grads[band];
    acc.assign(n, detail::ScreenGrad<T>{});
    const int y_begin = band * kBandRows, y_end = std::min(height, y_begin + kBandRows);
    for (int y = y_begin; y < y_end; ++y) {
      for (int x = 0; x < width; ++x) {
        const Vec3<T> dl_dc(dl_dimage.at(x, y, 0), dl_dimage.at(x, y, 1), dl_dimage.at(x, y, 2));
        const auto frags = output.pixel_fragments(x, y);
        // Colour contributed by everything behind the current fragment.
        Vec3<T> behind = scene.background * output.final_transmittance[static_cast<std::size_t>(y) * width + x];
        for (std::size_t k = frags.size(); k-- > 0;) {
          const auto& f = frags[k];
          const auto& g = scene.gaussians[f.gaussian];
          auto& sg = acc[f.gaussian];
          const T w = f.alpha * f.transmittance;
          sg.color += dl_dc * w;
          const Vec3<T> dc_dalpha = g.color * f.transmittance - behind / (T(1) - f.alpha);
          behind += g.color * w;
          if (f.clamped) continue;
          const T dl_da = dl_dc.dot(dc_dalpha);
          const auto& pc = output.cache[f.gaussian];
          const T gauss = f.alpha / pc.alpha;
          sg.alpha += dl_da * gauss;
          const T dl_dpower = dl_da * f.alpha;
          const Vec2<T> d = Vec2<T>(T(x), T(y)) - output.per_gaussian[f.gaussian].mean2d;
          sg.mean2d += dl_dpower * (pc.conic * d);
          sg.conic += (T(-0.5) * dl_dpower) * (d * d.transpose());
        }
      }
    }
  });

  GradBuffer<T> grads(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!output.visible[i]) continue;
    detail::ScreenGrad<T> sg;
    for (const auto& b : band_grads) sg += b[i];
    grads.visible[i] = 1;

    const auto& pc = output.cache[i];
    const auto& g = scene.gaussians[i];
    grads.pos_grad_norm2d[i] = sg.mean2d.norm();

    const Mat2<T> dcov2d = -pc.conic * sg.conic * pc.conic;
    const auto& j = pc.jacobian;
    const Mat3<T> dcov_cam = j.transpose() * dcov2d * j;
    const Eigen::Matrix<T, 2, 3> dj = T(2) * dcov2d * j * pc.cov_cam;
    const Mat3<T> dcov3d = cam.rotation.transpose() * dcov_cam * cam.rotation;
    const Mat3<T> m = pc.rotation * pc.scale.asDiagonal();
    const Mat3<T> dm = T(2) * dcov3d * m;
    const Mat3<T> dr = dm * pc.scale.asDiagonal();
    Vec3<T> dscale;
    for (int k = 0; k < 3; ++k) dscale[k] = dm.col(k).dot(pc.rotation.col(k));
    const Vec3<T> dlog_scale = dscale.cwiseProduct(pc.scale);
    const Vec4<T> dq = detail::rotation_grad_to_quat(pc.quat, dr);
    const Vec4<T> dq_raw = (dq - pc.quat * pc.quat.dot(dq)) / g.rot.norm();

    const T px = pc.p_cam[0], py = pc.p_cam[1], pz = pc.p_cam[2];
    const T fx = cam.focal[0], fy = cam.focal[1];
    const T iz = T(1) / pz, iz2 = iz * iz, iz3 = iz2 * iz;
    Vec3<T> dp;
    dp[0] = sg.mean2d[0] * fx * iz + dj(0, 2) * (-fx * iz2);
    dp[1] = sg.mean2d[1] * fy * iz + dj(1, 2) * (-fy * iz2);
    dp[2] = -sg.mean2d[0] * fx * px * iz2 - sg.mean2d[1] * fy * py * iz2 - dj(0, 0) * fx * iz2 +
            dj(0, 2) * T(2) * fx * px * iz3 - dj(1, 1) * fy * iz2 + dj(1, 2) * T(2) * fy * py * iz3;
    const Vec3<T> dmu = cam.rotation.transpose() * dp;

    auto& out = grads.params[i];
    for (int k = 0; k < 3; ++k) {
      out[k] = dmu[k];
      out[7 + k] = dlog_scale[k];
      out[11 + k] = sg.color[k];
    }
    for (int k = 0; k < 4; ++k) out[3 + k] = dq_raw[k];
    out[10] = sg.alpha * pc.alpha * (T(1) - pc.alpha);
  }
  return grads;
}

}  // namespace skipgs
