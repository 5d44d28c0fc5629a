#pragma once

// Learnable Gaussian primitives, the scene that holds them, and pinhole cameras.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "skipgs/error.hpp"

namespace skipgs {

template <typename T>
using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T>
using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T>
using Vec4 = Eigen::Matrix<T, 4, 1>;
template <typename T>
using Mat2 = Eigen::Matrix<T, 2, 2>;
template <typename T>
using Mat3 = Eigen::Matrix<T, 3, 3>;

// Flat parameter layout shared by the optimizer, gradient buffers and checkpoints.
inline constexpr std::size_t kParamsPerGaussian = 14;

enum class ParamGroup { position, rotation, scale, opacity, color };
inline constexpr std::array<ParamGroup, 5> kParamGroups = {ParamGroup::position, ParamGroup::rotation,
                                                           ParamGroup::scale, ParamGroup::opacity,
                                                           ParamGroup::color};

struct GroupRange {
  std::size_t begin;
  std::size_t end;
};

constexpr GroupRange group_range(ParamGroup g) {
  switch (g) {
    case ParamGroup::position: return {0, 3};
    case ParamGroup::rotation: return {3, 7};
    case ParamGroup::scale: return {7, 10};
    case ParamGroup::opacity: return {10, 11};
    case ParamGroup::color: return {11, 14};
  }
  return {0, 0};
}

constexpr const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::position: return "position";
    case ParamGroup::rotation: return "rotation";
    case ParamGroup::scale: return "scale";
    case ParamGroup::opacity: return "opacity";
    case ParamGroup::color: return "color";
  }
  return "?";
}

template <typename T>
using ParamVector = std::array<T, kParamsPerGaussian>;

template <typename T>
struct Gaussian3D {
  Vec3<T> mu = Vec3<T>::Zero();
  Vec4<T> rot = Vec4<T>(1, 0, 0, 0);  // (w, x, y, z), renormalized before use
  Vec3<T> log_scale = Vec3<T>::Zero();
  T opacity_logit = 0;
  Vec3<T> color = Vec3<T>::Constant(T(0.5));

  ParamVector<T> to_params() const {
    return {mu[0],        mu[1],        mu[2],        rot[0],        rot[1],   rot[2],   rot[3],
            log_scale[0], log_scale[1], log_scale[2], opacity_logit, color[0], color[1], color[2]};
  }

  static Gaussian3D from_params(const ParamVector<T>& p) {
    Gaussian3D g;
    g.mu = Vec3<T>(p[0], p[1], p[2]);
    g.rot = Vec4<T>(p[3], p[4], p[5], p[6]);
    g.log_scale = Vec3<T>(p[7], p[8], p[9]);
    g.opacity_logit = p[10];
    g.color = Vec3<T>(p[11], p[12], p[13]);
    return g;
  }

  bool all_finite() const {
    for (T v : to_params())
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  Gaussian3D<U> cast() const {
    Gaussian3D<U> g;
    g.mu = mu.template cast<U>();
    g.rot = rot.template cast<U>();
    g.log_scale = log_scale.template cast<U>();
    g.opacity_logit = static_cast<U>(opacity_logit);
    g.color = color.template cast<U>();
    return g;
  }

  bool operator==(const Gaussian3D&) const = default;
};

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T logit(T p) {
  return std::log(p / (T(1) - p));
}

template <typename T>
struct SceneModel {
  std::vector<Gaussian3D<T>> gaussians;
  Vec3<T> background = Vec3<T>::Zero();

  std::size_t size() const { return gaussians.size(); }

  template <typename U>
  SceneModel<U> cast() const {
    SceneModel<U> s;
    s.gaussians.reserve(gaussians.size());
    for (const auto& g : gaussians) s.gaussians.push_back(g.template cast<U>());
    s.background = background.template cast<U>();
    return s;
  }

  bool operator==(const SceneModel&) const = default;
};

template <typename T>
struct Camera {
  Mat3<T> rotation = Mat3<T>::Identity();  // world -> camera
  Vec3<T> translation = Vec3<T>::Zero();
  Vec2<T> focal = Vec2<T>(100, 100);
  Vec2<T> principal = Vec2<T>(32, 32);
  int width = 64;
  int height = 64;
  std::int64_t view_id = 0;

  Vec3<T> to_camera(const Vec3<T>& p) const { return rotation * p + translation; }
  Vec3<T> center() const { return -rotation.transpose() * translation; }

  void validate() const {
    const T err = (rotation * rotation.transpose() - Mat3<T>::Identity()).cwiseAbs().maxCoeff();
    if (!(err <= T(1e-6) * (sizeof(T) < 8 ? T(10) : T(1))))
      throw ValidationError("camera: rotation is not orthonormal");
    if (!(focal[0] > 0 && focal[1] > 0)) throw ValidationError("camera: focal lengths must be positive");
    if (width < 4 || height < 4) throw ValidationError("camera: image must be at least 4x4");
  }

  template <typename U>
  Camera<U> cast() const {
    Camera<U> c;
    c.rotation = rotation.template cast<U>();
    c.translation = translation.template cast<U>();
    c.focal = focal.template cast<U>();
    c.principal = principal.template cast<U>();
    c.width = width;
    c.height = height;
    c.view_id = view_id;
    return c;
  }

  bool operator==(const Camera&) const = default;
};

// Camera at `eye` looking at `target`; image y grows downward, camera z forward.
template <typename T>
Camera<T> look_at(const Vec3<T>& eye, const Vec3<T>& target, const Vec3<T>& up, T focal, int width,
                  int height, std::int64_t view_id) {
  const Vec3<T> forward = (target - eye).normalized();
  Vec3<T> right = forward.cross(up);
  if (right.norm() < T(1e-9)) right = forward.cross(Vec3<T>(1, 0, 0));
  right.normalize();
  const Vec3<T> down = forward.cross(right);
  Camera<T> cam;
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = down.transpose();
  cam.rotation.row(2) = forward.transpose();
  cam.translation = -cam.rotation * eye;
  cam.focal = Vec2<T>(focal, focal);
  cam.principal = Vec2<T>(T(width) / 2, T(height) / 2);
  cam.width = width;
  cam.height = height;
  cam.view_id = view_id;
  return cam;
}

// Gradient of a scalar loss with respect to every Gaussian parameter, plus the
// per-Gaussian screen-space positional gradient magnitude used by densification.
template <typename T>
struct GradBuffer {
  std::vector<ParamVector<T>> params;
  std::vector<T> pos_grad_norm2d;
  std::vector<std::uint8_t> visible;

  GradBuffer() = default;
  explicit GradBuffer(std::size_t n) : params(n, ParamVector<T>{}), pos_grad_norm2d(n, T(0)), visible(n, 0) {}

  std::size_t size() const { return params.size(); }

  void check_congruent(std::size_t n) const {
    if (params.size() != n || pos_grad_norm2d.size() != n || visible.size() != n) {
      std::ostringstream os;
      os << "gradient buffer holds " << params.size() << " entries, scene has " << n;
      throw ValidationError(os.str());
    }
  }
};

// Rotation matrix of a unit quaternion (w, x, y, z).
template <typename T>
Mat3<T> quat_to_rotation(const Vec4<T>& q) {
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3<T> r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

template <typename T>
Vec4<T> normalize_quat(const Vec4<T>& q) {
  const T n = q.norm();
  if (!(n > T(0))) throw ValidationError("quaternion has zero length");
  return q / n;
}

// Sigma = R S S^T R^T with S = diag(exp(log_scale)).
template <typename T>
Mat3<T> covariance_3d(const Vec4<T>& rot, const Vec3<T>& log_scale) {
  const Mat3<T> r = quat_to_rotation(normalize_quat(rot));
  const Mat3<T> m = r * log_scale.array().exp().matrix().asDiagonal();
  return m * m.transpose();
}

}  // namespace skipgs
