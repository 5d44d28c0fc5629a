#pragma once

// Photometric training loss (weighted L1 + D-SSIM) with analytic image
// gradients, and PSNR for evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include "skipgs/error.hpp"
#include "skipgs/image.hpp"

namespace skipgs {

struct LossConfig {
  double lambda = 0.2;
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("loss: lambda must lie in [0, 1]");
    if (ssim_window < 1 || ssim_window % 2 == 0) throw ValidationError("loss: ssim_window must be a positive odd integer");
    if (!(ssim_sigma > 0.0)) throw ValidationError("loss: ssim_sigma must be positive");
  }
};

template <typename T>
struct LossResult {
  T value = 0;
  Image<T> grad;
};

template <typename T>
LossResult<T> l1_loss(const Image<T>& pred, const Image<T>& target) {
  require_same_shape(pred, target, "l1_loss");
  LossResult<T> r;
  r.grad = Image<T>(pred.width, pred.height);
  const T inv = T(1) / static_cast<T>(pred.size());
  T sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred.data[i] - target.data[i];
    sum += std::abs(d);
    r.grad.data[i] = d > 0 ? inv : (d < 0 ? -inv : T(0));
  }
  r.value = sum * inv;
  return r;
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(size);
  const int r = size / 2;
  double total = 0;
  for (int i = 0; i < size; ++i) {
    w[i] = std::exp(-double((i - r) * (i - r)) / (2 * sigma * sigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// Mirror index without repeating the edge sample: -1 -> 1, n -> n-2.
inline int reflect_index(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

// Single-channel plane filtered with a separable kernel under reflect padding.
template <typename T>
struct PlaneFilter {
  int width, height;
  std::vector<T> kernel;

  std::vector<T> apply(const std::vector<T>& in) const {
    const int r = static_cast<int>(kernel.size()) / 2;
    std::vector<T> tmp(in.size()), out(in.size()), line(std::max(width, height) + 2 * r);
    for (int y = 0; y < height; ++y) {
      for (int i = -r; i < width + r; ++i) line[i + r] = in[y * width + reflect_index(i, width)];
      for (int x = 0; x < width; ++x) {
        T s = 0;
        for (int k = 0; k <= 2 * r; ++k) s += kernel[k] * line[x + k];
        tmp[y * width + x] = s;
      }
    }
    for (int x = 0; x < width; ++x) {
      for (int i = -r; i < height + r; ++i) line[i + r] = tmp[reflect_index(i, height) * width + x];
      for (int y = 0; y < height; ++y) {
        T s = 0;
        for (int k = 0; k <= 2 * r; ++k) s += kernel[k] * line[y + k];
        out[y * width + x] = s;
      }
    }
    return out;
  }

  // Transpose of apply().
  std::vector<T> adjoint(const std::vector<T>& g) const {
    const int r = static_cast<int>(kernel.size()) / 2;
    std::vector<T> tmp(g.size()), out(g.size()), line(std::max(width, height) + 2 * r);
    for (int x = 0; x < width; ++x) {
      std::fill(line.begin(), line.end(), T(0));
      for (int y = 0; y < height; ++y) {
        const T v = g[y * width + x];
        for (int k = 0; k <= 2 * r; ++k) line[y + k] += kernel[k] * v;
      }
      for (int y = 0; y < height; ++y) tmp[y * width + x] = line[y + r];
      for (int i = 1; i <= r; ++i) {
        tmp[reflect_index(-i, height) * width + x] += line[r - i];
        tmp[reflect_index(height - 1 + i, height) * width + x] += line[height - 1 + i + r];
      }
    }
    for (int y = 0; y < height; ++y) {
      std::fill(line.begin(), line.end(), T(0));
      for (int x = 0; x < width; ++x) {
        const T v = tmp[y * width + x];
        for (int k = 0; k <= 2 * r; ++k) line[x + k] += kernel[k] * v;
      }
      for (int x = 0; x < width; ++x) out[y * width + x] = line[x + r];
      for (int i = 1; i <= r; ++i) {
        out[y * width + reflect_index(-i, width)] += line[r - i];
        out[y * width + reflect_index(width - 1 + i, width)] += line[width - 1 + i + r];
      }
    }
    return out;
  }
};

}  // namespace detail

// Forward statistics of SSIM kept for the gradient pass.
template <typename T>
struct SsimTape {
  detail::PlaneFilter<T> filter{0, 0, {}};
  T c1 = 0, c2 = 0;
  // Per channel: filtered x, y, x^2, y^2, xy.
  std::array<std::vector<T>, 3> mu_x, mu_y, e_xx, e_yy, e_xy;
  T value = 0;
};

template <typename T>
SsimTape<T> ssim_forward(const Image<T>& pred, const Image<T>& target, const LossConfig& cfg = {}) {
  require_same_shape(pred, target, "ssim");
  cfg.validate();
  const int w = pred.width, h = pred.height;
  if (w < cfg.ssim_window || h < cfg.ssim_window)
    throw ValidationError("ssim: image is smaller than the SSIM window");

  SsimTape<T> tape;
  tape.filter = detail::PlaneFilter<T>{w, h, {}};
  for (double v : detail::gaussian_window(cfg.ssim_window, cfg.ssim_sigma)) tape.filter.kernel.push_back(static_cast<T>(v));
  tape.c1 = static_cast<T>(cfg.c1);
  tape.c2 = static_cast<T>(cfg.c2);
  const std::size_t np = static_cast<std::size_t>(w) * h;
  std::vector<T> x(np), y(np), xx(np), yy(np), xy(np);
  T total = 0;
  for (int c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < np; ++p) {
      x[p] = pred.data[p * 3 + c];
      y[p] = target.data[p * 3 + c];
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    tape.mu_x[c] = tape.filter.apply(x);
    tape.mu_y[c] = tape.filter.apply(y);
    tape.e_xx[c] = tape.filter.apply(xx);
    tape.e_yy[c] = tape.filter.apply(yy);
    tape.e_xy[c] = tape.filter.apply(xy);
    for (std::size_t p = 0; p < np; ++p) {
      const T mx = tape.mu_x[c][p], my = tape.mu_y[c][p];
      const T sxx = tape.e_xx[c][p] - mx * mx, syy = tape.e_yy[c][p] - my * my, sxy = tape.e_xy[c][p] - mx * my;
      total += ((2 * mx * my + tape.c1) * (2 * sxy + tape.c2)) /
               ((mx * mx + my * my + tape.c1) * (sxx + syy + tape.c2));
    }
  }
  tape.value = total / static_cast<T>(np * 3);
  return tape;
}

// d(mean SSIM)/d(pred), scaled by `scale`.
template <typename T>
Image<T> ssim_backward(const SsimTape<T>& tape, const Image<T>& pred, const Image<T>& target, T scale = T(1)) {
  const int w = pred.width, h = pred.height;
  const std::size_t np = static_cast<std::size_t>(w) * h;
  const T norm = scale / static_cast<T>(np * 3);
  const T c1 = tape.c1, c2 = tape.c2;
  Image<T> grad(w, h);
  std::vector<T> g_mu(np), g_xx(np), g_xy(np);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < np; ++p) {
      const T mx = tape.mu_x[c][p], my = tape.mu_y[c][p];
      const T sxx = tape.e_xx[c][p] - mx * mx, syy = tape.e_yy[c][p] - my * my, sxy = tape.e_xy[c][p] - mx * my;
      const T a1 = 2 * mx * my + c1, a2 = 2 * sxy + c2;
      const T b1 = mx * mx + my * my + c1, b2 = sxx + syy + c2;
      const T s = (a1 * a2) / (b1 * b2);
      g_mu[p] = norm * ((2 * my * a2 - 2 * my * a1) / (b1 * b2) - s * (2 * mx / b1 - 2 * mx / b2));
      g_xx[p] = norm * (-s / b2);
      g_xy[p] = norm * (2 * a1 / (b1 * b2));
    }
    const auto d_mu = tape.filter.adjoint(g_mu), d_xx = tape.filter.adjoint(g_xx), d_xy = tape.filter.adjoint(g_xy);
    for (std::size_t p = 0; p < np; ++p) {
      const T xv = pred.data[p * 3 + c], yv = target.data[p * 3 + c];
      grad.data[p * 3 + c] = d_mu[p] + 2 * xv * d_xx[p] + yv * d_xy[p];
    }
  }
  return grad;
}

// Mean SSIM over pixels and channels, with its gradient wrt `pred`.
template <typename T>
LossResult<T> ssim(const Image<T>& pred, const Image<T>& target, const LossConfig& cfg = {}) {
  const auto tape = ssim_forward(pred, target, cfg);
  return {tape.value, ssim_backward(tape, pred, target)};
}

// Forward half of the photometric loss; the gradient is produced on demand so
// iterations that skip the backward pass never pay for it.
template <typename T>
class PhotometricLoss {
 public:
  PhotometricLoss(const Image<T>& pred, const Image<T>& target, const LossConfig& cfg = {})
      : pred_(&pred), target_(&target), lambda_(static_cast<T>(cfg.lambda)) {
    cfg.validate();
    require_same_shape(pred, target, "combined_loss");
    T sum = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) sum += std::abs(pred.data[i] - target.data[i]);
    l1_ = sum / static_cast<T>(pred.size());
    value_ = l1_;
    if (cfg.lambda != 0.0) {
      ssim_ = ssim_forward(pred, target, cfg);
      value_ = (T(1) - lambda_) * l1_ + lambda_ * (T(1) - ssim_->value);
    }
  }

  T value() const { return value_; }
  T l1() const { return l1_; }
  std::optional<T> ssim_value() const { return ssim_ ? std::optional<T>(ssim_->value) : std::nullopt; }

  Image<T> gradient() const {
    Image<T> g = l1_loss(*pred_, *target_).grad;
    if (!ssim_) return g;
    const Image<T> gs = ssim_backward(*ssim_, *pred_, *target_, -lambda_);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = (T(1) - lambda_) * g.data[i] + gs.data[i];
    return g;
  }

 private:
  const Image<T>* pred_;
  const Image<T>* target_;
  T lambda_;
  T l1_ = 0;
  T value_ = 0;
  std::optional<SsimTape<T>> ssim_;
};

// (1 - lambda) L1 + lambda (1 - SSIM).
template <typename T>
LossResult<T> combined_loss(const Image<T>& pred, const Image<T>& target, const LossConfig& cfg = {}) {
  PhotometricLoss<T> loss(pred, target, cfg);
  return {loss.value(), loss.gradient()};
}

// PSNR in dB on [0,1]-clamped images; +inf when they are identical.
template <typename T>
double psnr(const Image<T>& pred, const Image<T>& target) {
  require_same_shape(pred, target, "psnr");
  double mse = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = std::clamp(static_cast<double>(pred.data[i]), 0.0, 1.0);
    const double b = std::clamp(static_cast<double>(target.data[i]), 0.0, 1.0);
    mse += (a - b) * (a - b);
  }
  mse /= static_cast<double>(pred.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace skipgs
