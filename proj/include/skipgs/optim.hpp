#pragma once

// Adam over Gaussian parameters with one learning rate per parameter group.
// The optimizer is only touched on iterations that execute a backward pass, so
// its step counter counts executed updates, not elapsed iterations.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "skipgs/error.hpp"
#include "skipgs/model.hpp"

namespace skipgs {

struct LearningRates {
  double position = 1.6e-4;
  double position_final = 1.6e-6;
  double rotation = 1e-3;
  double scale = 5e-3;
  double opacity = 5e-2;
  double color = 2.5e-3;

  double for_group(ParamGroup g) const {
    switch (g) {
      case ParamGroup::position: return position;
      case ParamGroup::rotation: return rotation;
      case ParamGroup::scale: return scale;
      case ParamGroup::opacity: return opacity;
      case ParamGroup::color: return color;
    }
    return 0.0;
  }

  // Log-linear decay of the position rate from `position` at iteration 0 to
  // `position_final` at `total`.
  LearningRates at_iteration(std::int64_t t, std::int64_t total) const {
    LearningRates out = *this;
    const double frac = total > 0 ? std::clamp(static_cast<double>(t) / static_cast<double>(total), 0.0, 1.0) : 0.0;
    out.position = std::exp(std::log(position) * (1.0 - frac) + std::log(position_final) * frac);
    return out;
  }
};

struct AdamState {
  std::vector<ParamVector<float>> m;
  std::vector<ParamVector<float>> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, ParamVector<float>{}), v(n, ParamVector<float>{}) {}

  std::size_t size() const { return m.size(); }
  bool operator==(const AdamState&) const = default;
};

struct UpdateStats {
  std::vector<double> update_norm;  // per Gaussian, L2 over all 14 parameters
  double mean_update_norm = 0.0;
};

// One bias-corrected Adam update. Throws before mutating anything if a
// gradient is not finite.
inline UpdateStats adam_step(AdamState& state, SceneModel<float>& scene, const GradBuffer<float>& grads,
                             const LearningRates& lrs) {
  const std::size_t n = scene.size();
  grads.check_congruent(n);
  if (state.size() != n) throw ValidationError("adam_step: optimizer state does not match the scene");
  for (std::size_t i = 0; i < n; ++i) {
    for (ParamGroup grp : kParamGroups) {
      const auto r = group_range(grp);
      for (std::size_t k = r.begin; k < r.end; ++k) {
        if (!std::isfinite(grads.params[i][k])) {
          std::ostringstream os;
          os << "adam_step: non-finite gradient in group '" << group_name(grp) << "' at Gaussian " << i
             << ", component " << (k - r.begin);
          throw ValidationError(os.str());
        }
      }
    }
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  std::array<double, kParamsPerGaussian> lr_of{};
  for (ParamGroup grp : kParamGroups) {
    const auto r = group_range(grp);
    for (std::size_t k = r.begin; k < r.end; ++k) lr_of[k] = lrs.for_group(grp);
  }

  UpdateStats stats;
  stats.update_norm.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ParamVector<float> p = scene.gaussians[i].to_params();
    auto& m = state.m[i];
    auto& v = state.v[i];
    double sq = 0.0;
    for (std::size_t k = 0; k < kParamsPerGaussian; ++k) {
      const double g = grads.params[i][k];
      const double mk = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      const double vk = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double update = lr_of[k] * (mk / bc1) / (std::sqrt(vk / bc2) + state.eps);
      const float before = p[k];
      p[k] = static_cast<float>(p[k] - update);
      const double applied = static_cast<double>(before) - static_cast<double>(p[k]);
      sq += applied * applied;
    }
    scene.gaussians[i] = Gaussian3D<float>::from_params(p);
    stats.update_norm[i] = std::sqrt(sq);
    total += stats.update_norm[i];
  }
  stats.mean_update_norm = n ? total / static_cast<double>(n) : 0.0;
  return stats;
}

// New Gaussian k inherits the moments of old Gaussian layout[k], or starts from
// zero moments when layout[k] is empty (clone and split children).
using DensifyLayout = std::vector<std::optional<std::size_t>>;

inline void reshape_after_densify(AdamState& state, std::size_t old_count, const DensifyLayout& layout) {
  if (state.size() != old_count) throw ValidationError("reshape_after_densify: optimizer state does not match old count");
  AdamState next;
  next.step = state.step;
  next.beta1 = state.beta1;
  next.beta2 = state.beta2;
  next.eps = state.eps;
  next.m.reserve(layout.size());
  next.v.reserve(layout.size());
  for (const auto& src : layout) {
    if (src) {
      if (*src >= old_count) throw ValidationError("reshape_after_densify: layout refers past the old count");
      next.m.push_back(state.m[*src]);
      next.v.push_back(state.v[*src]);
    } else {
      next.m.push_back(ParamVector<float>{});
      next.v.push_back(ParamVector<float>{});
    }
  }
  state = std::move(next);
}

inline void to_json(nlohmann::json& j, const AdamState& s) {
  j = {{"m", s.m}, {"v", s.v}, {"step", s.step}, {"beta1", s.beta1}, {"beta2", s.beta2}, {"eps", s.eps}};
}

inline void from_json(const nlohmann::json& j, AdamState& s) {
  s.m = j.at("m").get<std::vector<ParamVector<float>>>();
  s.v = j.at("v").get<std::vector<ParamVector<float>>>();
  s.step = j.at("step").get<std::int64_t>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps = j.at("eps").get<double>();
  if (s.m.size() != s.v.size()) throw ValidationError("adam state: m and v differ in length");
}

inline void to_json(nlohmann::json& j, const LearningRates& l) {
  j = {{"position", l.position}, {"position_final", l.position_final}, {"rotation", l.rotation},
       {"scale", l.scale},       {"opacity", l.opacity},               {"color", l.color}};
}

inline void from_json(const nlohmann::json& j, LearningRates& l) {
  l.position = j.value("position", l.position);
  l.position_final = j.value("position_final", l.position_final);
  l.rotation = j.value("rotation", l.rotation);
  l.scale = j.value("scale", l.scale);
  l.opacity = j.value("opacity", l.opacity);
  l.color = j.value("color", l.color);
}

}  // namespace skipgs
