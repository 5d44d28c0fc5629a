#pragma once

// Adaptive density control for the first training phase: clone small Gaussians
// and split large ones that carry a high screen-space positional gradient,
// prune nearly transparent ones.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "skipgs/error.hpp"
#include "skipgs/model.hpp"
#include "skipgs/optim.hpp"

namespace skipgs {

struct DensifyConfig {
  std::int64_t interval = 100;
  double grad_threshold = 2e-4;
  double size_threshold = 0.01;  // fraction of scene extent separating clone from split
  double split_factor = 1.6;
  double opacity_prune_eps = 0.005;
  std::int64_t t_d = 1500;
  double scene_extent = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (interval < 1) throw ValidationError("densify: interval must be >= 1");
    if (!(grad_threshold > 0 && size_threshold > 0 && opacity_prune_eps > 0 && scene_extent > 0))
      throw ValidationError("densify: thresholds and extent must be positive");
    if (!(split_factor > 1)) throw ValidationError("densify: split_factor must exceed 1");
    if (t_d < 0) throw ValidationError("densify: t_d must be non-negative");
  }

  bool is_event(std::int64_t t) const { return t > 0 && t <= t_d && t % interval == 0; }
};

// Running mean of the per-Gaussian screen-space gradient norm since the last event.
struct GradStats {
  std::vector<double> sum;
  std::vector<std::int64_t> count;

  bool empty() const { return sum.empty(); }
  double mean(std::size_t i) const { return count[i] ? sum[i] / static_cast<double>(count[i]) : 0.0; }
  void reset() {
    sum.clear();
    count.clear();
  }
};

// Only Gaussians that were visible in the render contribute a sample.
template <typename T>
void accumulate_grad_stats(const GradBuffer<T>& buffer, GradStats& stats) {
  if (stats.empty()) {
    stats.sum.assign(buffer.size(), 0.0);
    stats.count.assign(buffer.size(), 0);
  }
  if (stats.sum.size() != buffer.size()) throw ValidationError("accumulate_grad_stats: Gaussian count changed between events");
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    if (!buffer.visible[i]) continue;
    stats.sum[i] += static_cast<double>(buffer.pos_grad_norm2d[i]);
    ++stats.count[i];
  }
}

struct DensifyResult {
  std::size_t before = 0;
  std::size_t after = 0;
  std::size_t cloned = 0;
  std::size_t split = 0;
  std::size_t pruned = 0;
  DensifyLayout layout;  // source index of each new Gaussian, empty for new ones
};

inline DensifyResult densify_and_prune(SceneModel<float>& scene, GradStats& stats, const DensifyConfig& cfg,
                                       std::int64_t t) {
  cfg.validate();
  if (t > cfg.t_d) {
    std::ostringstream os;
    os << "densify: called at iteration " << t << " after densification ended at " << cfg.t_d;
    throw ContractViolation(os.str());
  }
  const std::size_t n = scene.size();
  if (!stats.empty() && stats.sum.size() != n) throw ValidationError("densify: gradient statistics do not match the scene");

  DensifyResult res;
  res.before = n;
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(t));
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const float split_limit = static_cast<float>(cfg.size_threshold * cfg.scene_extent);
  const float log_shrink = static_cast<float>(std::log(cfg.split_factor));

  std::vector<Gaussian3D<float>> kept, added;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = scene.gaussians[i];
    if (sigmoid(g.opacity_logit) < static_cast<float>(cfg.opacity_prune_eps)) {
      ++res.pruned;
      continue;
    }
    const bool hot = !stats.empty() && stats.mean(i) > cfg.grad_threshold;
    const float max_scale = std::exp(g.log_scale.maxCoeff());
    if (hot && max_scale > split_limit) {
      const Mat3<float> r = quat_to_rotation(normalize_quat(g.rot));
      const Vec3<float> s = g.log_scale.array().exp().matrix();
      for (int child = 0; child < 2; ++child) {
        Gaussian3D<float> c = g;
        const Vec3<float> z(normal(rng), normal(rng), normal(rng));
        c.mu = g.mu + r * s.cwiseProduct(z);
        c.log_scale = g.log_scale.array() - log_shrink;
        added.push_back(c);
      }
      ++res.split;
      continue;
    }
    kept.push_back(g);
    res.layout.emplace_back(i);
    if (hot) {
      added.push_back(g);
      ++res.cloned;
    }
  }
  if (kept.empty() && added.empty()) throw Error("densify: pruning would remove every Gaussian");
  for (auto& g : added) {
    kept.push_back(g);
    res.layout.emplace_back(std::nullopt);
  }
  scene.gaussians = std::move(kept);
  res.after = scene.size();
  stats.reset();
  return res;
}

inline void to_json(nlohmann::json& j, const DensifyConfig& c) {
  j = {{"interval", c.interval},         {"grad_threshold", c.grad_threshold},
       {"size_threshold", c.size_threshold}, {"split_factor", c.split_factor},
       {"opacity_prune_eps", c.opacity_prune_eps}, {"t_d", c.t_d},
       {"scene_extent", c.scene_extent}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, DensifyConfig& c) {
  c.interval = j.value("interval", c.interval);
  c.grad_threshold = j.value("grad_threshold", c.grad_threshold);
  c.size_threshold = j.value("size_threshold", c.size_threshold);
  c.split_factor = j.value("split_factor", c.split_factor);
  c.opacity_prune_eps = j.value("opacity_prune_eps", c.opacity_prune_eps);
  c.t_d = j.value("t_d", c.t_d);
  c.scene_extent = j.value("scene_extent", c.scene_extent);
  c.seed = j.value("seed", c.seed);
}

}  // namespace skipgs
