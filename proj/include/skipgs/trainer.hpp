#pragma once

// Two-phase training loop. Iterations 1..T_d run the plain loop with periodic
// densification. After T_d the Gaussian set is frozen and every iteration
// still renders and scores the sampled view, but the backward pass and the
// Adam step run only when the backward gate asks for them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "skipgs/densify.hpp"
#include "skipgs/error.hpp"
#include "skipgs/gating.hpp"
#include "skipgs/image.hpp"
#include "skipgs/losses.hpp"
#include "skipgs/model.hpp"
#include "skipgs/optim.hpp"
#include "skipgs/renderer.hpp"

namespace skipgs {

struct TrainConfig {
  std::int64_t total_iters = 3000;
  std::int64_t densify_end = 1500;
  GatingConfig gating{};
  bool skipgs_enabled = true;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 200;
  int eval_view = -1;  // index into the camera list; -1 holds out the last camera
  LossConfig loss{};
  DensifyConfig densify{};
  LearningRates lrs{};
  int threads = 1;

  void validate(std::size_t num_cams) const {
    if (total_iters < 1) throw ValidationError("train: total_iters must be >= 1");
    if (!(densify_end >= 0 && densify_end < total_iters))
      throw ValidationError("train: densify_end must lie in [0, total_iters)");
    gating.validate();
    if (gating.warmup_len >= total_iters - densify_end)
      throw ValidationError("train: warmup_len must be shorter than the post-densification phase");
    if (eval_every < 1) throw ValidationError("train: eval_every must be >= 1");
    loss.validate();
    DensifyConfig d = densify;
    d.t_d = densify_end;
    d.validate();
    if (num_cams < 2) throw ValidationError("train: need at least two cameras");
    if (eval_view < -1 || eval_view >= static_cast<int>(num_cams)) throw ValidationError("train: eval_view out of range");
  }

  std::size_t eval_index(std::size_t num_cams) const {
    return eval_view < 0 ? num_cams - 1 : static_cast<std::size_t>(eval_view);
  }

  std::string arm() const {
    if (!skipgs_enabled) return "baseline";
    return gating.budget_enabled ? "skipgs" : "skipgs_no_budget";
  }
};

enum class Phase { densify, warmup, gated };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::densify: return "densify";
    case Phase::warmup: return "warmup";
    case Phase::gated: return "gated";
  }
  return "?";
}

struct IterationRecord {
  std::int64_t t = 0;
  Phase phase = Phase::densify;
  std::int64_t view_id = 0;
  double loss = 0;
  std::optional<double> score;  // gate outputs exist only after T_d
  bool proposed = false;
  bool forced_warmup = false;
  bool forced_budget = false;
  bool executed = true;
  std::optional<double> rho_cum;
  std::optional<double> rho_min;
  std::int64_t t_forward_us = 0;
  std::int64_t t_loss_us = 0;
  std::int64_t t_backward_us = 0;
  std::int64_t t_optim_us = 0;
  std::int64_t t_iter_us = 0;  // whole iteration, measured separately
  double grad_norm = 0;
  double update_norm = 0;
  std::int64_t gaussian_count = 0;

  std::int64_t component_us() const { return t_forward_us + t_loss_us + t_backward_us + t_optim_us; }
};

struct EvalPoint {
  std::int64_t t = 0;
  std::int64_t elapsed_us = 0;  // cumulative iteration time when evaluated
  double psnr = 0;
  double ssim = 0;
};

struct ViewMetrics {
  std::int64_t view_id = 0;
  double psnr = 0;
  double ssim = 0;
};

struct DensifyEvent {
  std::int64_t t = 0;
  std::size_t before = 0, after = 0, cloned = 0, split = 0, pruned = 0;
};

struct TrainReport {
  std::string arm;
  std::vector<IterationRecord> records;
  std::vector<EvalPoint> evals;
  std::vector<ViewMetrics> final_metrics;
  std::vector<DensifyEvent> densify_events;
  std::optional<double> rho_min;
  double warmup_rate = 1.0;
  std::int64_t total_iters = 0;
  std::int64_t densify_end = 0;

  // Aggregates, all recomputable from `records`.
  std::int64_t post_iterations() const { return total_iters - densify_end; }

  std::int64_t backward_count_post() const {
    return std::count_if(records.begin(), records.end(),
                         [&](const IterationRecord& r) { return r.t > densify_end && r.executed; });
  }

  double backward_ratio_post() const {
    const auto n = post_iterations();
    return n > 0 ? static_cast<double>(backward_count_post()) / static_cast<double>(n) : 1.0;
  }

  std::int64_t time_us(std::int64_t from_t, std::int64_t to_t) const {
    std::int64_t s = 0;
    for (const auto& r : records)
      if (r.t >= from_t && r.t <= to_t) s += r.t_iter_us;
    return s;
  }
  std::int64_t total_time_us() const { return time_us(1, total_iters); }
  std::int64_t densify_time_us() const { return time_us(1, densify_end); }
  std::int64_t t_post_us() const { return time_us(densify_end + 1, total_iters); }

  // T_post had every skipped backward been run at the mean executed cost.
  std::int64_t t_post_if_no_skip_us() const {
    std::int64_t executed = 0, cost = 0, skipped = 0;
    for (const auto& r : records) {
      if (r.t <= densify_end) continue;
      if (r.executed) {
        ++executed;
        cost += r.t_backward_us + r.t_optim_us;
      } else {
        ++skipped;
      }
    }
    const double mean = executed ? static_cast<double>(cost) / static_cast<double>(executed) : 0.0;
    return t_post_us() + static_cast<std::int64_t>(std::llround(mean * static_cast<double>(skipped)));
  }

  // Series divided by its value at t = T_d; empty entries where no backward ran.
  std::vector<std::optional<double>> normalized(double IterationRecord::*field) const {
    double ref = 0;
    for (const auto& r : records)
      if (r.t == densify_end && r.executed) ref = r.*field;
    std::vector<std::optional<double>> out;
    out.reserve(records.size());
    for (const auto& r : records) {
      if (!r.executed || ref == 0) out.emplace_back(std::nullopt);
      else out.emplace_back(r.*field / ref);
    }
    return out;
  }
};

// Shuffled epochs: each epoch visits every training view once.
class ViewSampler {
 public:
  ViewSampler(std::size_t num_views, std::uint64_t seed) : n_(num_views), rng_(seed) {
    if (num_views < 1) throw ValidationError("sample_view: need at least one view");
  }

  std::size_t next() {
    if (pos_ == epoch_.size()) {
      epoch_.resize(n_);
      std::iota(epoch_.begin(), epoch_.end(), std::size_t{0});
      std::shuffle(epoch_.begin(), epoch_.end(), rng_);
      pos_ = 0;
    }
    return epoch_[pos_++];
  }

 private:
  std::size_t n_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> epoch_;
  std::size_t pos_ = 0;
};

struct NormProfile {
  double grad_norm_mean = 0;
  double update_norm_mean = 0;
};

template <typename T>
NormProfile profile_norms(const GradBuffer<T>& grads, const UpdateStats& update) {
  NormProfile p;
  const std::size_t n = grads.size();
  if (n == 0) return p;
  double total = 0;
  for (const auto& g : grads.params) {
    double sq = 0;
    for (T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
    total += std::sqrt(sq);
  }
  p.grad_norm_mean = total / static_cast<double>(n);
  p.update_norm_mean = update.update_norm.empty() ? 0.0 : update.mean_update_norm;
  return p;
}

struct TrainResult {
  TrainReport report;
  SceneModel<float> scene;
  AdamState adam;
  std::optional<BackwardGate> gate;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline std::int64_t micros(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration_cast<std::chrono::microseconds>(b - a).count();
}

}  // namespace detail

inline ViewMetrics evaluate_view(const SceneModel<float>& scene, const Camera<float>& cam, const Image<float>& target,
                                 const LossConfig& loss, int threads) {
  RenderSettings<float> rs;
  rs.threads = threads;
  const Image<float> img = render(scene, cam, rs).image.clamped();
  ViewMetrics m;
  m.view_id = cam.view_id;
  m.psnr = psnr(img, target);
  m.ssim = static_cast<double>(ssim(img.cast<double>(), target.cast<double>(), loss).value);
  return m;
}

// The training loop one iteration at a time, so several runs can be advanced
// side by side (paired timing) or inspected between iterations.
class Trainer {
 public:
  Trainer(const SceneModel<float>& scene0, const std::vector<Camera<float>>& cams,
          const std::vector<Image<float>>& targets, const TrainConfig& cfg)
      : cams_(cams), targets_(targets), cfg_(cfg), sampler_(1, 0) {
    if (cams.size() != targets.size()) throw ValidationError("train: camera and target counts differ");
    cfg.validate(cams.size());
    if (scene0.size() == 0) throw ValidationError("train: initial scene is empty");
    for (std::size_t i = 0; i < cams.size(); ++i) {
      cams[i].validate();
      if (targets[i].width != cams[i].width || targets[i].height != cams[i].height)
        throw ValidationError("train: target size does not match its camera");
    }
    eval_idx_ = cfg.eval_index(cams.size());
    for (std::size_t i = 0; i < cams.size(); ++i)
      if (i != eval_idx_) train_views_.push_back(i);
    sampler_ = ViewSampler(train_views_.size(), cfg.seed);

    dcfg_ = cfg.densify;
    dcfg_.t_d = cfg.densify_end;
    dcfg_.seed = cfg.seed;
    rs_.threads = cfg.threads;

    res_.scene = scene0;
    res_.adam = AdamState(scene0.size());
    TrainReport& rep = res_.report;
    rep.arm = cfg.arm();
    rep.total_iters = cfg.total_iters;
    rep.densify_end = cfg.densify_end;
    rep.records.reserve(static_cast<std::size_t>(cfg.total_iters));
  }

  bool done() const { return t_ > cfg_.total_iters; }
  std::int64_t next_iteration() const { return t_; }
  const TrainResult& state() const { return res_; }
  const TrainConfig& config() const { return cfg_; }

  // Runs iteration next_iteration() and returns its record.
  const IterationRecord& step() {
    if (done()) throw ContractViolation("train: all iterations already ran");
    const std::int64_t t = t_;
    const auto it_start = detail::Clock::now();
    IterationRecord rec;
    rec.t = t;
    const std::size_t cam_idx = train_views_[sampler_.next()];
    const Camera<float>& cam = cams_[cam_idx];
    rec.view_id = cam.view_id;
    const LearningRates lrs = cfg_.lrs.at_iteration(t, cfg_.total_iters);

    const auto f0 = detail::Clock::now();
    const RenderOutput<float> out = render(res_.scene, cam, rs_);
    const auto f1 = detail::Clock::now();
    const PhotometricLoss<float> loss(out.image, targets_[cam_idx], cfg_.loss);
    const auto f2 = detail::Clock::now();
    rec.t_forward_us = detail::micros(f0, f1);
    rec.t_loss_us = detail::micros(f1, f2);
    rec.loss = static_cast<double>(loss.value());
    if (!std::isfinite(rec.loss)) {
      std::ostringstream os;
      os << "train: non-finite loss at iteration " << t;
      throw Error(os.str());
    }

    if (t == cfg_.densify_end + 1) res_.gate.emplace(cfg_.gating);
    if (t <= cfg_.densify_end) {
      rec.phase = Phase::densify;
      rec.executed = true;
    } else {
      // Without gating the gate still scores each view, but never decides.
      const GateDecision d = res_.gate->step(t - cfg_.densify_end, cam.view_id, rec.loss);
      rec.phase = t - cfg_.densify_end <= cfg_.gating.warmup_len ? Phase::warmup : Phase::gated;
      rec.score = d.score;
      rec.proposed = d.proposed;
      rec.rho_cum = d.rho_cum_before;
      rec.rho_min = res_.gate->state().rho_min;
      if (cfg_.skipgs_enabled) {
        rec.forced_warmup = d.forced_warmup;
        rec.forced_budget = d.forced_budget;
        rec.executed = d.execute_backward;
      } else {
        rec.executed = true;
        rec.rho_cum = cumulative_ratio(post_backward_, t - cfg_.densify_end);
      }
      if (rec.executed) ++post_backward_;
    }

    if (rec.executed) {
      const auto b0 = detail::Clock::now();
      const GradBuffer<float> grads = render_backward(res_.scene, cam, out, loss.gradient(), rs_);
      const auto b1 = detail::Clock::now();
      const UpdateStats upd = adam_step(res_.adam, res_.scene, grads, lrs);
      const NormProfile prof = profile_norms(grads, upd);
      if (t <= cfg_.densify_end) accumulate_grad_stats(grads, stats_);
      const auto b2 = detail::Clock::now();
      rec.t_backward_us = detail::micros(b0, b1);
      rec.t_optim_us = detail::micros(b1, b2);
      rec.grad_norm = prof.grad_norm_mean;
      rec.update_norm = prof.update_norm_mean;
    }

    if (dcfg_.is_event(t)) {
      const std::size_t before = res_.scene.size();
      const DensifyResult d = densify_and_prune(res_.scene, stats_, dcfg_, t);
      reshape_after_densify(res_.adam, before, d.layout);
      res_.report.densify_events.push_back({t, d.before, d.after, d.cloned, d.split, d.pruned});
    }
    rec.gaussian_count = static_cast<std::int64_t>(res_.scene.size());
    rec.t_iter_us = detail::micros(it_start, detail::Clock::now());
    elapsed_us_ += rec.t_iter_us;
    res_.report.records.push_back(rec);

    if (t % cfg_.eval_every == 0 || t == cfg_.total_iters) {
      const ViewMetrics m = evaluate_view(res_.scene, cams_[eval_idx_], targets_[eval_idx_], cfg_.loss, cfg_.threads);
      res_.report.evals.push_back({t, elapsed_us_, m.psnr, m.ssim});
    }
    ++t_;
    return res_.report.records.back();
  }

  // Final held-out metrics; call once every iteration has run.
  TrainResult finish() {
    if (!done()) throw ContractViolation("train: finish() called before the last iteration");
    TrainReport& rep = res_.report;
    rep.final_metrics.push_back(
        evaluate_view(res_.scene, cams_[eval_idx_], targets_[eval_idx_], cfg_.loss, cfg_.threads));
    if (res_.gate) {
      rep.rho_min = res_.gate->state().rho_min;
      rep.warmup_rate = res_.gate->state().warmup_rate();
    }
    return std::move(res_);
  }

 private:
  const std::vector<Camera<float>>& cams_;
  const std::vector<Image<float>>& targets_;
  TrainConfig cfg_;
  DensifyConfig dcfg_;
  RenderSettings<float> rs_;
  std::size_t eval_idx_ = 0;
  std::vector<std::size_t> train_views_;
  ViewSampler sampler_;
  GradStats stats_;
  TrainResult res_;
  std::int64_t t_ = 1;
  std::int64_t elapsed_us_ = 0;
  std::int64_t post_backward_ = 0;
};

inline TrainResult train(const SceneModel<float>& scene0, const std::vector<Camera<float>>& cams,
                         const std::vector<Image<float>>& targets, const TrainConfig& cfg) {
  Trainer trainer(scene0, cams, targets, cfg);
  while (!trainer.done()) trainer.step();
  return trainer.finish();
}

// ---- serialization ----

namespace detail {

inline std::string fmt_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

inline nlohmann::json json_number(double v) {
  if (std::isfinite(v)) return v;
  return fmt_double(v);
}

}  // namespace detail

inline constexpr const char* kTrainLogHeader =
    "t,phase,view_id,loss,score,proposed,forced_warmup,forced_budget,executed,rho_cum,rho_min,"
    "t_forward_us,t_loss_us,t_backward_us,t_optim_us,grad_norm,update_norm,gaussian_count";

inline std::string train_log_csv(const TrainReport& rep) {
  std::ostringstream os;
  os << kTrainLogHeader << '\n';
  for (const auto& r : rep.records) {
    os << r.t << ',' << phase_name(r.phase) << ',' << r.view_id << ',' << detail::fmt_double(r.loss) << ','
       << detail::fmt_opt(r.score) << ',' << int(r.proposed) << ',' << int(r.forced_warmup) << ','
       << int(r.forced_budget) << ',' << int(r.executed) << ',' << detail::fmt_opt(r.rho_cum) << ','
       << detail::fmt_opt(r.rho_min) << ',' << r.t_forward_us << ',' << r.t_loss_us << ',' << r.t_backward_us << ','
       << r.t_optim_us << ',' << detail::fmt_double(r.grad_norm) << ',' << detail::fmt_double(r.update_norm) << ','
       << r.gaussian_count << '\n';
  }
  return os.str();
}

inline std::string densify_log_csv(const TrainReport& rep) {
  std::ostringstream os;
  os << "t,event,before,after,cloned,split,pruned\n";
  for (const auto& e : rep.densify_events)
    os << e.t << ",densify," << e.before << ',' << e.after << ',' << e.cloned << ',' << e.split << ',' << e.pruned
       << '\n';
  return os.str();
}

inline nlohmann::json report_to_json(const TrainReport& rep) {
  using nlohmann::json;
  json evals = json::array();
  for (const auto& e : rep.evals)
    evals.push_back({{"t", e.t}, {"elapsed_us", e.elapsed_us}, {"psnr", detail::json_number(e.psnr)}, {"ssim", e.ssim}});
  json metrics = json::array();
  double psnr_sum = 0, ssim_sum = 0;
  for (const auto& m : rep.final_metrics) {
    metrics.push_back({{"view_id", m.view_id}, {"psnr", detail::json_number(m.psnr)}, {"ssim", m.ssim}});
    psnr_sum += m.psnr;
    ssim_sum += m.ssim;
  }
  const double nm = rep.final_metrics.empty() ? 1.0 : static_cast<double>(rep.final_metrics.size());
  json events = json::array();
  for (const auto& e : rep.densify_events)
    events.push_back({{"t", e.t}, {"before", e.before}, {"after", e.after}, {"cloned", e.cloned}, {"split", e.split},
                      {"pruned", e.pruned}});
  auto series = [](const std::vector<std::optional<double>>& v) {
    json a = json::array();
    for (const auto& x : v) a.push_back(x ? json(*x) : json(nullptr));
    return a;
  };
  std::int64_t sum_components = 0, sum_iter = 0;
  for (const auto& r : rep.records) {
    sum_components += r.component_us();
    sum_iter += r.t_iter_us;
  }
  return {
      {"arm", rep.arm},
      {"total_iters", rep.total_iters},
      {"densify_end", rep.densify_end},
      {"final_metrics", metrics},
      {"psnr", detail::json_number(psnr_sum / nm)},
      {"ssim", ssim_sum / nm},
      {"backward_count_post", rep.backward_count_post()},
      {"backward_ratio_post", rep.backward_ratio_post()},
      {"skipped_post", rep.post_iterations() - rep.backward_count_post()},
      {"rho_min", rep.rho_min ? json(*rep.rho_min) : json(nullptr)},
      {"warmup_rate", rep.warmup_rate},
      {"total_time_us", rep.total_time_us()},
      {"densify_time_us", rep.densify_time_us()},
      {"t_post_us", rep.t_post_us()},
      {"t_post_if_no_skip_us", rep.t_post_if_no_skip_us()},
      {"component_time_us", sum_components},
      {"final_gaussian_count", rep.records.empty() ? 0 : rep.records.back().gaussian_count},
      {"evals", evals},
      {"densify_events", events},
      {"grad_norm_normalized", series(rep.normalized(&IterationRecord::grad_norm))},
      {"update_norm_normalized", series(rep.normalized(&IterationRecord::update_norm))},
  };
}

inline nlohmann::json checkpoint_to_json(const TrainResult& r, std::int64_t iteration) {
  nlohmann::json gs = nlohmann::json::array();
  for (const auto& g : r.scene.gaussians) gs.push_back(g.to_params());
  nlohmann::json j = {{"iteration", iteration},
                      {"gaussians", gs},
                      {"background", {r.scene.background[0], r.scene.background[1], r.scene.background[2]}},
                      {"adam", r.adam}};
  if (r.gate) j["gate"] = gate_to_json(*r.gate);
  return j;
}

struct Checkpoint {
  std::int64_t iteration = 0;
  SceneModel<float> scene;
  AdamState adam;
  std::optional<BackwardGate> gate;
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint c;
  c.iteration = j.at("iteration").get<std::int64_t>();
  for (const auto& p : j.at("gaussians")) c.scene.gaussians.push_back(Gaussian3D<float>::from_params(p.get<ParamVector<float>>()));
  const auto bg = j.at("background").get<std::array<float, 3>>();
  c.scene.background = Vec3<float>(bg[0], bg[1], bg[2]);
  c.adam = j.at("adam").get<AdamState>();
  if (c.adam.size() != c.scene.size()) throw ValidationError("checkpoint: optimizer state does not match the scene");
  if (j.contains("gate")) c.gate = gate_from_json(j.at("gate"));
  return c;
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"total_iters", c.total_iters}, {"densify_end", c.densify_end}, {"gating", c.gating},
       {"skipgs_enabled", c.skipgs_enabled}, {"seed", c.seed},       {"eval_every", c.eval_every},
       {"eval_view", c.eval_view},     {"loss", {{"lambda", c.loss.lambda}, {"ssim_window", c.loss.ssim_window},
                                                 {"ssim_sigma", c.loss.ssim_sigma}, {"c1", c.loss.c1}, {"c2", c.loss.c2}}},
       {"densify", c.densify},         {"lrs", c.lrs}, {"threads", c.threads}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.total_iters = j.value("total_iters", c.total_iters);
  c.densify_end = j.value("densify_end", c.densify_end);
  if (j.contains("gating")) c.gating = j.at("gating").get<GatingConfig>();
  c.skipgs_enabled = j.value("skipgs_enabled", c.skipgs_enabled);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_view = j.value("eval_view", c.eval_view);
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    c.loss.lambda = l.value("lambda", c.loss.lambda);
    c.loss.ssim_window = l.value("ssim_window", c.loss.ssim_window);
    c.loss.ssim_sigma = l.value("ssim_sigma", c.loss.ssim_sigma);
    c.loss.c1 = l.value("c1", c.loss.c1);
    c.loss.c2 = l.value("c2", c.loss.c2);
  }
  if (j.contains("densify")) c.densify = j.at("densify").get<DensifyConfig>();
  if (j.contains("lrs")) c.lrs = j.at("lrs").get<LearningRates>();
  c.threads = j.value("threads", c.threads);
}

}  // namespace skipgs
