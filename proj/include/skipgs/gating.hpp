#pragma once

// View-adaptive backward gating for the post-densification phase.
//
// Every post-densification iteration runs a forward pass and reports the
// sampled view's loss to the gate. The gate keeps an exponential moving
// average of each view's loss and proposes a backward pass only when the
// current loss rises above that baseline. A warmup window forces backward
// while the averages settle and measures how often the test would have fired;
// that rate calibrates a minimum backward budget which later overrides skips
// whenever the running backward ratio falls below it.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "skipgs/error.hpp"

namespace skipgs {

struct GatingConfig {
  std::int64_t warmup_len = 150;  // forced-backward iterations after densification ends
  double ema_decay = 0.95;
  double eps = 1e-8;
  double budget_floor = 0.5;  // lower bound of the calibrated budget
  bool budget_enabled = true;

  void validate() const {
    if (warmup_len < 1) throw ValidationError("gating: warmup_len must be >= 1");
    if (!(ema_decay > 0.0 && ema_decay < 1.0))
      throw ValidationError("gating: ema_decay must lie in (0, 1)");
    // eps = 0 is accepted so the pure ratio form can be exercised.
    if (!(eps >= 0.0) || !std::isfinite(eps)) throw ValidationError("gating: eps must be finite and >= 0");
    if (!(budget_floor >= 0.0 && budget_floor <= 1.0))
      throw ValidationError("gating: budget_floor must lie in [0, 1]");
  }
};

// Per-view loss EMA. A view has an entry only once it has been observed.
using ViewId = std::int64_t;

struct ViewLossTable {
  std::map<ViewId, double> ema;

  std::optional<double> get(ViewId v) const {
    auto it = ema.find(v);
    if (it == ema.end()) return std::nullopt;
    return it->second;
  }

  bool operator==(const ViewLossTable&) const = default;
};

struct GateDecision {
  double score = 0.0;  // +inf on first observation of a view
  bool proposed = false;
  bool forced_warmup = false;
  bool forced_budget = false;
  bool execute_backward = false;
  double rho_cum_before = 0.0;
};

inline void require_valid_loss(double loss) {
  if (!std::isfinite(loss) || loss < 0.0) {
    std::ostringstream os;
    os << "gating: loss must be finite and non-negative, got " << loss;
    throw ValidationError(os.str());
  }
}

// EMA recurrence. A view seen for the first time starts at its own loss.
inline double update_ema(std::optional<double> prev_ema, double loss, double decay) {
  require_valid_loss(loss);
  if (!(decay > 0.0 && decay < 1.0)) throw ValidationError("gating: decay must lie in (0, 1)");
  if (!prev_ema) return loss;
  return decay * *prev_ema + (1.0 - decay) * loss;
}

inline double deviation_score(double loss, std::optional<double> prev_ema, double eps) {
  require_valid_loss(loss);
  if (!prev_ema) return std::numeric_limits<double>::infinity();
  const double denom = *prev_ema + eps;
  // 0/0 only arises with eps = 0 and a zero baseline; a zero loss is then no deviation.
  if (denom == 0.0) return loss > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
  return loss / denom;
}

// True means "execute backward". Ties at exactly 1 skip.
inline bool skip_test(double score) { return score > 1.0; }

inline double cumulative_ratio(std::int64_t b, std::int64_t t) {
  if (t < 1) throw ValidationError("gating: t must be >= 1");
  const std::int64_t denom = t - 1 > 1 ? t - 1 : 1;
  if (b < 0 || b > denom) throw ValidationError("gating: backward count out of range");
  return static_cast<double>(b) / static_cast<double>(denom);
}

inline double calibrate_rho_min(double rho_hat, double rho_lo) {
  if (!(rho_hat >= 0.0 && rho_hat <= 1.0) || !(rho_lo >= 0.0 && rho_lo <= 1.0))
    throw ValidationError("gating: calibration inputs must lie in [0, 1]");
  return rho_lo + (1.0 - rho_lo) * rho_hat;
}

struct GatingState {
  ViewLossTable table;
  std::int64_t t = 1;  // index of the next post-densification iteration
  std::int64_t b = 0;  // executed backward passes so far
  std::optional<double> rho_min;
  std::int64_t warmup_eligible = 0;
  std::int64_t warmup_would_backward = 0;
  bool calibrated = false;

  double warmup_rate() const {
    // No eligible warmup sample: assume every view still needs backward.
    if (warmup_eligible == 0) return 1.0;
    return static_cast<double>(warmup_would_backward) / static_cast<double>(warmup_eligible);
  }

  // Fixes rho_min from the warmup statistics. Allowed exactly once.
  void calibrate(const GatingConfig& cfg) {
    if (calibrated) throw ContractViolation("gating: rho_min is already calibrated");
    rho_min = calibrate_rho_min(warmup_rate(), cfg.budget_floor);
    calibrated = true;
  }

  bool operator==(const GatingState&) const = default;
};

// Algorithm state machine: one step() per post-densification iteration.
class BackwardGate {
 public:
  explicit BackwardGate(GatingConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }
  BackwardGate(GatingConfig cfg, GatingState state) : cfg_(cfg), state_(std::move(state)) {
    cfg_.validate();
  }

  const GatingConfig& config() const { return cfg_; }
  const GatingState& state() const { return state_; }

  // Decides iteration state().t for the given view. Everything that can throw
  // runs before the state is touched, so a rejected call leaves it unchanged.
  GateDecision step(ViewId view, double loss) {
    require_valid_loss(loss);
    GatingState& s = state_;
    GateDecision d;

    auto slot = s.table.ema.find(view);
    std::optional<double> prev;
    if (slot != s.table.ema.end()) prev = slot->second;
    d.score = deviation_score(loss, prev, cfg_.eps);
    d.proposed = skip_test(d.score);
    d.rho_cum_before = cumulative_ratio(s.b, s.t);
    const double ema = update_ema(prev, loss, cfg_.ema_decay);

    bool g = d.proposed;
    if (s.t <= cfg_.warmup_len) {
      if (prev) {
        ++s.warmup_eligible;
        if (d.proposed) ++s.warmup_would_backward;
      }
      d.forced_warmup = true;
      g = true;
    } else {
      if (!s.calibrated) s.calibrate(cfg_);
      if (cfg_.budget_enabled && d.rho_cum_before < *s.rho_min) {
        d.forced_budget = true;
        g = true;
      }
    }
    d.execute_backward = g;

    if (slot == s.table.ema.end()) s.table.ema.emplace(view, ema);
    else slot->second = ema;
    if (g) ++s.b;
    ++s.t;
    return d;
  }

  // Variant that also checks the caller's iteration counter.
  GateDecision step(std::int64_t t, ViewId view, double loss) {
    if (t != state_.t) {
      std::ostringstream os;
      os << "gating: expected iteration " << state_.t << ", got " << t;
      throw ValidationError(os.str());
    }
    return step(view, loss);
  }

 private:
  GatingConfig cfg_;
  GatingState state_;
};

// JSON persistence. Doubles are written with full round-trip precision by nlohmann::json.

inline void to_json(nlohmann::json& j, const GatingConfig& c) {
  j = {{"warmup_len", c.warmup_len},
       {"ema_decay", c.ema_decay},
       {"eps", c.eps},
       {"budget_floor", c.budget_floor},
       {"budget_enabled", c.budget_enabled}};
}

inline void from_json(const nlohmann::json& j, GatingConfig& c) {
  c.warmup_len = j.value("warmup_len", c.warmup_len);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.eps = j.value("eps", c.eps);
  c.budget_floor = j.value("budget_floor", c.budget_floor);
  c.budget_enabled = j.value("budget_enabled", c.budget_enabled);
}

inline void to_json(nlohmann::json& j, const GatingState& s) {
  nlohmann::json ema = nlohmann::json::array();
  for (const auto& [view, value] : s.table.ema) ema.push_back({{"view", view}, {"ema", value}});
  j = {{"ema", ema},
       {"t", s.t},
       {"b", s.b},
       {"rho_min", s.rho_min ? nlohmann::json(*s.rho_min) : nlohmann::json(nullptr)},
       {"warmup_eligible", s.warmup_eligible},
       {"warmup_would_backward", s.warmup_would_backward},
       {"calibrated", s.calibrated}};
}

inline void from_json(const nlohmann::json& j, GatingState& s) {
  s = GatingState{};
  for (const auto& e : j.at("ema")) s.table.ema[e.at("view").get<ViewId>()] = e.at("ema").get<double>();
  s.t = j.at("t").get<std::int64_t>();
  s.b = j.at("b").get<std::int64_t>();
  if (!j.at("rho_min").is_null()) s.rho_min = j.at("rho_min").get<double>();
  s.warmup_eligible = j.at("warmup_eligible").get<std::int64_t>();
  s.warmup_would_backward = j.at("warmup_would_backward").get<std::int64_t>();
  s.calibrated = j.at("calibrated").get<bool>();
  if (s.t < 1 || s.b < 0 || s.b > (s.t > 1 ? s.t - 1 : 1) || s.warmup_would_backward > s.warmup_eligible ||
      s.calibrated != s.rho_min.has_value())
    throw ValidationError("gating: inconsistent serialized state");
}

inline nlohmann::json gate_to_json(const BackwardGate& gate) {
  return {{"config", gate.config()}, {"state", gate.state()}};
}

inline BackwardGate gate_from_json(const nlohmann::json& j) {
  return BackwardGate(j.at("config").get<GatingConfig>(), j.at("state").get<GatingState>());
}

}  // namespace skipgs
