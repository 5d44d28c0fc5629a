// Feeds a synthetic per-view loss stream through the backward gate and prints
// how many backward passes it kept.

#include <cstdio>
#include <random>

#include "skipgs/gating.hpp"

int main() {
  skipgs::GatingConfig cfg;
  cfg.warmup_len = 50;
  skipgs::BackwardGate gate(cfg);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> noise(0.0, 0.03);
  const int views = 12, steps = 1500;
  std::int64_t executed = 0, forced = 0;
  for (int t = 1; t <= steps; ++t) {
    const int view = (t - 1) % views;
    // Slowly decaying loss with multiplicative noise and the odd spike.
    double loss = 0.05 * (1.0 + 2.0 / (1.0 + 0.01 * t)) * (1.0 + noise(rng));
    if (t % 97 == 0) loss *= 1.5;
    const auto d = gate.step(view, loss);
    executed += d.execute_backward;
    forced += d.forced_budget;
  }
  const auto& s = gate.state();
  std::printf("warmup rate %.3f, rho_min %.3f\n", s.warmup_rate(), *s.rho_min);
  std::printf("executed %lld / %d backward passes (%lld forced by the budget)\n", static_cast<long long>(executed),
              steps, static_cast<long long>(forced));
  return 0;
}
