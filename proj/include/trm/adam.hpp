#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "trm/common.hpp"
#include "trm/tensor.hpp"

namespace trm {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moment buffers keyed by parameter slot index. Slots for non-trainable
// parameters stay empty: frozen tensors accumulate no state at all.
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return step_; }

  struct Moments {
    std::vector<double> m, v;
  };

  std::vector<Moments>& slots() { return slots_; }
  std::int64_t& step() { return step_; }

 private:
  AdamConfig cfg_;
  std::vector<Moments> slots_;
  std::int64_t step_ = 0;
};

// One Adam update with bias correction over an ordered parameter list.
// Gradients are read from each tensor's grad buffer. Parameters whose
// trainable flag is false are untouched.
inline void adam_step(std::vector<Tensor>& params, const std::vector<bool>& trainable,
                      AdamState& state) {
  if (params.size() != trainable.size()) {
    fail(Errc::validation, "adam_step: parameter/flag count mismatch");
  }
  auto& slots = state.slots();
  if (slots.empty()) slots.resize(params.size());
  if (slots.size() != params.size()) {
    fail(Errc::validation, "adam_step: state was created for a different parameter list");
  }
  const AdamConfig& cfg = state.config();
  const std::int64_t t = ++state.step();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable[i]) continue;
    Tensor& p = params[i];
    const std::span<const double> g = p.grad();
    for (double gv : g) {
      if (!std::isfinite(gv)) {
        fail(Errc::divergence, "adam_step: non-finite gradient in parameter slot " + std::to_string(i));
      }
    }
    auto& mom = slots[i];
    if (mom.m.empty()) {
      mom.m.assign(g.size(), 0.0);
      mom.v.assign(g.size(), 0.0);
    } else if (mom.m.size() != g.size()) {
      fail(Errc::validation, "adam_step: moment buffer shape drifted for slot " + std::to_string(i));
    }
    std::span<double> pd = p.data();
    for (std::size_t k = 0; k < g.size(); ++k) {
      mom.m[k] = cfg.beta1 * mom.m[k] + (1.0 - cfg.beta1) * g[k];
      mom.v[k] = cfg.beta2 * mom.v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = mom.m[k] / bc1;
      const double vhat = mom.v[k] / bc2;
      pd[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace trm
