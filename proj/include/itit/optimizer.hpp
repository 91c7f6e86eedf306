#pragma once

// AdamW with global-norm clipping and a warmup + cosine learning rate.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "itit/config.hpp"
#include "itit/model.hpp"

namespace itit {

/// Linear warmup 0 -> peak, then half-cosine decay to 0 at `total`.
inline double lr_at(std::size_t step, double peak, const ScheduleConfig& s) {
  if (step < s.warmup) return peak * static_cast<double>(step) / static_cast<double>(s.warmup);
  if (step >= s.total) return 0.0;
  const double progress = static_cast<double>(step - s.warmup) / static_cast<double>(s.total - s.warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamState {
  std::size_t step = 0;  // updates applied so far
  std::vector<std::vector<float>> m, v;  // per parameter, ParamStore order

  void init(const ParamStore<float>& params) {
    m.clear();
    v.clear();
    for (auto& [name, t] : params) {
      m.emplace_back(t.size(), 0.0f);
      v.emplace_back(t.size(), 0.0f);
    }
    step = 0;
  }
  bool operator==(const AdamState&) const = default;
};

/// Decay applies to matrices only (weights and embedding tables), not to
/// biases or LayerNorm parameters.
inline bool decays(const Tensor<float>& t) { return t.rank() == 2; }

inline double global_grad_norm(const ParamStore<float>& params) {
  double s = 0.0;
  for (auto& [name, t] : params)
    for (float g : t.grad()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

/// Scales all gradients so that their global norm is at most `max_norm`;
/// returns the norm before clipping.
inline double clip_grad_norm(ParamStore<float>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const float c = static_cast<float>(max_norm / (norm + 1e-12));
    for (auto& [name, t] : params)
      if (t.has_grad())
        for (auto& g : t.mutable_grad()) g *= c;
  }
  return norm;
}

/// One decoupled-weight-decay Adam update with bias correction:
///   m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2
///   p -= lr (m_hat / (sqrt(v_hat) + eps) + wd p)
inline void adam_update(ParamStore<float>& params, AdamState& st, const OptimizerConfig& oc, double lr) {
  if (st.m.size() != params.size()) st.init(params);
  ++st.step;
  const double bc1 = 1.0 - std::pow(oc.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(oc.beta2, static_cast<double>(st.step));
  std::size_t i = 0;
  for (auto& [name, t] : params) {
    auto& m = st.m[i];
    auto& v = st.v[i];
    ++i;
    auto p = t.mutable_values();
    auto g = t.grad();
    const bool wd = decays(t) && oc.weight_decay > 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
      const double mj = oc.beta1 * m[j] + (1.0 - oc.beta1) * gj;
      const double vj = oc.beta2 * v[j] + (1.0 - oc.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      double upd = (mj / bc1) / (std::sqrt(vj / bc2) + oc.eps);
      if (wd) upd += oc.weight_decay * static_cast<double>(p[j]);
      p[j] = static_cast<float>(static_cast<double>(p[j]) - lr * upd);
    }
  }
}

}  // namespace itit
