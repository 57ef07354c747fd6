#pragma once

// First-order update rules: plain GD (optionally with momentum), Adam, and
// Adam with a temporal sign-agreement mask.

#include "ilc/common.hpp"

#include <fmt/format.h>

namespace ilc {

/// params - eta * grad.
inline Vector gd_step(const Vector& params, const Vector& grad, double eta) {
  require(eta > 0.0 && std::isfinite(eta), "gd_step: eta must be positive");
  require_dims(params.size() == grad.size(), "gd_step: gradient length mismatch");
  require_finite(grad, "gd_step gradient");
  return params - eta * grad;
}

struct MomentumState {
  Vector velocity;
  double momentum = 0.0;
};

/// Heavy-ball GD: v = mu v + g; params -= eta v. mu = 0 is plain GD.
inline void momentum_step(MomentumState& st, Vector& params, const Vector& grad, double eta) {
  require(eta > 0.0 && std::isfinite(eta), "momentum_step: eta must be positive");
  require_finite(grad, "momentum_step gradient");
  if (st.velocity.size() != params.size()) st.velocity = Vector::Zero(params.size());
  st.velocity = st.momentum * st.velocity + grad;
  params -= eta * st.velocity;
}

/// Moments m, v and the sign EMA a start at zero.
struct AdamState {
  Vector m;
  Vector v;
  Vector a;
  std::size_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double beta3 = 0.9;
  double alpha = 1e-3;
  // Added under the square root; 1e-16 puts the damping at ~1e-8 on sqrt(v).
  double eps = 1e-16;
  double tau = 0.5;
  bool bias_correction = true;

  static AdamState zeros(std::size_t n, double alpha) {
    AdamState s;
    s.m = Vector::Zero(static_cast<Eigen::Index>(n));
    s.v = Vector::Zero(static_cast<Eigen::Index>(n));
    s.a = Vector::Zero(static_cast<Eigen::Index>(n));
    s.alpha = alpha;
    return s;
  }

  void validate(Eigen::Index n) const {
    require_dims(m.size() == n && v.size() == n && a.size() == n, "adam: state length does not match parameters");
    for (double b : {beta1, beta2, beta3}) require(b >= 0.0 && b < 1.0, "adam: betas must lie in [0, 1)");
    require(alpha > 0.0 && std::isfinite(alpha), "adam: alpha must be positive");
    require(eps > 0.0, "adam: eps must be positive");
    require(tau >= 0.0 && tau <= 1.0, "adam: tau must lie in [0, 1]");
  }
};

namespace detail {

inline void adam_moments(AdamState& s, const Vector& grad) {
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
  ++s.step_count;
}

// alpha * m_hat / sqrt(v_hat + eps), optionally with Adam's bias correction.
inline Vector adam_direction(const AdamState& s) {
  double c1 = 1.0, c2 = 1.0;
  if (s.bias_correction) {
    c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step_count));
    c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step_count));
  }
  return s.alpha * (s.m / c1).array() / ((s.v / c2).array() + s.eps).sqrt();
}

}  // namespace detail

inline void adam_step(AdamState& s, Vector& params, const Vector& grad) {
  s.validate(params.size());
  require_dims(grad.size() == params.size(), "adam_step: gradient length mismatch");
  require_finite(grad, "adam_step gradient");
  detail::adam_moments(s, grad);
  params -= detail::adam_direction(s);
}

/// Adam whose update is gated per component by b = 1[|a| >= tau], where a
/// is an EMA of gradient signs across successive steps. Gated components
/// still update m and v. Returns the gate.
inline std::vector<std::uint8_t> temporal_and_adam_step(AdamState& s, Vector& params, const Vector& grad) {
  s.validate(params.size());
  require_dims(grad.size() == params.size(), "temporal_and_adam_step: gradient length mismatch");
  require_finite(grad, "temporal_and_adam_step gradient");
  detail::adam_moments(s, grad);
  s.a = s.beta3 * s.a + (1.0 - s.beta3) * grad.unaryExpr([](double g) { return double(sign_of(g)); });
  std::vector<std::uint8_t> gate(static_cast<std::size_t>(params.size()));
  Vector dir = detail::adam_direction(s);
  for (Eigen::Index j = 0; j < params.size(); ++j) {
    gate[static_cast<std::size_t>(j)] = std::abs(s.a[j]) >= s.tau;
    if (!gate[static_cast<std::size_t>(j)]) dir[j] = 0.0;
  }
  params -= dir;
  return gate;
}

/// Decoupled weight decay applied as its own update after a masked step.
inline void decoupled_weight_decay(Vector& params, double lr, double decay) {
  if (decay > 0.0) params *= 1.0 - lr * decay;
}

}  // namespace ilc
