#pragma once

// Sign-agreement masks and gradient aggregation rules.

#include "ilc/model.hpp"

#include <cstdint>

namespace ilc {

struct Mask {
  std::vector<std::uint8_t> bits;
  double threshold_tau = 0.0;
  std::size_t num_envs = 0;

  std::size_t size() const { return bits.size(); }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto b : bits) c += b;
    return c;
  }
  double keep_fraction() const { return bits.empty() ? 0.0 : double(count()) / double(bits.size()); }
};

enum class AggregationRule { mean, and_masked, xor_masked, geometric };

inline const char* to_string(AggregationRule r) {
  switch (r) {
    case AggregationRule::mean: return "mean";
    case AggregationRule::and_masked: return "and_masked";
    case AggregationRule::xor_masked: return "xor_masked";
    case AggregationRule::geometric: return "geometric";
  }
  return "?";
}

struct AggregatedGradient {
  Vector values;
  AggregationRule rule = AggregationRule::mean;
};

namespace detail {

// tau*d, snapped onto the integer grid when it is within rounding noise of it
// so that e.g. tau = 0.6, d = 5 compares against exactly 3.
inline double agreement_threshold(double tau, std::size_t d) {
  const double raw = tau * static_cast<double>(d);
  const double nearest = std::round(raw);
  return std::abs(raw - nearest) <= 1e-9 * std::max(1.0, raw) ? nearest : raw;
}

inline void check_tau(double tau) {
  require(tau >= 0.0 && tau <= 1.0, fmt::format("mask: tau = {} outside [0, 1]", tau));
}

}  // namespace detail

/// Per component: |sum_e sign(g_ej)|, with sign(0) = 0.
inline std::vector<int> sign_sums(const GradientBatch& gb) {
  std::vector<int> sums(gb.num_params(), 0);
  for (Eigen::Index e = 0; e < gb.grads.rows(); ++e) {
    const double* row = gb.grads.row(e).data();
    for (std::size_t j = 0; j < sums.size(); ++j) sums[j] += sign_of(row[j]);
  }
  for (auto& s : sums) s = std::abs(s);
  return sums;
}

/// Bit j is set iff tau * d <= |sum_e sign(g_ej)|.
inline Mask and_mask(const GradientBatch& gb, double tau) {
  detail::check_tau(tau);
  require(gb.num_envs() >= 1, "and_mask: empty gradient batch");
  const double thr = detail::agreement_threshold(tau, gb.num_envs());
  const auto sums = sign_sums(gb);
  Mask m{std::vector<std::uint8_t>(sums.size()), tau, gb.num_envs()};
  for (std::size_t j = 0; j < sums.size(); ++j) m.bits[j] = static_cast<double>(sums[j]) >= thr;
  return m;
}

/// Complement of the AND-mask at the same tau: keeps sign-inconsistent
/// components.
inline Mask xor_mask(const GradientBatch& gb, double tau) {
  Mask m = and_mask(gb, tau);
  for (auto& b : m.bits) b = !b;
  return m;
}

/// tau at which the AND-mask keeps components with at least `t` agreeing
/// signs out of d (t = (d/2)(tau + 1)).
inline double tau_for_agreement(std::size_t d, std::size_t t) {
  return 2.0 * static_cast<double>(t) / static_cast<double>(d) - 1.0;
}

/// Element-wise geometric mean across environments; zero wherever the rows
/// disagree in sign or any row is zero.
inline AggregatedGradient geometric_mean_grad(const GradientBatch& gb) {
  require(gb.num_envs() >= 1, "geometric_mean_grad: empty gradient batch");
  const auto d = static_cast<double>(gb.num_envs());
  Vector out(static_cast<Eigen::Index>(gb.num_params()));
  for (Eigen::Index j = 0; j < out.size(); ++j) {
    const int s = sign_of(gb.grads(0, j));
    double log_sum = 0.0;
    bool agree = s != 0;
    for (Eigen::Index e = 0; agree && e < gb.grads.rows(); ++e) {
      const double g = gb.grads(e, j);
      agree = sign_of(g) == s;
      if (agree) log_sum += std::log(std::abs(g));
    }
    out[j] = agree ? s * std::exp(log_sum / d) : 0.0;
  }
  return {std::move(out), AggregationRule::geometric};
}

/// avg_grad * mask. With `rescale`, the survivors of every layout span are
/// multiplied by (span size) / (surviving count); fully masked spans stay 0.
inline AggregatedGradient apply_mask(const Vector& avg_grad, const Mask& mask, std::span<const ParamSpan> layout,
                                     bool rescale, AggregationRule rule = AggregationRule::and_masked) {
  require_dims(static_cast<std::size_t>(avg_grad.size()) == mask.size(),
               fmt::format("apply_mask: gradient has {} entries, mask {}", avg_grad.size(), mask.size()));
  Vector out(avg_grad.size());
  for (Eigen::Index j = 0; j < out.size(); ++j) out[j] = mask.bits[static_cast<std::size_t>(j)] ? avg_grad[j] : 0.0;
  if (rescale) {
    for (const auto& s : layout) {
      require_dims(s.offset + s.length <= mask.size(), "apply_mask: layout exceeds mask length");
      std::size_t alive = 0;
      for (std::size_t j = s.offset; j < s.offset + s.length; ++j) alive += mask.bits[j];
      if (alive == 0 || alive == s.length) continue;
      const double c = static_cast<double>(s.length) / static_cast<double>(alive);
      out.segment(static_cast<Eigen::Index>(s.offset), static_cast<Eigen::Index>(s.length)) *= c;
    }
  }
  return {std::move(out), rule};
}

/// Probability that a component survives the AND-mask when every sign is an
/// independent fair coin: 2 (1/2)^d sum_{k=t}^{d} C(d, k). At t = d/2 the
/// middle term is counted twice, as in the closed form.
inline double keep_probability(std::size_t d, std::size_t t) {
  require(d >= 1, "keep_probability: d must be >= 1");
  require(2 * t >= d && t <= d, fmt::format("keep_probability: t = {} outside [d/2, d] for d = {}", t, d));
  const double log_half_d = -static_cast<double>(d) * std::log(2.0);
  double sum = 0.0;
  for (std::size_t k = t; k <= d; ++k) {
    const double log_choose = std::lgamma(double(d) + 1) - std::lgamma(double(k) + 1) - std::lgamma(double(d - k) + 1);
    sum += std::exp(log_choose + log_half_d);
  }
  return 2.0 * sum;
}

}  // namespace ilc
