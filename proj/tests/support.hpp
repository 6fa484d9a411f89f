#pragma once

#include "rftlab/bounds.hpp"
#include "rftlab/grad.hpp"

#include <algorithm>
#include <limits>
#include <optional>

namespace rftlab::testing {

/// Max-coordinate relative errors of each analytic gradient against central
/// finite differences of an independently computed objective value.
struct OracleErrors {
  double rft = 0.0;
  double sft = 0.0;
  double ppo_kl = 0.0;
  std::optional<double> ppo_clip;  // unset when a ratio sits near 1 +/- delta
};

/// Smallest distance of any probability ratio to the clip boundaries.
inline double clip_margin(const Instance& in) {
  const Vector p = expand(in.policy, in.x).probs, pb = expand(in.ref, in.x).probs;
  double m = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double r = p[i] / pb[i];
    m = std::min({m, std::abs(r - (1.0 + in.delta)), std::abs(r - (1.0 - in.delta))});
  }
  return m;
}

inline Vector sft_target(const Instance& in) {
  const Vocabulary& v = in.policy.vocab();
  return one_hot_target(v, v.output_at(static_cast<std::size_t>(in.index % v.output_count())));
}

inline OracleErrors oracle_errors(const Instance& in, double margin = 1e-3) {
  const SoftmaxPolicy& base = in.policy;
  auto at = [&](const Vector& th) { return base.with_values(th); };
  const Vector th = base.values();
  OracleErrors e;

  const Vector fd_v = finite_diff_grad([&](const Vector& t) { return expected_reward(at(t), in.x, in.reward); }, th).values;
  e.rft = max_relative_error(grad_value(base, in.x, in.reward).values, fd_v);

  const Vector target = sft_target(in);
  const Vector fd_s = finite_diff_grad([&](const Vector& t) { return sft_loss(at(t), in.x, target); }, th).values;
  e.sft = max_relative_error(grad_sft(base, in.x, target).values, fd_s);

  const Vector fd_k =
      finite_diff_grad([&](const Vector& t) { return ppo_kl_value(at(t), in.ref, in.x, in.reward, in.lambda); }, th).values;
  e.ppo_kl = max_relative_error(grad_ppo_kl(base, in.ref, in.x, in.reward, in.lambda).values, fd_k);

  if (clip_margin(in) > margin) {
    const Vector fd_c =
        finite_diff_grad([&](const Vector& t) { return ppo_clip_value(at(t), in.ref, in.x, in.reward, in.delta); }, th)
            .values;
    e.ppo_clip = max_relative_error(grad_ppo_clip(base, in.ref, in.x, in.reward, in.delta).values, fd_c);
  }
  return e;
}

/// Same instance with the reference moved onto the policy.
inline Instance at_reference(Instance in) {
  in.ref = in.policy;
  return in;
}

}  // namespace rftlab::testing
