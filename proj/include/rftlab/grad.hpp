#pragma once

#include "rftlab/common.hpp"
#include "rftlab/policy.hpp"
#include "rftlab/reward.hpp"

#include <functional>
#include <string>

namespace rftlab {

enum class Objective { RFT, SFT, PPO_CLIP, PPO_KL, FINITE_DIFF };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::RFT: return "RFT";
    case Objective::SFT: return "SFT";
    case Objective::PPO_CLIP: return "PPO_CLIP";
    case Objective::PPO_KL: return "PPO_KL";
    case Objective::FINITE_DIFF: return "FINITE_DIFF";
  }
  return "?";
}

struct GradVector {
  Vector values;
  Objective objective = Objective::RFT;
  double coefficient = 0.0;      // delta for PPO_CLIP, lambda for PPO_KL
  std::uint64_t ref_digest = 0;  // digest of the reference parameters
  double norm() const { return values.norm(); }
};

/// Per-prefix logit cotangents of sum_y w(y) grad ln p(y). At prefix u the
/// cotangent is W_u - (sum_k W_u[k]) p(.|u), W_u[k] summing w over outputs
/// that extend u with token k.
inline Matrix logit_cotangents(const Vocabulary& vocab, const PrefixTree& tree, const Vector& w) {
  const Eigen::Index K = vocab.size;
  Matrix cot(K, static_cast<Eigen::Index>(vocab.prefix_count()));
  Vector agg = w;
  for (int l = vocab.out_len - 1; l >= 0; --l) {
    const Eigen::Index off = static_cast<Eigen::Index>(vocab.level_offset(l));
    const Eigen::Index n = static_cast<Eigen::Index>(vocab.power(l));
    Vector up(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto c = agg.segment(i * K, K);
      const double s = c.sum();
      cot.col(off + i) = c - s * tree.cond.col(off + i);
      up[i] = s;
    }
    agg = std::move(up);
  }
  return cot;
}

inline Vector apply_cotangents(const SoftmaxPolicy& policy, const Input& x, const Matrix& cot) {
  Vector g = Vector::Zero(static_cast<Eigen::Index>(policy.param_count()));
  policy.accumulate_prefix_vjp(x, cot, g);
  return g;
}

/// Weights whose log-derivative sum is grad V: p(y) (r(y) - V).
inline Vector value_weights(const Vector& probs, const Vector& rewards) {
  const RewardStats s = stats_from(probs, rewards);
  return probs.cwiseProduct((rewards.array() - s.mean).matrix());
}

/// Weights whose log-derivative sum is grad H(p): -p ln p.
inline Vector entropy_weights(const Vector& probs) {
  return -(probs.array() * probs.array().log()).matrix();
}

inline GradVector grad_value(const SoftmaxPolicy& policy, const Input& x, const RewardSpec& reward) {
  const PrefixTree t = expand(policy, x);
  const Vector w = value_weights(t.probs, reward.rewards_for(x.id, policy.vocab()));
  return {apply_cotangents(policy, x, logit_cotangents(policy.vocab(), t, w)), Objective::RFT};
}

inline void check_target(const Vector& target, std::size_t n) {
  if (static_cast<std::size_t>(target.size()) != n) throw ShapeError("target length does not match output count");
  if ((target.array() < 0.0).any() || !target.allFinite()) throw Error("target has negative or non-finite entries");
  if (std::abs(target.sum() - 1.0) > 1e-9) throw Error("target distribution is not normalized (sum " + format_double(target.sum()) + ")");
}

/// Gradient of -sum_y D(y) ln p(y).
inline GradVector grad_sft(const SoftmaxPolicy& policy, const Input& x, const Vector& target) {
  check_target(target, policy.vocab().output_count());
  const PrefixTree t = expand(policy, x);
  return {apply_cotangents(policy, x, logit_cotangents(policy.vocab(), t, -target)), Objective::SFT};
}

inline Vector one_hot_target(const Vocabulary& vocab, Tokens y) {
  Vector t = Vector::Zero(static_cast<Eigen::Index>(vocab.output_count()));
  t[static_cast<Eigen::Index>(vocab.output_index(y))] = 1.0;
  return t;
}

inline double sft_loss(const SoftmaxPolicy& policy, const Input& x, const Vector& target) {
  check_target(target, policy.vocab().output_count());
  const Vector p = expand(policy, x).probs;
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (target[i] > 0.0) s -= target[i] * std::log(p[i]);
  return s;
}

inline void check_pair(const SoftmaxPolicy& policy, const SoftmaxPolicy& ref) {
  if (!(policy.vocab() == ref.vocab())) throw ShapeError("policies have different vocabularies");
  if (!policy.same_architecture(ref)) throw ShapeError("reference policy has a different architecture");
}

/// Outputs whose clipped term is active: ratio > 1+delta with A > 0, or
/// ratio < 1-delta with A < 0. Ratios exactly at 1 +/- delta are unclipped.
inline bool clip_active(double ratio, double adv, double delta) {
  return (adv > 0.0 && ratio > 1.0 + delta) || (adv < 0.0 && ratio < 1.0 - delta);
}

inline GradVector grad_ppo_clip(const SoftmaxPolicy& policy, const SoftmaxPolicy& ref, const Input& x,
                                const RewardSpec& reward, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw Error("PPO clip delta must lie in (0, 1)");
  check_pair(policy, ref);
  const PrefixTree t = expand(policy, x), tr = expand(ref, x);
  const Vector r = reward.rewards_for(x.id, policy.vocab());
  const double v_ref = stats_from(tr.probs, r).mean;
  Vector w(r.size());
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    const double a = r[i] - v_ref;
    w[i] = clip_active(t.probs[i] / tr.probs[i], a, delta) ? 0.0 : t.probs[i] * a;
  }
  return {apply_cotangents(policy, x, logit_cotangents(policy.vocab(), t, w)), Objective::PPO_CLIP, delta,
          digest(ref.values())};
}

/// Clipped surrogate value, summed directly over outputs.
inline double ppo_clip_value(const SoftmaxPolicy& policy, const SoftmaxPolicy& ref, const Input& x,
                             const RewardSpec& reward, double delta) {
  check_pair(policy, ref);
  const auto outs = enumerate_outputs(policy.vocab());
  const Vector p = expand(policy, x).probs, pb = expand(ref, x).probs;
  double v_ref = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i) v_ref += pb[static_cast<Eigen::Index>(i)] * reward(x.id, outs[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const double ratio = p[ii] / pb[ii];
    const double a = reward(x.id, outs[i]) - v_ref;
    s += pb[ii] * std::min(ratio * a, std::clamp(ratio, 1.0 - delta, 1.0 + delta) * a);
  }
  return s;
}

/// KL(p_ref || p_theta) over enumerated outputs.
inline double kl_divergence(const SoftmaxPolicy& ref, const SoftmaxPolicy& policy, const Input& x) {
  check_pair(policy, ref);
  const Vector p = expand(policy, x).probs, pb = expand(ref, x).probs;
  return (pb.array() * (pb.array().log() - p.array().log())).sum();
}

/// Per-prefix cotangents of grad KL(p_ref || p_theta):
/// -p_ref(u) (p_ref(.|u) - p_theta(.|u)).
inline Matrix kl_cotangents(const Vocabulary& vocab, const PrefixTree& t, const PrefixTree& tr) {
  Matrix cot = tr.cond - t.cond;
  for (Eigen::Index j = 0; j < cot.cols(); ++j) cot.col(j) *= -tr.prefix_prob[j];
  (void)vocab;
  return cot;
}

inline GradVector grad_kl(const SoftmaxPolicy& policy, const SoftmaxPolicy& ref, const Input& x) {
  check_pair(policy, ref);
  const PrefixTree t = expand(policy, x), tr = expand(ref, x);
  return {apply_cotangents(policy, x, kl_cotangents(policy.vocab(), t, tr)), Objective::PPO_KL, 1.0,
          digest(ref.values())};
}

inline GradVector grad_ppo_kl(const SoftmaxPolicy& policy, const SoftmaxPolicy& ref, const Input& x,
                              const RewardSpec& reward, double lambda) {
  if (!(lambda >= 0.0)) throw Error("KL coefficient lambda must be nonnegative");
  check_pair(policy, ref);
  const PrefixTree t = expand(policy, x), tr = expand(ref, x);
  const Vector w = value_weights(t.probs, reward.rewards_for(x.id, policy.vocab()));
  Matrix cot = logit_cotangents(policy.vocab(), t, w);
  if (lambda != 0.0) cot -= lambda * kl_cotangents(policy.vocab(), t, tr);
  return {apply_cotangents(policy, x, cot), Objective::PPO_KL, lambda, digest(ref.values())};
}

inline double ppo_kl_value(const SoftmaxPolicy& policy, const SoftmaxPolicy& ref, const Input& x,
                           const RewardSpec& reward, double lambda) {
  return expected_reward(policy, x, reward) - lambda * kl_divergence(ref, policy, x);
}

inline double tv_distance(const SoftmaxPolicy& policy, const SoftmaxPolicy& ref, const Input& x) {
  if (!(policy.vocab() == ref.vocab())) throw ShapeError("policies have different vocabularies");
  return 0.5 * (expand(policy, x).probs - expand(ref, x).probs).cwiseAbs().sum();
}

using ObjectiveFn = std::function<double(const Vector&)>;

/// Central differences (f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps).
inline GradVector finite_diff_grad(const ObjectiveFn& f, const Vector& params, double eps = 1e-5) {
  if (!(eps > 0.0)) throw Error("finite-difference step must be positive");
  Vector g(params.size());
  Vector t = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double orig = t[i];
    t[i] = orig + eps;
    const double fp = f(t);
    t[i] = orig - eps;
    const double fm = f(t);
    t[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw Error("objective is not finite at coordinate " + std::to_string(i));
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return {g, Objective::FINITE_DIFF};
}

/// max_i |a_i - b_i| / max(|b_i|, abs_floor / rel_tol), so that a value at
/// most rel_tol means every coordinate is within rel_tol relative error or
/// within abs_floor absolute error.
inline double max_relative_error(const Vector& a, const Vector& b, double rel_tol = 1e-4,
                                 double abs_floor = 1e-8) {
  if (a.size() != b.size()) throw ShapeError("gradient length mismatch");
  const double floor = abs_floor / rel_tol;
  double m = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), floor));
  return m;
}

}  // namespace rftlab
