#pragma once

#include "rftlab/grad.hpp"
#include "rftlab/policy.hpp"
#include "rftlab/reward.hpp"
#include "rftlab/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <string>
#include <thread>
#include <vector>

namespace rftlab {

struct BoundReport {
  std::string bound;
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = true;
  double slack_ratio = 0.0;
  int out_len = 1;
  double gamma = 0.0;
  double sigma = 0.0;
  double tv = 0.0;
  double coefficient = 0.0;  // delta or lambda
};

inline bool bound_holds(double lhs, double rhs) { return lhs <= rhs + 1e-9 * std::max(1.0, rhs); }

inline BoundReport make_report(std::string name, double lhs, double rhs, int out_len, double gamma, double sigma,
                               double tv, double coefficient) {
  BoundReport r{std::move(name), lhs, rhs, bound_holds(lhs, rhs), 0.0, out_len, gamma, sigma, tv, coefficient};
  if (rhs > 0.0)
    r.slack_ratio = lhs / rhs;
  else
    r.slack_ratio = lhs == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return r;
}

struct BoundPair {
  BoundReport difference;
  BoundReport combined;
};

inline BoundReport value_bound_check(const SoftmaxPolicy& policy, const Input& x, const RewardSpec& reward,
                              double exponent = 2.0 / 3.0) {
  const int L = policy.vocab().out_len;
  const double g = gamma(policy, x);
  const double s = reward_std(policy, x, reward);
  const double lhs = grad_value(policy, x, reward).norm();
  return make_report("value", lhs, 6.0 * L * g * std::pow(s, exponent), L, g, s, 0.0, 0.0);
}

inline BoundPair ppo_clip_bound_check(const SoftmaxPolicy& policy, const SoftmaxPolicy& ref, const Input& x,
                             const RewardSpec& reward, double delta) {
  const int L = policy.vocab().out_len;
  const double g = gamma(policy, x);
  const double s = reward_std(policy, x, reward);
  const double tv = tv_distance(policy, ref, x);
  const Vector gv = grad_value(policy, x, reward).values;
  const Vector gp = grad_ppo_clip(policy, ref, x, reward, delta).values;
  return {make_report("ppo_clip_difference", (gp - gv).norm(), 12.0 * L * g / delta * tv, L, g, s, tv, delta),
          make_report("ppo_clip_combined", gp.norm(), 6.0 * L * g * (std::pow(s, 2.0 / 3.0) + 2.0 / delta * tv), L, g,
                      s, tv, delta)};
}

inline BoundPair ppo_kl_bound_check(const SoftmaxPolicy& policy, const SoftmaxPolicy& ref, const Input& x,
                             const RewardSpec& reward, double lambda) {
  const int L = policy.vocab().out_len;
  const double g = gamma(policy, x);
  const double s = reward_std(policy, x, reward);
  const double tv = tv_distance(policy, ref, x);
  const Vector gv = grad_value(policy, x, reward).values;
  const Vector gk = grad_ppo_kl(policy, ref, x, reward, lambda).values;
  return {make_report("ppo_kl_difference", (gk - gv).norm(), 4.0 * L * g * lambda * tv, L, g, s, tv, lambda),
          make_report("ppo_kl_combined", gk.norm(),
                      6.0 * L * g * (std::pow(s, 2.0 / 3.0) + 2.0 * lambda / 3.0 * tv), L, g, s, tv, lambda)};
}

struct SweepConfig {
  std::size_t count = 1000;
  std::uint64_t seed = 42;
  int max_vocab = 6;
  int max_out_len = 3;
  std::size_t max_outputs = 216;
  std::size_t max_params = 2000;
  std::vector<PolicyKind> kinds{PolicyKind::TabularAR, PolicyKind::Linear, PolicyKind::MLP};
  bool constant_rewards = false;
  bool exponent_probe = false;  // also evaluate the value bound with exponent 1
  unsigned jobs = 1;
};

struct Instance {
  std::uint64_t index = 0;
  SoftmaxPolicy policy;
  SoftmaxPolicy ref;
  Input x;
  RewardSpec reward;
  double scale = 1.0;
  double tau = 0.0;
  double delta = 0.2;
  double lambda = 1.0;
};

namespace detail {

template <class T, std::size_t N>
T pick(Rng& rng, const std::array<T, N>& a) {
  return a[static_cast<std::size_t>(rng.below(N))];
}

inline void fill_normal(Rng& rng, RowMap m, double sd) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal(0.0, sd);
}

}  // namespace detail

/// Instance `index` of a sweep; depends only on (config, index).
inline Instance random_instance(const SweepConfig& cfg, std::uint64_t index) {
  if (cfg.kinds.empty()) throw Error("sweep needs at least one policy kind");
  if (cfg.max_vocab < 2 || cfg.max_out_len < 1) throw Error("invalid sweep size ranges");
  Rng rng = Rng::stream(cfg.seed, index);
  const PolicyKind kind = cfg.kinds[static_cast<std::size_t>(rng.below(cfg.kinds.size()))];
  Vocabulary v;
  v.size = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_vocab - 1)));
  v.out_len = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_out_len)));
  auto outputs = [&] {
    std::size_t n = 1;
    for (int i = 0; i < v.out_len; ++i) n *= static_cast<std::size_t>(v.size);
    return n;
  };
  while (v.out_len > 1 && outputs() > cfg.max_outputs) --v.out_len;
  while (v.size > 2 && outputs() > cfg.max_outputs) --v.size;

  const double s = detail::pick(rng, std::array{0.1, 1.0, 3.0});
  const double tau = detail::pick(rng, std::array{0.0, 0.01, 0.1});
  const double delta = detail::pick(rng, std::array{0.01, 0.05, 0.1, 0.2, 0.5});
  const double lambda = detail::pick(rng, std::array{0.0, 0.1, 0.7, 1.0, 5.0});

  Input x;
  std::size_t n_inputs = 1;
  auto build = [&]() -> SoftmaxPolicy {
    if (kind == PolicyKind::TabularAR) {
      n_inputs = 1 + static_cast<std::size_t>(rng.below(3));
      x.id = static_cast<std::size_t>(rng.below(n_inputs));
      SoftmaxPolicy p = SoftmaxPolicy::tabular(v, n_inputs);
      detail::fill_normal(rng, p.params().block("logits"), s);
      return p;
    }
    const std::size_t D = 1 + static_cast<std::size_t>(rng.below(kind == PolicyKind::Linear ? 8 : 6));
    x.features.resize(static_cast<Eigen::Index>(D));
    for (Eigen::Index i = 0; i < x.features.size(); ++i) x.features[i] = rng.normal();
    x.features /= x.features.norm();
    const double phi_norm = std::sqrt(static_cast<double>(v.out_len));
    if (kind == PolicyKind::Linear) {
      SoftmaxPolicy p = SoftmaxPolicy::linear(v, D);
      detail::fill_normal(rng, p.params().block("W"), s / phi_norm);
      return p;
    }
    std::vector<std::size_t> hidden(1 + static_cast<std::size_t>(rng.below(2)));
    for (auto& h : hidden) h = 2 + static_cast<std::size_t>(rng.below(10));
    SoftmaxPolicy p = SoftmaxPolicy::mlp(v, D, hidden);
    while (p.param_count() > cfg.max_params) {
      for (auto& h : hidden) h = std::max<std::size_t>(1, h / 2);
      p = SoftmaxPolicy::mlp(v, D, hidden);
    }
    const auto dims = p.layer_dims();
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      const bool last = i + 2 == dims.size();
      const double fan_in = static_cast<double>(dims[i]);
      const double sd = last ? s / std::sqrt(static_cast<double>(dims[i])) : std::sqrt(2.0 / fan_in);
      detail::fill_normal(rng, p.params().block("W" + std::to_string(i)), sd);
      detail::fill_normal(rng, p.params().block("b" + std::to_string(i)), 0.1);
    }
    return p;
  };
  SoftmaxPolicy policy = build();

  Vector ref_values = policy.values();
  for (Eigen::Index i = 0; i < ref_values.size(); ++i) ref_values[i] += tau * rng.normal();
  SoftmaxPolicy ref = policy.with_values(ref_values);

  std::vector<LabelRule> rules(n_inputs);
  RewardSpec reward = RewardSpec::table();
  if (cfg.constant_rewards) {
    reward = RewardSpec::constant(v, n_inputs, rng.uniform(-1.0, 1.0));
  } else if (rng.below(2) == 0) {
    for (auto& r : rules) {
      r.correct = v.output_at(static_cast<std::size_t>(rng.below(v.output_count())));
      r.correct_reward = 1.0;
      r.incorrect_reward = -1.0;
    }
    reward = RewardSpec::label_match(rules);
  } else {
    for (std::size_t id = 0; id < n_inputs; ++id)
      for (std::size_t i = 0; i < v.output_count(); ++i) reward.set(id, v.output_at(i), rng.uniform(-1.0, 1.0));
  }
  return {index, std::move(policy), std::move(ref), std::move(x), std::move(reward), s, tau, delta, lambda};
}

struct SweepRecord {
  std::uint64_t index = 0;
  PolicyKind kind = PolicyKind::TabularAR;
  int vocab_size = 0;
  std::size_t params = 0;
  std::vector<BoundReport> reports;  // value, ppo_clip x2, ppo_kl x2, optional probe
};

/// Evaluates every bound on one instance, sharing gamma, sigma, TV and grad V.
inline SweepRecord evaluate_instance(const Instance& in, bool exponent_probe) {
  const auto& p = in.policy;
  const int L = p.vocab().out_len;
  const double g = gamma(p, in.x);
  const double s = reward_std(p, in.x, in.reward);
  const double tv = tv_distance(p, in.ref, in.x);
  const Vector gv = grad_value(p, in.x, in.reward).values;
  const Vector gp = grad_ppo_clip(p, in.ref, in.x, in.reward, in.delta).values;
  const Vector gk = grad_ppo_kl(p, in.ref, in.x, in.reward, in.lambda).values;
  const double s23 = std::pow(s, 2.0 / 3.0);
  SweepRecord rec{in.index, p.kind(), p.vocab().size, p.param_count(), {}};
  rec.reports.push_back(make_report("value", gv.norm(), 6.0 * L * g * s23, L, g, s, tv, 0.0));
  rec.reports.push_back(
      make_report("ppo_clip_difference", (gp - gv).norm(), 12.0 * L * g / in.delta * tv, L, g, s, tv, in.delta));
  rec.reports.push_back(make_report("ppo_clip_combined", gp.norm(), 6.0 * L * g * (s23 + 2.0 / in.delta * tv), L, g, s,
                                    tv, in.delta));
  rec.reports.push_back(
      make_report("ppo_kl_difference", (gk - gv).norm(), 4.0 * L * g * in.lambda * tv, L, g, s, tv, in.lambda));
  rec.reports.push_back(make_report("ppo_kl_combined", gk.norm(),
                                    6.0 * L * g * (s23 + 2.0 * in.lambda / 3.0 * tv), L, g, s, tv, in.lambda));
  if (exponent_probe) rec.reports.push_back(make_report("value_exponent1", gv.norm(), 6.0 * L * g * s, L, g, s, tv, 0.0));
  return rec;
}

struct BoundSummary {
  std::string bound;
  std::size_t count = 0;
  std::size_t violations = 0;
  double max_slack = 0.0;
  double q50 = 0.0, q90 = 0.0, q99 = 0.0;
  bool asserted = true;  // the exponent probe is recorded, not asserted
};

struct SweepResult {
  std::vector<SweepRecord> records;
  std::vector<BoundSummary> summary;

  std::size_t violations() const {
    std::size_t v = 0;
    for (const auto& s : summary)
      if (s.asserted) v += s.violations;
    return v;
  }
};

/// Linear interpolation between order statistics at position q * (n - 1).
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline std::vector<BoundSummary> summarize(const std::vector<SweepRecord>& records, bool exponent_probe) {
  std::vector<std::string> names{"value", "ppo_clip_difference", "ppo_clip_combined", "ppo_kl_difference", "ppo_kl_combined"};
  if (exponent_probe) names.push_back("value_exponent1");
  std::vector<BoundSummary> out;
  for (std::size_t b = 0; b < names.size(); ++b) {
    BoundSummary s{names[b]};
    s.asserted = names[b] != "value_exponent1";
    std::vector<double> slack;
    for (const auto& r : records) {
      const auto& rep = r.reports[b];
      ++s.count;
      if (!rep.holds) ++s.violations;
      slack.push_back(rep.slack_ratio);
    }
    std::sort(slack.begin(), slack.end());
    if (!slack.empty()) {
      s.max_slack = slack.back();
      s.q50 = sorted_quantile(slack, 0.5);
      s.q90 = sorted_quantile(slack, 0.9);
      s.q99 = sorted_quantile(slack, 0.99);
    }
    out.push_back(s);
  }
  return out;
}

inline SweepResult bound_sweep(const SweepConfig& cfg) {
  SweepResult res;
  res.records.resize(cfg.count);
  const unsigned jobs = std::max(1u, std::min<unsigned>(cfg.jobs, static_cast<unsigned>(std::max<std::size_t>(cfg.count, 1))));
  auto work = [&](unsigned w) {
    for (std::size_t i = w; i < cfg.count; i += jobs)
      res.records[i] = evaluate_instance(random_instance(cfg, i), cfg.exponent_probe);
  };
  if (jobs == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < jobs; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  res.summary = summarize(res.records, cfg.exponent_probe);
  return res;
}

inline nlohmann::ordered_json to_json(const BoundReport& r) {
  nlohmann::ordered_json j;
  j["bound"] = r.bound;
  j["lhs"] = r.lhs;
  j["rhs"] = r.rhs;
  j["holds"] = r.holds;
  j["slack_ratio"] = std::isfinite(r.slack_ratio) ? nlohmann::ordered_json(r.slack_ratio) : nlohmann::ordered_json("inf");
  j["out_len"] = r.out_len;
  j["gamma"] = r.gamma;
  j["sigma"] = r.sigma;
  j["tv"] = r.tv;
  j["coefficient"] = r.coefficient;
  return j;
}

inline nlohmann::ordered_json to_json(const SweepRecord& rec) {
  nlohmann::ordered_json j;
  j["instance"] = rec.index;
  j["kind"] = to_string(rec.kind);
  j["vocab_size"] = rec.vocab_size;
  j["params"] = rec.params;
  j["reports"] = nlohmann::ordered_json::array();
  for (const auto& r : rec.reports) j["reports"].push_back(to_json(r));
  return j;
}

inline nlohmann::ordered_json to_json(const std::vector<BoundSummary>& summary, std::size_t count) {
  nlohmann::ordered_json j;
  j["summary"] = true;
  j["count"] = count;
  j["bounds"] = nlohmann::ordered_json::array();
  for (const auto& s : summary) {
    nlohmann::ordered_json b;
    b["bound"] = s.bound;
    b["asserted"] = s.asserted;
    b["violations"] = s.violations;
    b["max_slack_ratio"] = std::isfinite(s.max_slack) ? nlohmann::ordered_json(s.max_slack) : nlohmann::ordered_json("inf");
    b["slack_q50"] = s.q50;
    b["slack_q90"] = s.q90;
    b["slack_q99"] = s.q99;
    j["bounds"].push_back(b);
  }
  return j;
}

/// Delimited GradReport rows: one per instance and objective.
inline std::string grad_report_csv(const std::vector<SweepRecord>& records) {
  std::string out = "instance,objective,grad_norm,bound,slack,sigma,gamma,tv,coefficient\n";
  auto row = [&](std::uint64_t idx, const char* obj, const BoundReport& r) {
    out += std::to_string(idx) + ',' + obj + ',' + format_double(r.lhs) + ',' + format_double(r.rhs) + ',' +
           format_double(r.slack_ratio) + ',' + format_double(r.sigma) + ',' + format_double(r.gamma) + ',' +
           format_double(r.tv) + ',' + format_double(r.coefficient) + '\n';
  };
  for (const auto& rec : records) {
    row(rec.index, "RFT", rec.reports[0]);
    row(rec.index, "PPO_CLIP", rec.reports[2]);
    row(rec.index, "PPO_KL", rec.reports[4]);
  }
  return out;
}

}  // namespace rftlab
