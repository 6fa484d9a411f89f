#include "rftlab/bounds.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace rftlab;

TEST(ValueBound, ConstantRewardHoldsWithZeroSides) {
  SoftmaxPolicy p = SoftmaxPolicy::tabular({3, 2}, 1);
  Rng rng(1);
  p.init_uniform_fan_in(rng, 2.0);
  const BoundReport r = value_bound_check(p, {0, {}}, RewardSpec::constant(p.vocab(), 1, 0.4));
  EXPECT_LE(r.lhs, 1e-15);
  EXPECT_EQ(r.rhs, 0.0);
  EXPECT_TRUE(r.holds);
}

TEST(ValueBound, UniformBinaryTabular) {
  // p = (1/2, 1/2), r = (1, -1): dV/dz = p (r - V) = (1/2, -1/2).
  SoftmaxPolicy p = SoftmaxPolicy::tabular({2, 1}, 1);
  const BoundReport r = value_bound_check(p, {0, {}}, RewardSpec::label_match({{{0}}}));
  EXPECT_NEAR(r.sigma, 1.0, 1e-15);
  EXPECT_NEAR(r.gamma, 1.0, 1e-12);
  EXPECT_NEAR(r.rhs, 6.0, 1e-11);
  EXPECT_NEAR(r.lhs, std::sqrt(0.5), 1e-15);
  EXPECT_TRUE(r.holds);
  EXPECT_LT(r.slack_ratio, 1.0);
}

TEST(PpoClipBound, AtReferenceDifferenceVanishes) {
  SweepConfig c;
  c.seed = 5;
  const Instance in = random_instance(c, 3);
  const BoundPair b = ppo_clip_bound_check(in.policy, in.policy, in.x, in.reward, 0.2);
  EXPECT_EQ(b.difference.lhs, 0.0);
  EXPECT_EQ(b.difference.rhs, 0.0);
  EXPECT_TRUE(b.difference.holds);
  const BoundReport t = value_bound_check(in.policy, in.x, in.reward);
  EXPECT_NEAR(b.combined.rhs, t.rhs, 1e-12);
  EXPECT_NEAR(b.combined.lhs, t.lhs, 1e-12);
}

TEST(PpoClipBound, SmallDeltaGivesSmallSlack) {
  SweepConfig c;
  c.seed = 6;
  for (std::uint64_t i = 0; i < 50; ++i) {
    Instance in = random_instance(c, i);
    if (in.tau == 0.0) continue;
    const BoundPair wide = ppo_clip_bound_check(in.policy, in.ref, in.x, in.reward, 0.5);
    const BoundPair narrow = ppo_clip_bound_check(in.policy, in.ref, in.x, in.reward, 0.01);
    EXPECT_TRUE(narrow.difference.holds);
    EXPECT_GT(narrow.difference.rhs, wide.difference.rhs);
  }
}

TEST(PpoKlBound, ZeroLambdaAndReference) {
  SweepConfig c;
  c.seed = 7;
  const Instance in = random_instance(c, 2);
  const BoundPair z = ppo_kl_bound_check(in.policy, in.ref, in.x, in.reward, 0.0);
  EXPECT_EQ(z.difference.lhs, 0.0);
  EXPECT_EQ(z.difference.rhs, 0.0);
  const BoundPair r = ppo_kl_bound_check(in.policy, in.policy, in.x, in.reward, 5.0);
  EXPECT_EQ(r.difference.lhs, 0.0);
  EXPECT_EQ(r.difference.rhs, 0.0);
}

TEST(Report, SlackRatioEdgeCases) {
  EXPECT_EQ(make_report("b", 0.0, 0.0, 1, 0, 0, 0, 0).slack_ratio, 0.0);
  const BoundReport bad = make_report("b", 1e-3, 0.0, 1, 0, 0, 0, 0);
  EXPECT_EQ(bad.slack_ratio, std::numeric_limits<double>::infinity());
  EXPECT_FALSE(bad.holds);
  EXPECT_TRUE(bound_holds(1.0 + 1e-10, 1.0));
  EXPECT_FALSE(bound_holds(1.0 + 1e-8, 1.0));
}

TEST(Sweep, EmptySweep) {
  SweepConfig c;
  c.count = 0;
  const SweepResult r = bound_sweep(c);
  EXPECT_TRUE(r.records.empty());
  EXPECT_EQ(r.violations(), 0u);
  EXPECT_EQ(grad_report_csv(r.records), "instance,objective,grad_norm,bound,slack,sigma,gamma,tv,coefficient\n");
}

TEST(Sweep, ConstantRewardsGiveZeroGradients) {
  SweepConfig c;
  c.count = 100;
  c.constant_rewards = true;
  for (const auto& rec : bound_sweep(c).records) {
    EXPECT_LE(rec.reports[0].lhs, 1e-12);
    EXPECT_LE(rec.reports[2].lhs, 1e-12);
  }
}

TEST(Sweep, DefaultSeedHasNoViolations) {
  SweepConfig c;  // 1000 instances, seed 42
  const SweepResult r = bound_sweep(c);
  ASSERT_EQ(r.records.size(), 1000u);
  for (const auto& s : r.summary) EXPECT_EQ(s.violations, 0u) << s.bound;
}

TEST(Sweep, InstancesRespectSizeCaps) {
  SweepConfig c;
  std::size_t kinds[3] = {0, 0, 0};
  for (std::uint64_t i = 0; i < 300; ++i) {
    const Instance in = random_instance(c, i);
    EXPECT_LE(in.policy.vocab().output_count(), c.max_outputs);
    EXPECT_LE(in.policy.param_count(), c.max_params);
    EXPECT_LE(in.policy.vocab().size, c.max_vocab);
    EXPECT_LE(in.policy.vocab().out_len, c.max_out_len);
    ++kinds[static_cast<int>(in.policy.kind())];
  }
  for (auto k : kinds) EXPECT_GT(k, 50u);
}

TEST(Sweep, ParallelMatchesSerial) {
  SweepConfig c;
  c.count = 120;
  c.exponent_probe = true;
  const SweepResult a = bound_sweep(c);
  c.jobs = 4;
  const SweepResult b = bound_sweep(c);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(to_json(a.records[i]).dump(), to_json(b.records[i]).dump());
  EXPECT_EQ(grad_report_csv(a.records), grad_report_csv(b.records));
}

TEST(Sweep, ExponentProbeIsNotAsserted) {
  SweepConfig c;
  c.count = 50;
  c.exponent_probe = true;
  const SweepResult r = bound_sweep(c);
  ASSERT_EQ(r.summary.size(), 6u);
  EXPECT_EQ(r.summary.back().bound, "value_exponent1");
  EXPECT_FALSE(r.summary.back().asserted);
  std::size_t asserted = 0;
  for (const auto& s : r.summary)
    if (s.asserted) asserted += s.violations;
  EXPECT_EQ(r.violations(), asserted);
}

TEST(Sweep, JsonShape) {
  SweepConfig c;
  c.count = 3;
  const SweepResult r = bound_sweep(c);
  const auto j = to_json(r.records[1]);
  EXPECT_EQ(j["instance"], 1);
  EXPECT_EQ(j["reports"].size(), 5u);
  EXPECT_EQ(j["reports"][0]["bound"], "value");
  const auto s = to_json(r.summary, r.records.size());
  EXPECT_EQ(s["count"], 3);
  EXPECT_EQ(s["bounds"].size(), 5u);
}
