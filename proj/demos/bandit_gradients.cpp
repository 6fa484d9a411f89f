// Gradient norm against reward std for a two-token policy as the correct
// token's logit gap shrinks.
#include "rftlab/bounds.hpp"

#include <cstdio>

int main() {
  using namespace rftlab;
  const RewardSpec reward = RewardSpec::label_match({{{0}}});
  std::printf("%8s %12s %12s %12s %10s\n", "gap", "reward_std", "grad_norm", "bound", "slack");
  for (double gap = 0.0; gap >= -12.0; gap -= 2.0) {
    SoftmaxPolicy p = SoftmaxPolicy::linear({4, 1}, 1);
    p.params().values.setZero();
    p.params().values[0] = gap;
    const BoundReport r = value_bound_check(p, {0, Vector::Ones(1)}, reward);
    std::printf("%8.1f %12.4e %12.4e %12.4e %10.4f\n", gap, r.sigma, r.lhs, r.rhs, r.slack_ratio);
  }
}
