// Closed-form and integrated crossing times for RFT and SFT gradient flow.
#include "rftlab/gradflow.hpp"

#include <cstdio>

int main() {
  using namespace rftlab;
  std::printf("%6s %10s %12s %12s %12s %12s\n", "mu0", "sigma0", "t_rft", "t_rft_rk4", "t_sft", "t_sft_rk4");
  for (double mu0 : {-1.0, -2.0, -4.0, -6.0, -8.0, -10.0}) {
    const LinearSetting s{2, 1.0, mu0};
    const auto rft = integrate_mu(Dynamics::RFT, s);
    const auto sft = integrate_mu(Dynamics::SFT, s);
    std::printf("%6.1f %10.3e %12.5f %12.5f %12.5f %12.5f\n", mu0, sigma0_from_mu0(mu0, 2), t_rft_closed(s),
                rft.crossing_time.value_or(-1.0), t_sft_closed(s), sft.crossing_time.value_or(-1.0));
  }
}
