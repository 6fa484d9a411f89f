#pragma once

#include "rftlab/common.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace rftlab {

enum class Dynamics { RFT, SFT };

struct LinearSetting {
  int K = 2;
  double N = 1.0;
  double mu0 = -1.0;

  void validate(bool allow_zero = true) const {
    if (K < 2) throw Error("K must be at least 2");
    if (!(N >= 1.0)) throw Error("N must be at least 1");
    if (!(mu0 < 0.0 || (allow_zero && mu0 == 0.0))) throw Error("mu0 must be negative");
  }
};

inline double mu_rhs_rft(double mu, int K, double N) {
  const double k1 = K - 1.0;
  return 2.0 * K / (N * (std::exp(mu) + 2.0 * k1 + k1 * k1 * std::exp(-mu)));
}

inline double mu_rhs_sft(double mu, int K, double N) { return K / (N * (std::exp(mu) + (K - 1.0))); }

inline double mu_rhs(Dynamics d, double mu, int K, double N) {
  return d == Dynamics::RFT ? mu_rhs_rft(mu, K, N) : mu_rhs_sft(mu, K, N);
}

/// Quantity constant along exact solutions of the mu ODE.
inline double conserved(Dynamics d, double mu, double t, int K, double N) {
  const double k1 = K - 1.0;
  if (d == Dynamics::RFT) return std::exp(mu) + 2.0 * k1 * mu - k1 * k1 * std::exp(-mu) - 2.0 * K / N * t;
  return k1 * mu + std::exp(mu) - K / N * t;
}

inline double t_rft_closed(const LinearSetting& s) {
  const double K = s.K, N = s.N, k1 = K - 1.0;
  const double c = N * k1 * k1 / (2.0 * K);
  return c * std::exp(-s.mu0) - c + N / (2.0 * K) * (1.0 - std::exp(s.mu0)) - N * k1 / K * s.mu0;
}

inline double t_sft_closed(const LinearSetting& s) {
  return s.N * (1.0 - (s.K - 1.0) * s.mu0 - std::exp(s.mu0)) / s.K;
}

inline double t_closed(Dynamics d, const LinearSetting& s) {
  return d == Dynamics::RFT ? t_rft_closed(s) : t_sft_closed(s);
}

/// Initial reward std for +/-1 label reward with equal incorrect logits.
inline double sigma0_from_mu0(double mu0, int K) {
  if (K < 2) throw Error("K must be at least 2");
  const double k1 = K - 1.0;
  return std::sqrt(4.0 * k1 / (std::exp(mu0) + 2.0 * k1 + k1 * k1 * std::exp(-mu0)));
}

struct MuTrajectory {
  std::vector<double> times;
  std::vector<double> mu;
  std::optional<double> crossing_time;
  double conservation_residual = 0.0;  // max |C(t) - C(0)| over the steps taken
  std::size_t steps = 0;
};

inline double rk4_step(Dynamics d, double mu, double h, int K, double N) {
  const double k1 = mu_rhs(d, mu, K, N);
  const double k2 = mu_rhs(d, mu + 0.5 * h * k1, K, N);
  const double k3 = mu_rhs(d, mu + 0.5 * h * k2, K, N);
  const double k4 = mu_rhs(d, mu + h * k3, K, N);
  return mu + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Default RK4 step: min(0.01, t_closed / 1e4).
inline double default_step(Dynamics d, const LinearSetting& s) {
  const double t = t_closed(d, s);
  return t > 0.0 ? std::min(0.01, t / 1e4) : 0.01;
}

/// Fixed-step RK4 from mu0. The crossing inside the bracketing step is
/// located by bisection on the length of a partial RK4 step taken from the
/// left endpoint, which keeps the crossing time fourth-order accurate.
inline MuTrajectory integrate_mu(Dynamics d, const LinearSetting& s, double t_max, double step,
                                 bool stop_at_crossing = true, std::size_t record_every = 1) {
  s.validate(true);
  if (!(step > 0.0)) throw Error("step must be positive");
  if (!(t_max > 0.0)) throw Error("t_max must be positive");
  if (record_every == 0) record_every = 1;
  MuTrajectory tr;
  double t = 0.0, mu = s.mu0;
  const double c0 = conserved(d, mu, t, s.K, s.N);
  tr.times.push_back(t);
  tr.mu.push_back(mu);
  if (mu >= 0.0) {
    tr.crossing_time = 0.0;
    if (stop_at_crossing) return tr;
  }
  const std::size_t n = static_cast<std::size_t>(std::ceil(t_max / step - 1e-9));
  for (std::size_t i = 0; i < n; ++i) {
    const double h = std::min(step, t_max - t);
    const double next = rk4_step(d, mu, h, s.K, s.N);
    const double t_next = (i + 1 == n) ? t_max : static_cast<double>(i + 1) * step;
    if (!tr.crossing_time && mu < 0.0 && next >= 0.0) {
      double lo = 0.0, hi = h;
      for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        (rk4_step(d, mu, mid, s.K, s.N) < 0.0 ? lo : hi) = mid;
      }
      tr.crossing_time = t + 0.5 * (lo + hi);
    }
    mu = next;
    t = t_next;
    ++tr.steps;
    tr.conservation_residual = std::max(tr.conservation_residual, std::abs(conserved(d, mu, t, s.K, s.N) - c0));
    if (tr.steps % record_every == 0 || i + 1 == n || (stop_at_crossing && tr.crossing_time)) {
      tr.times.push_back(t);
      tr.mu.push_back(mu);
    }
    if (stop_at_crossing && tr.crossing_time) break;
  }
  return tr;
}

/// Integrates with the default step and t_max = 2 t_closed.
inline MuTrajectory integrate_mu(Dynamics d, const LinearSetting& s) {
  const double t = t_closed(d, s);
  return integrate_mu(d, s, t > 0.0 ? 2.0 * t : 1.0, default_step(d, s));
}

/// Right-hand side of the (w, v) system before the reduction to mu.
inline std::pair<double, double> wv_rhs(Dynamics d, double w, double v, int K, double N) {
  const double k1 = K - 1.0;
  if (d == Dynamics::RFT) {
    const double z = std::exp(w) + k1 * std::exp(v);
    const double e = std::exp(w + v) / (N * z * z);
    return {2.0 * k1 * e, -2.0 * e};
  }
  const double e = std::exp(v - w);
  const double den = N * (1.0 + k1 * e);
  return {k1 * e / den, -e / den};
}

/// Integrates (w, v) from (mu0, 0) with the same fixed-step RK4 and
/// returns max |(w - v) - mu| against the reduced trajectory `tr`.
inline double wv_reduction_gap(Dynamics d, const LinearSetting& s, const MuTrajectory& tr, double step) {
  double w = s.mu0, v = 0.0, t = 0.0, gap = 0.0;
  std::size_t j = 1;
  for (std::size_t i = 0; i < tr.steps; ++i) {
    auto [a1, b1] = wv_rhs(d, w, v, s.K, s.N);
    auto [a2, b2] = wv_rhs(d, w + 0.5 * step * a1, v + 0.5 * step * b1, s.K, s.N);
    auto [a3, b3] = wv_rhs(d, w + 0.5 * step * a2, v + 0.5 * step * b2, s.K, s.N);
    auto [a4, b4] = wv_rhs(d, w + step * a3, v + step * b3, s.K, s.N);
    w += step / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4);
    v += step / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4);
    t += step;
    while (j < tr.times.size() && tr.times[j] <= t + 0.5 * step) {
      if (std::abs(tr.times[j] - t) <= 0.5 * step) gap = std::max(gap, std::abs((w - v) - tr.mu[j]));
      ++j;
    }
  }
  return gap;
}

/// Crossing time from RK4 on the inverted ODE dt/dmu = 1 / rhs(mu),
/// integrated over mu in [mu0, 0] with `steps` uniform steps.
inline double crossing_time_by_mu(Dynamics d, const LinearSetting& s, std::size_t steps = 20000) {
  if (s.mu0 >= 0.0) return 0.0;
  const double h = -s.mu0 / static_cast<double>(steps);
  double t = 0.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const double mu = s.mu0 + static_cast<double>(i) * h;
    const double f0 = 1.0 / mu_rhs(d, mu, s.K, s.N);
    const double fm = 1.0 / mu_rhs(d, mu + 0.5 * h, s.K, s.N);
    const double f1 = 1.0 / mu_rhs(d, mu + h, s.K, s.N);
    t += h / 6.0 * (f0 + 4.0 * fm + f1);
  }
  return t;
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::size_t n = 0;
};

inline LinearFit least_squares(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("least squares needs at least two paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw Error("least squares on a degenerate abscissa");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy == 0.0 ? 1.0 : sxy * sxy / (sxx * syy);
  f.n = x.size();
  return f;
}

struct SeparationPoint {
  double mu0 = 0.0;
  double sigma0 = 0.0;
  double t_rft_closed = 0.0;
  double t_rft_numeric = 0.0;
  double t_sft_closed = 0.0;
  double t_sft_numeric = 0.0;
};

struct SeparationFit {
  LinearFit rft_loglog;  // log t_RFT against log(1/sigma0)
  LinearFit sft_linear;  // t_SFT against ln(1/sigma0)
  bool ratio_increasing = false;
};

struct SeparationResult {
  std::vector<SeparationPoint> points;
  std::optional<SeparationFit> fit;  // present when the tail has at least two points
  double tail_sigma = 0.05;
};

inline SeparationResult separation_sweep(int K, double N, std::vector<double> mu0_grid, double tail_sigma = 0.05,
                                         bool numeric = true) {
  if (mu0_grid.empty()) throw Error("separation sweep needs a nonempty mu0 grid");
  std::sort(mu0_grid.begin(), mu0_grid.end(), std::greater<>());
  for (std::size_t i = 0; i < mu0_grid.size(); ++i) {
    if (!std::isfinite(mu0_grid[i]) || mu0_grid[i] > 0.0) throw Error("mu0 grid values must be finite and <= 0");
    if (i && mu0_grid[i] == mu0_grid[i - 1]) throw Error("mu0 grid has duplicate values");
  }
  SeparationResult res;
  res.tail_sigma = tail_sigma;
  std::vector<double> lx, ly, sy;
  std::vector<double> ratios;
  for (double mu0 : mu0_grid) {
    LinearSetting s{K, N, mu0};
    s.validate(true);
    SeparationPoint p{mu0, sigma0_from_mu0(mu0, K), t_rft_closed(s), 0.0, t_sft_closed(s), 0.0};
    if (numeric) {
      p.t_rft_numeric = crossing_time_by_mu(Dynamics::RFT, s);
      p.t_sft_numeric = crossing_time_by_mu(Dynamics::SFT, s);
    } else {
      p.t_rft_numeric = p.t_sft_numeric = std::nan("");
    }
    res.points.push_back(p);
    if (p.sigma0 <= tail_sigma && mu0 < 0.0) {
      lx.push_back(std::log(1.0 / p.sigma0));
      ly.push_back(std::log(p.t_rft_closed));
      sy.push_back(p.t_sft_closed);
      ratios.push_back(p.t_rft_closed / p.t_sft_closed);
    }
  }
  if (lx.size() >= 2) {
    SeparationFit f;
    f.rft_loglog = least_squares(lx, ly);
    f.sft_linear = least_squares(lx, sy);
    f.ratio_increasing = true;
    for (std::size_t i = 1; i < ratios.size(); ++i)
      if (!(ratios[i] > ratios[i - 1])) f.ratio_increasing = false;
    res.fit = f;
  }
  return res;
}

}  // namespace rftlab
