#pragma once

#include "rftlab/common.hpp"
#include "rftlab/policy.hpp"
#include "rftlab/reward.hpp"
#include "rftlab/rng.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace rftlab {

struct InputStats {
  std::size_t id = 0;
  double reward_mean = 0.0;
  double reward_std = 0.0;
  std::size_t n_samples = 0;  // 0 for exact
  bool exact() const { return n_samples == 0; }
};

struct StatsMode {
  std::size_t n = 0;  // 0 selects exact enumeration
  std::uint64_t seed = 0;
  static StatsMode exact() { return {}; }
  static StatsMode sampled(std::size_t n, std::uint64_t seed) { return {n, seed}; }
};

/// Draws one output token by token from the prefix conditionals.
inline std::size_t sample_output(const Vocabulary& vocab, const PrefixTree& tree, Rng& rng) {
  std::size_t idx = 0;
  for (int l = 0; l < vocab.out_len; ++l) {
    const std::size_t col = vocab.level_offset(l) + idx;
    const std::size_t tok = rng.categorical(tree.cond.col(static_cast<Eigen::Index>(col)));
    idx = idx * static_cast<std::size_t>(vocab.size) + tok;
  }
  return idx;
}

/// Sample mean and divide-by-n std of rewards of n ancestral samples.
inline InputStats sampled_stats(const Vocabulary& vocab, const PrefixTree& tree, const Vector& rewards, std::size_t id,
                                std::size_t n, Rng& rng) {
  if (n < 2) throw Error("sampled statistics need n >= 2");
  double s = 0.0, ss = 0.0;
  std::vector<double> draws(n);
  for (std::size_t i = 0; i < n; ++i) {
    draws[i] = rewards[static_cast<Eigen::Index>(sample_output(vocab, tree, rng))];
    s += draws[i];
  }
  const double mean = s / static_cast<double>(n);
  for (double r : draws) ss += (r - mean) * (r - mean);
  return {id, mean, std::sqrt(ss / static_cast<double>(n)), n};
}

inline InputStats estimate_stats(const SoftmaxPolicy& policy, const Input& x, const RewardSpec& reward,
                                 const StatsMode& mode = StatsMode::exact()) {
  if (mode.n == 0) {
    const RewardStats s = reward_stats(policy, x, reward);
    return {x.id, s.mean, s.std, 0};
  }
  Rng rng = Rng::stream(mode.seed, x.id);
  return sampled_stats(policy.vocab(), expand(policy, x), reward.rewards_for(x.id, policy.vocab()), x.id, mode.n, rng);
}

/// Linear interpolation between order statistics at position q/100 * (n-1).
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw Error("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw Error("percentile q must lie in [0, 100]");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// q-th percentile of reward_std over inputs with reward_mean <= mean_cutoff.
inline double std_percentile(const std::vector<InputStats>& stats, double q, double mean_cutoff = 0.9) {
  std::vector<double> kept;
  for (const auto& s : stats)
    if (s.reward_mean <= mean_cutoff) kept.push_back(s.reward_std);
  if (kept.empty()) throw Error("no inputs left after excluding reward means above " + format_double(mean_cutoff));
  return percentile(std::move(kept), q);
}

inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw Error("pearson needs series of equal length");
  if (xs.size() < 2) throw Error("pearson needs at least two points");
  for (const auto* v : {&xs, &ys})
    if (std::adjacent_find(v->begin(), v->end(), std::not_equal_to<>()) == v->end())
      throw Error("pearson is undefined for a zero-variance series");
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) mx += xs[i], my += ys[i];
  mx /= n;
  my /= n;
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("pearson is undefined for a zero-variance series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Pearson correlation between each input's pre-finetuning reward std and
/// the absolute change of its reward mean.
inline double correlation_report(const std::vector<InputStats>& pre, const std::vector<InputStats>& post) {
  std::map<std::size_t, const InputStats*> by_id;
  for (const auto& s : post) by_id[s.id] = &s;
  if (by_id.size() != post.size() || pre.size() != post.size()) throw Error("pre and post statistics have different ids");
  std::vector<double> xs, ys;
  for (const auto& s : pre) {
    auto it = by_id.find(s.id);
    if (it == by_id.end()) throw Error("input id " + std::to_string(s.id) + " missing from post statistics");
    xs.push_back(s.reward_std);
    ys.push_back(std::abs(it->second->reward_mean - s.reward_mean));
  }
  return pearson(xs, ys);
}

inline std::vector<InputStats> sorted_by_std(std::vector<InputStats> stats) {
  std::stable_sort(stats.begin(), stats.end(), [](const InputStats& a, const InputStats& b) {
    return a.reward_std < b.reward_std || (a.reward_std == b.reward_std && a.id < b.id);
  });
  return stats;
}

inline std::string scatter_csv(const std::vector<InputStats>& stats) {
  std::string out = "id,reward_mean,reward_std\n";
  for (const auto& s : sorted_by_std(stats))
    out += std::to_string(s.id) + ',' + format_double(s.reward_mean) + ',' + format_double(s.reward_std) + '\n';
  return out;
}

inline void scatter_export(const std::vector<InputStats>& stats, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write scatter file '" + path + "'");
  out << scatter_csv(stats);
  if (!out) throw Error("failed writing scatter file '" + path + "'");
}

inline std::vector<InputStats> scatter_parse(const std::string& text) {
  std::vector<InputStats> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || trim(line).empty()) continue;
    auto f = split(trim(line), ',');
    if (f.size() != 3) throw Error("scatter line " + std::to_string(lineno) + ": expected 3 fields");
    out.push_back({static_cast<std::size_t>(parse_int(f[0])), parse_double(f[1]), parse_double(f[2]), 0});
  }
  return out;
}

}  // namespace rftlab
