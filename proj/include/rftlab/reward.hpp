#pragma once

#include "rftlab/common.hpp"
#include "rftlab/policy.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace rftlab {

enum class RewardKind { Table, LabelMatch };

struct LabelRule {
  Sequence correct;
  double correct_reward = 1.0;
  double incorrect_reward = -1.0;
};

/// Bounded reward r(x, y) in [-1, 1], keyed by input id.
class RewardSpec {
 public:
  using Key = std::pair<std::size_t, Sequence>;

  static RewardSpec table(std::map<Key, double> entries = {}) {
    RewardSpec r(RewardKind::Table);
    for (auto& [k, v] : entries) r.set(k.first, k.second, v);
    return r;
  }

  static RewardSpec label_match(std::vector<LabelRule> rules) {
    RewardSpec r(RewardKind::LabelMatch);
    for (const auto& rule : rules) {
      check_range(rule.correct_reward);
      check_range(rule.incorrect_reward);
    }
    r.rules_ = std::move(rules);
    return r;
  }

  /// Every output of every listed input gets reward c.
  static RewardSpec constant(const Vocabulary& vocab, std::size_t n_inputs, double c) {
    RewardSpec r(RewardKind::Table);
    for (std::size_t id = 0; id < n_inputs; ++id)
      for (std::size_t i = 0; i < vocab.output_count(); ++i) r.set(id, vocab.output_at(i), c);
    return r;
  }

  RewardKind kind() const { return kind_; }
  const std::vector<LabelRule>& rules() const { return rules_; }
  const std::map<Key, double>& entries() const { return table_; }

  void set(std::size_t id, Sequence y, double value) {
    if (kind_ != RewardKind::Table) throw Error("set() applies to table rewards only");
    check_range(value);
    table_[{id, std::move(y)}] = value;
  }

  double operator()(std::size_t id, Tokens y) const {
    if (kind_ == RewardKind::LabelMatch) {
      const LabelRule& rule = rule_for(id);
      return std::equal(y.begin(), y.end(), rule.correct.begin(), rule.correct.end()) ? rule.correct_reward
                                                                                       : rule.incorrect_reward;
    }
    auto it = table_.find({id, Sequence(y.begin(), y.end())});
    if (it == table_.end()) throw Error("missing reward entry for input " + std::to_string(id) + ", output " + join(y));
    return it->second;
  }

  /// Rewards of every output of `vocab` in enumeration order.
  Vector rewards_for(std::size_t id, const Vocabulary& vocab) const {
    const std::size_t n = vocab.output_count();
    if (kind_ == RewardKind::LabelMatch) {
      const LabelRule& rule = rule_for(id);
      Vector r = Vector::Constant(static_cast<Eigen::Index>(n), rule.incorrect_reward);
      r[static_cast<Eigen::Index>(vocab.output_index(rule.correct))] = rule.correct_reward;
      return r;
    }
    Vector r(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) r[static_cast<Eigen::Index>(i)] = (*this)(id, vocab.output_at(i));
    return r;
  }

  static std::string join(Tokens y) {
    std::string s;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (i) s += '-';
      s += std::to_string(y[i]);
    }
    return s;
  }

  /// Reads "input_id,output_sequence,reward" rows; a header row is optional.
  static RewardSpec load_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open reward table '" + path + "'");
    RewardSpec r(RewardKind::Table);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      auto f = split(line, ',');
      if (lineno == 1 && f.size() == 3 && trim(f[0]) == "input_id") continue;
      try {
        if (f.size() != 3) throw Error("expected 3 fields, got " + std::to_string(f.size()));
        Sequence y;
        for (const auto& t : split(trim(f[1]), '-')) y.push_back(static_cast<int>(parse_int(trim(t))));
        long long id = parse_int(trim(f[0]));
        if (id < 0) throw Error("negative input id");
        r.set(static_cast<std::size_t>(id), std::move(y), parse_double(trim(f[2])));
      } catch (const Error& e) {
        throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    return r;
  }

  void save_table(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write reward table '" + path + "'");
    out << "input_id,output_sequence,reward\n";
    for (const auto& [k, v] : table_) out << k.first << ',' << join(k.second) << ',' << format_double(v) << '\n';
  }

 private:
  explicit RewardSpec(RewardKind k) : kind_(k) {}

  static void check_range(double v) {
    if (!(v >= -1.0 && v <= 1.0)) throw Error("reward " + format_double(v) + " outside [-1, 1]");
  }

  const LabelRule& rule_for(std::size_t id) const {
    if (id >= rules_.size()) throw Error("no label rule for input " + std::to_string(id));
    return rules_[id];
  }

  RewardKind kind_;
  std::map<Key, double> table_;
  std::vector<LabelRule> rules_;
};

struct RewardStats {
  double mean = 0.0;
  double std = 0.0;
  bool exact = true;
  std::size_t n_samples = 0;
};

/// Mean and population std of r under probabilities p. A constant reward
/// yields exactly (c, 0).
inline RewardStats stats_from(const Vector& p, const Vector& r) {
  const double lo = r.minCoeff(), hi = r.maxCoeff();
  RewardStats s;
  if (lo == hi) {
    s.mean = lo;
    return s;
  }
  s.mean = std::clamp(p.dot(r), lo, hi);
  const double var = p.dot((r.array() - s.mean).square().matrix());
  s.std = std::min(std::sqrt(std::max(var, 0.0)), 1.0);
  return s;
}

inline RewardStats reward_stats(const SoftmaxPolicy& policy, const Input& x, const RewardSpec& reward) {
  return stats_from(expand(policy, x).probs, reward.rewards_for(x.id, policy.vocab()));
}

inline double expected_reward(const SoftmaxPolicy& policy, const Input& x, const RewardSpec& reward) {
  return reward_stats(policy, x, reward).mean;
}

inline double reward_std(const SoftmaxPolicy& policy, const Input& x, const RewardSpec& reward) {
  return reward_stats(policy, x, reward).std;
}

inline double advantage(const RewardSpec& reward, const Input& x, Tokens y, double v_ref) {
  if (!(v_ref >= -1.0 && v_ref <= 1.0)) throw Error("reference value outside [-1, 1]");
  return reward(x.id, y) - v_ref;
}

inline double population_value(const SoftmaxPolicy& policy, const std::vector<Input>& dataset,
                               const RewardSpec& reward) {
  if (dataset.empty()) throw Error("population_value needs a nonempty dataset");
  double s = 0.0;
  for (const auto& x : dataset) s += expected_reward(policy, x, reward);
  return s / static_cast<double>(dataset.size());
}

}  // namespace rftlab
