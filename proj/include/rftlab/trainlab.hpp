#pragma once

#include "rftlab/common.hpp"
#include "rftlab/grad.hpp"
#include "rftlab/policy.hpp"
#include "rftlab/reward.hpp"
#include "rftlab/rng.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace rftlab {

enum class Group { SMALL_STD, LARGE_STD };

inline std::string to_string(Group g) { return g == Group::SMALL_STD ? "small_std" : "large_std"; }

/// Where finetuning labels come from. Random: uniform inside (kept) or
/// outside (flipped) the pretraining set. Class: the sample's class label,
/// which the pretraining set contains for kept samples and excludes for
/// flipped ones.
enum class LabelSource { Random, Class };

struct ControlledSpec {
  std::size_t n_samples = 1000;
  std::size_t input_dim = 32;
  int n_labels = 10;
  int n_pretrain_labels = 5;
  double flip_fraction = 0.1;
  double incorrect_reward_flipped = -1.0;
  double incorrect_reward_kept = -1.0;
  std::vector<std::size_t> hidden{250, 100};
  bool linear_model = false;
  std::uint64_t seed = 3;
  double class_separation = 0.3;  // norm of each class-mean offset
  double noise = 1.0;             // per-coordinate noise scale times sqrt(D)
  double input_rms = 2.0;         // inputs rescaled to norm input_rms * sqrt(D)
  LabelSource label_source = LabelSource::Random;

  void validate() const {
    if (n_samples == 0) throw Error("n_samples must be positive");
    if (input_dim == 0) throw Error("input_dim must be positive");
    if (n_labels < 2) throw Error("n_labels must be at least 2");
    if (n_pretrain_labels < 1 || n_pretrain_labels > n_labels) throw Error("n_pretrain_labels must lie in [1, n_labels]");
    if (!(flip_fraction >= 0.0 && flip_fraction <= 1.0)) throw Error("flip_fraction must lie in [0, 1]");
    const std::size_t flipped = flipped_count();
    if (flipped > 0 && n_pretrain_labels >= n_labels)
      throw Error("infeasible flip: no label lies outside a pretraining set of size " + std::to_string(n_pretrain_labels));
    if (label_source == LabelSource::Class && flipped > 0 && n_pretrain_labels > n_labels - 1)
      throw Error("infeasible flip: pretraining set cannot exclude the class label");
    for (double r : {incorrect_reward_flipped, incorrect_reward_kept})
      if (!(r >= -1.0 && r <= 1.0)) throw Error("rewards must lie in [-1, 1]");
    if (!(input_rms > 0.0) || !(noise >= 0.0) || !(class_separation >= 0.0)) throw Error("invalid input scaling");
  }

  std::size_t flipped_count() const {
    return static_cast<std::size_t>(std::llround(flip_fraction * static_cast<double>(n_samples)));
  }
};

struct ControlledDataset {
  Matrix inputs;  // D x N
  std::vector<std::vector<int>> pretrain_sets;
  std::vector<int> finetune_label;
  std::vector<Group> group;
  int n_labels = 10;

  std::size_t size() const { return finetune_label.size(); }
  std::size_t input_dim() const { return static_cast<std::size_t>(inputs.rows()); }
  Input input(std::size_t i) const { return {i, inputs.col(static_cast<Eigen::Index>(i))}; }

  std::vector<std::size_t> members(Group g) const {
    std::vector<std::size_t> m;
    for (std::size_t i = 0; i < size(); ++i)
      if (group[i] == g) m.push_back(i);
    return m;
  }

  void validate() const {
    const std::size_t n = size();
    if (n == 0) throw Error("empty dataset");
    if (static_cast<std::size_t>(inputs.cols()) != n || pretrain_sets.size() != n || group.size() != n)
      throw Error("dataset columns have inconsistent lengths");
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = pretrain_sets[i];
      if (s.empty()) throw Error("sample " + std::to_string(i) + " has no pretraining labels");
      for (int l : s)
        if (l < 0 || l >= n_labels) throw Error("pretraining label out of range in sample " + std::to_string(i));
      const int y = finetune_label[i];
      if (y < 0 || y >= n_labels) throw Error("finetuning label out of range in sample " + std::to_string(i));
      const bool inside = std::find(s.begin(), s.end(), y) != s.end();
      if (inside != (group[i] == Group::LARGE_STD))
        throw Error("group tag of sample " + std::to_string(i) + " disagrees with its labels");
    }
  }
};

inline ControlledDataset build_controlled_dataset(const ControlledSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t N = spec.n_samples, D = spec.input_dim;
  const int K = spec.n_labels, P = spec.n_pretrain_labels;
  Matrix means(static_cast<Eigen::Index>(D), K);
  for (int k = 0; k < K; ++k) {
    for (std::size_t d = 0; d < D; ++d) means(static_cast<Eigen::Index>(d), k) = rng.normal();
    means.col(k) *= spec.class_separation / means.col(k).norm();
  }
  ControlledDataset ds;
  ds.n_labels = K;
  ds.inputs.resize(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(N));
  std::vector<int> cls(N);
  const double noise_sd = spec.noise / std::sqrt(static_cast<double>(D));
  const double norm = spec.input_rms * std::sqrt(static_cast<double>(D));
  for (std::size_t n = 0; n < N; ++n) {
    cls[n] = static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
    Vector x = means.col(cls[n]);
    for (std::size_t d = 0; d < D; ++d) x[static_cast<Eigen::Index>(d)] += noise_sd * rng.normal();
    const double xn = x.norm();
    ds.inputs.col(static_cast<Eigen::Index>(n)) = xn > 0.0 ? Vector(x * (norm / xn)) : x;
  }
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<bool> flipped(N, false);
  for (std::size_t i = 0; i < spec.flipped_count(); ++i) flipped[order[i]] = true;

  ds.pretrain_sets.resize(N);
  ds.finetune_label.resize(N);
  ds.group.resize(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<int> others;
    for (int k = 0; k < K; ++k)
      if (k != cls[n]) others.push_back(k);
    rng.shuffle(others);
    std::vector<int> set;
    if (spec.label_source == LabelSource::Class && flipped[n]) {
      set.assign(others.begin(), others.begin() + P);
    } else {
      set.push_back(cls[n]);
      set.insert(set.end(), others.begin(), others.begin() + (P - 1));
    }
    std::sort(set.begin(), set.end());
    int label;
    if (spec.label_source == LabelSource::Class) {
      label = cls[n];
    } else if (flipped[n]) {
      std::vector<int> outside;
      for (int k = 0; k < K; ++k)
        if (!std::binary_search(set.begin(), set.end(), k)) outside.push_back(k);
      label = outside[static_cast<std::size_t>(rng.below(outside.size()))];
    } else {
      label = set[static_cast<std::size_t>(rng.below(set.size()))];
    }
    ds.pretrain_sets[n] = std::move(set);
    ds.finetune_label[n] = label;
    ds.group[n] = flipped[n] ? Group::SMALL_STD : Group::LARGE_STD;
  }
  return ds;
}

/// CSV rows: D feature columns, semicolon-joined pretraining labels,
/// finetuning label. Groups follow from the labels.
inline void save_dataset_csv(const ControlledDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset '" + path + "'");
  for (std::size_t d = 0; d < ds.input_dim(); ++d) out << 'x' << d << ',';
  out << "pretrain_labels,finetune_label\n";
  for (std::size_t n = 0; n < ds.size(); ++n) {
    for (std::size_t d = 0; d < ds.input_dim(); ++d)
      out << format_double(ds.inputs(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n))) << ',';
    for (std::size_t i = 0; i < ds.pretrain_sets[n].size(); ++i) out << (i ? ";" : "") << ds.pretrain_sets[n][i];
    out << ',' << ds.finetune_label[n] << '\n';
  }
}

inline ControlledDataset load_dataset_csv(const std::string& path, int n_labels) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  std::string line;
  std::vector<std::vector<double>> cols;
  ControlledDataset ds;
  ds.n_labels = n_labels;
  std::size_t lineno = 0, D = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (lineno == 1 && !f.empty() && trim(f[0]).rfind('x', 0) == 0) continue;
    try {
      if (f.size() < 3) throw Error("expected at least 3 fields");
      if (D == 0) D = f.size() - 2;
      if (f.size() - 2 != D) throw Error("inconsistent feature count");
      std::vector<double> x(D);
      for (std::size_t d = 0; d < D; ++d) x[d] = parse_double(trim(f[d]));
      std::vector<int> set;
      for (const auto& t : split(trim(f[D]), ';')) set.push_back(static_cast<int>(parse_int(trim(t))));
      std::sort(set.begin(), set.end());
      const int y = static_cast<int>(parse_int(trim(f[D + 1])));
      const bool inside = std::binary_search(set.begin(), set.end(), y);
      cols.push_back(std::move(x));
      ds.pretrain_sets.push_back(std::move(set));
      ds.finetune_label.push_back(y);
      ds.group.push_back(inside ? Group::LARGE_STD : Group::SMALL_STD);
    } catch (const Error& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  ds.inputs.resize(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t n = 0; n < cols.size(); ++n)
    for (std::size_t d = 0; d < D; ++d) ds.inputs(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n)) = cols[n][d];
  ds.validate();
  return ds;
}

/// +1 for the finetuning label, the group's incorrect reward otherwise.
inline RewardSpec finetune_reward(const ControlledDataset& ds, double incorrect_flipped = -1.0,
                                  double incorrect_kept = -1.0) {
  std::vector<LabelRule> rules(ds.size());
  for (std::size_t n = 0; n < ds.size(); ++n)
    rules[n] = {{ds.finetune_label[n]}, 1.0, ds.group[n] == Group::SMALL_STD ? incorrect_flipped : incorrect_kept};
  return RewardSpec::label_match(std::move(rules));
}

inline RewardSpec finetune_reward(const ControlledDataset& ds, const ControlledSpec& spec) {
  return finetune_reward(ds, spec.incorrect_reward_flipped, spec.incorrect_reward_kept);
}

inline SoftmaxPolicy make_policy(const ControlledSpec& spec) {
  Vocabulary v{spec.n_labels, 1, 1};
  SoftmaxPolicy p = spec.linear_model ? SoftmaxPolicy::linear(v, spec.input_dim)
                                      : SoftmaxPolicy::mlp(v, spec.input_dim, spec.hidden);
  Rng rng = Rng::stream(spec.seed, 0x1417);
  p.init_uniform_fan_in(rng);
  return p;
}

enum class OptimizerKind { SGD, ADAM };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::ADAM;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch = 0;  // 0 means full batch
  std::size_t epochs = 5000;

  void validate() const {
    if (!(learning_rate > 0.0)) throw Error("learning_rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw Error("betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw Error("epsilon must be positive");
  }
};

struct OptimizerState {
  Vector m;
  Vector v;
  std::uint64_t t = 0;
};

/// Descent step theta -= lr * g.
inline void sgd_step(Vector& params, const Vector& grad, const OptimizerConfig& opt) {
  if (params.size() != grad.size()) throw ShapeError("gradient length mismatch");
  params.noalias() -= opt.learning_rate * grad;
}

/// Adam descent step with bias-corrected moments.
inline void adam_step(Vector& params, const Vector& grad, OptimizerState& st, const OptimizerConfig& opt) {
  if (params.size() != grad.size()) throw ShapeError("gradient length mismatch");
  if (st.m.size() != params.size()) {
    st.m = Vector::Zero(params.size());
    st.v = Vector::Zero(params.size());
    st.t = 0;
  }
  ++st.t;
  st.m = opt.beta1 * st.m + (1.0 - opt.beta1) * grad;
  st.v = opt.beta2 * st.v + (1.0 - opt.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.t));
  params.array() -= opt.learning_rate * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + opt.epsilon);
}

inline void optimizer_step(Vector& params, const Vector& grad, OptimizerState& st, const OptimizerConfig& opt) {
  if (opt.kind == OptimizerKind::SGD)
    sgd_step(params, grad, opt);
  else
    adam_step(params, grad, st, opt);
}

enum class TrainMode { RFT, SFT, PRETRAIN };

struct RftOptions {
  double temperature = 1.0;   // logits divided by T when computing the gradient
  double entropy_coef = 0.0;  // objective V + c H(p)
};

/// Loss-gradient logit cotangent of one single-token sample, built from the
/// same weight and cotangent routines as the grad module.
inline Vector sample_cotangent(const Vocabulary& vocab, const Vector& logits, TrainMode mode, const Vector& rewards,
                               const Vector& target, const RftOptions& o) {
  if (mode == TrainMode::RFT) {
    const PrefixTree t = expand_logits(vocab, logits, o.temperature);
    Vector w = value_weights(t.probs, rewards);
    if (o.entropy_coef != 0.0) w += o.entropy_coef * entropy_weights(t.probs);
    return -logit_cotangents(vocab, t, w).col(0) / o.temperature;
  }
  const PrefixTree t = expand_logits(vocab, logits);
  return logit_cotangents(vocab, t, -target).col(0);
}

inline Vector uniform_target(const std::vector<int>& labels, int K) {
  Vector t = Vector::Zero(K);
  for (int l : labels) t[l] = 1.0 / static_cast<double>(labels.size());
  return t;
}

struct TrainProblem {
  const ControlledDataset* data = nullptr;
  TrainMode mode = TrainMode::RFT;
  const RewardSpec* reward = nullptr;  // RFT
  RftOptions rft;

  Vector target(std::size_t n) const {
    const int K = data->n_labels;
    if (mode == TrainMode::PRETRAIN) return uniform_target(data->pretrain_sets[n], K);
    return Vector::Unit(K, data->finetune_label[n]);
  }
  Vector rewards(std::size_t n, const Vocabulary& v) const {
    return mode == TrainMode::RFT ? reward->rewards_for(n, v) : Vector();
  }
};

/// Mean loss gradient over `idx`; loss is -V for RFT and cross-entropy
/// otherwise.
inline Vector batch_gradient(const SoftmaxPolicy& policy, const TrainProblem& prob, const std::vector<std::size_t>& idx) {
  const auto& ds = *prob.data;
  Matrix feats(static_cast<Eigen::Index>(ds.input_dim()), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t b = 0; b < idx.size(); ++b) feats.col(static_cast<Eigen::Index>(b)) = ds.inputs.col(static_cast<Eigen::Index>(idx[b]));
  Tape tape;
  const Matrix logits = policy.forward(feats, &tape);
  Matrix cot(logits.rows(), logits.cols());
  const Vector none;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto n = idx[b];
    cot.col(static_cast<Eigen::Index>(b)) =
        sample_cotangent(policy.vocab(), logits.col(static_cast<Eigen::Index>(b)), prob.mode,
                         prob.mode == TrainMode::RFT ? prob.rewards(n, policy.vocab()) : none,
                         prob.mode == TrainMode::RFT ? none : prob.target(n), prob.rft);
  }
  cot /= static_cast<double>(idx.size());
  Vector g = Vector::Zero(static_cast<Eigen::Index>(policy.param_count()));
  policy.backward(tape, cot, g);
  return g;
}

/// Per-sample metrics of a policy on the dataset.
struct SampleStats {
  Vector reward_mean;  // under the finetuning reward
  Vector reward_std;
  Vector grad_norm;  // norm of the per-sample objective gradient
  Vector ce_loss;    // cross-entropy against the finetuning label
  Vector correct;    // 1 if argmax equals the finetuning label
};

inline SampleStats evaluate_samples(const SoftmaxPolicy& policy, const ControlledDataset& ds, const RewardSpec& reward,
                                    TrainMode grad_mode, const RftOptions& rft = {}, bool with_grad_norms = true) {
  const std::size_t N = ds.size();
  const Eigen::Index n = static_cast<Eigen::Index>(N);
  SampleStats s{Vector(n), Vector(n), Vector::Zero(n), Vector(n), Vector(n)};
  const Matrix logits = policy.forward(ds.inputs);
  const auto& v = policy.vocab();
  TrainProblem prob{&ds, grad_mode, &reward, rft};
  const Vector none;
  for (std::size_t i = 0; i < N; ++i) {
    const Eigen::Index ii = static_cast<Eigen::Index>(i);
    const Vector z = logits.col(ii);
    const Vector p = softmax(z);
    const RewardStats rs = stats_from(p, reward.rewards_for(i, v));
    s.reward_mean[ii] = rs.mean;
    s.reward_std[ii] = rs.std;
    const int y = ds.finetune_label[i];
    s.ce_loss[ii] = -(z[y] - z.maxCoeff() - std::log((z.array() - z.maxCoeff()).exp().sum()));
    Eigen::Index arg;
    z.maxCoeff(&arg);
    s.correct[ii] = arg == y ? 1.0 : 0.0;
    if (with_grad_norms) {
      Tape tape;
      policy.forward(ds.inputs.col(ii), &tape);
      const Vector c = sample_cotangent(v, z, grad_mode, grad_mode == TrainMode::RFT ? reward.rewards_for(i, v) : none,
                                        grad_mode == TrainMode::RFT ? none : prob.target(i), rft);
      Vector g = Vector::Zero(static_cast<Eigen::Index>(policy.param_count()));
      policy.backward(tape, Matrix(c), g);
      s.grad_norm[ii] = g.norm();
    }
  }
  return s;
}

struct TraceRow {
  std::size_t step = 0;
  std::string group;  // small_std, large_std or all
  double reward_mean = 0.0;
  double reward_std_mean = 0.0;
  double grad_norm_mean = 0.0;
  double ce_loss = 0.0;
  double accuracy = 0.0;
  double wall_seconds = 0.0;
};

struct TrainingTrace {
  std::vector<TraceRow> rows;
  std::optional<SampleStats> initial;
  std::optional<SampleStats> final;

  std::vector<TraceRow> group_rows(const std::string& g) const {
    std::vector<TraceRow> out;
    for (const auto& r : rows)
      if (r.group == g) out.push_back(r);
    return out;
  }
};

inline std::vector<TraceRow> summarize_groups(const SampleStats& s, const ControlledDataset& ds, std::size_t step,
                                              double wall) {
  std::vector<TraceRow> out;
  for (const char* g : {"small_std", "large_std", "all"}) {
    TraceRow r{step, g};
    double count = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (std::string(g) != "all" && to_string(ds.group[i]) != g) continue;
      const Eigen::Index ii = static_cast<Eigen::Index>(i);
      r.reward_mean += s.reward_mean[ii];
      r.reward_std_mean += s.reward_std[ii];
      r.grad_norm_mean += s.grad_norm[ii];
      r.ce_loss += s.ce_loss[ii];
      r.accuracy += s.correct[ii];
      ++count;
    }
    if (count > 0) {
      r.reward_mean /= count;
      r.reward_std_mean /= count;
      r.grad_norm_mean /= count;
      r.ce_loss /= count;
      r.accuracy /= count;
    }
    r.wall_seconds = wall;
    out.push_back(r);
  }
  return out;
}

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what)
      : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainOptions {
  std::size_t log_every = 100;
  std::uint64_t shuffle_seed = 0;
  bool grad_norms = true;
  RftOptions rft;
  const std::vector<std::size_t>* subset = nullptr;  // train on these samples only
};

/// Generic epoch loop shared by pretraining, RFT and SFT. Metrics are
/// always computed on the full dataset.
inline TrainingTrace train(SoftmaxPolicy& policy, const ControlledDataset& ds, const RewardSpec& reward, TrainMode mode,
                           const OptimizerConfig& opt, const TrainOptions& to = {}) {
  opt.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  TrainProblem prob{&ds, mode, &reward, to.rft};
  const TrainMode metric_mode = mode == TrainMode::PRETRAIN ? TrainMode::SFT : mode;
  TrainingTrace trace;
  auto log = [&](std::size_t step, bool last) {
    SampleStats s = evaluate_samples(policy, ds, reward, metric_mode, to.rft, to.grad_norms);
    for (auto& r : summarize_groups(s, ds, step, wall())) trace.rows.push_back(r);
    if (step == 0) trace.initial = s;
    if (last) trace.final = std::move(s);
  };
  std::vector<std::size_t> all;
  if (to.subset) {
    all = *to.subset;
  } else {
    all.resize(ds.size());
    std::iota(all.begin(), all.end(), 0);
  }
  if (all.empty()) throw Error("training set is empty");
  const std::size_t bs = opt.batch == 0 ? all.size() : std::min(opt.batch, all.size());
  Rng rng(to.shuffle_seed);
  OptimizerState st;
  const std::size_t every = std::max<std::size_t>(1, to.log_every);
  log(0, opt.epochs == 0);
  Vector params = policy.values();
  for (std::size_t e = 1; e <= opt.epochs; ++e) {
    std::vector<std::size_t> order = all;
    if (bs < all.size()) rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(start + bs, order.size())));
      const Vector g = batch_gradient(policy, prob, idx);
      if (!g.allFinite()) throw TrainingDiverged(e, "non-finite gradient");
      optimizer_step(params, g, st, opt);
      if (!params.allFinite()) throw TrainingDiverged(e, "non-finite parameters");
      policy.params().values = params;
    }
    if (e % every == 0 || e == opt.epochs) log(e, e == opt.epochs);
  }
  return trace;
}

inline TrainingTrace rft_train(SoftmaxPolicy& policy, const ControlledDataset& ds, const RewardSpec& reward,
                               const OptimizerConfig& opt, std::size_t log_every = 100, const RftOptions& rft = {}) {
  TrainOptions to;
  to.log_every = log_every;
  to.rft = rft;
  return train(policy, ds, reward, TrainMode::RFT, opt, to);
}

inline TrainingTrace sft_train(SoftmaxPolicy& policy, const ControlledDataset& ds, const RewardSpec& reward,
                               const OptimizerConfig& opt, std::size_t log_every = 100) {
  TrainOptions to;
  to.log_every = log_every;
  return train(policy, ds, reward, TrainMode::SFT, opt, to);
}

struct PretrainResult {
  SoftmaxPolicy policy;
  double final_loss = 0.0;      // mean cross-entropy to the uniform pretraining target
  double target_entropy = 0.0;  // mean entropy of that target
  bool converged = false;       // final_loss - target_entropy <= 0.05
  std::size_t epochs = 0;
};

inline double pretrain_loss(const SoftmaxPolicy& policy, const ControlledDataset& ds) {
  const Matrix logits = policy.forward(ds.inputs);
  double s = 0.0;
  for (std::size_t n = 0; n < ds.size(); ++n) {
    const Vector z = logits.col(static_cast<Eigen::Index>(n));
    const double lse = z.maxCoeff() + std::log((z.array() - z.maxCoeff()).exp().sum());
    for (int l : ds.pretrain_sets[n]) s -= (z[l] - lse) / static_cast<double>(ds.pretrain_sets[n].size());
  }
  return s / static_cast<double>(ds.size());
}

inline PretrainResult pretrain(const ControlledSpec& spec, const ControlledDataset& ds, const OptimizerConfig& opt) {
  ds.validate();
  SoftmaxPolicy policy = make_policy(spec);
  const RewardSpec reward = finetune_reward(ds, spec);
  TrainOptions to;
  to.log_every = std::max<std::size_t>(opt.epochs, 1);
  to.grad_norms = false;
  to.shuffle_seed = spec.seed ^ 0x5eed;
  train(policy, ds, reward, TrainMode::PRETRAIN, opt, to);
  PretrainResult r{policy};
  r.final_loss = pretrain_loss(policy, ds);
  for (const auto& s : ds.pretrain_sets) r.target_entropy += std::log(static_cast<double>(s.size()));
  r.target_entropy /= static_cast<double>(ds.size());
  r.converged = r.final_loss - r.target_entropy <= 0.05;
  r.epochs = opt.epochs;
  return r;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline double group_median(const Vector& values, const ControlledDataset& ds, Group g) {
  std::vector<double> v;
  for (std::size_t i : ds.members(g)) v.push_back(values[static_cast<Eigen::Index>(i)]);
  return median(std::move(v));
}

inline double group_mean(const Vector& values, const ControlledDataset& ds, Group g) {
  const auto m = ds.members(g);
  if (m.empty()) throw Error("empty group");
  double s = 0.0;
  for (std::size_t i : m) s += values[static_cast<Eigen::Index>(i)];
  return s / static_cast<double>(m.size());
}

/// Samples with reward std below `std_threshold` and mean below `mean_cutoff`.
inline std::size_t count_small_std_suboptimal(const SampleStats& s, double std_threshold = 0.1,
                                              double mean_cutoff = 0.9) {
  std::size_t c = 0;
  for (Eigen::Index i = 0; i < s.reward_std.size(); ++i)
    if (s.reward_std[i] < std_threshold && s.reward_mean[i] < mean_cutoff) ++c;
  return c;
}

struct MitigationReport {
  double steps_fraction = 1.0;
  double samples_fraction = 1.0;
  std::size_t sft_epochs = 0;
  std::size_t sft_samples = 0;
  std::size_t count_before = 0;
  std::size_t count_after = 0;
  double reward_before = 0.0;
  double reward_after_sft = 0.0;
  double final_reward = 0.0;
  double baseline_final_reward = 0.0;  // RFT alone with the same RFT budget
  double std_threshold = 0.1;
  std::uint64_t seed = 0;
};

struct MitigationResult {
  TrainingTrace sft_trace;
  TrainingTrace rft_trace;
  MitigationReport report;
  SoftmaxPolicy policy;
};

/// Final mean reward of RFT alone from `policy` with budget `opt_rft`.
inline double rft_baseline(const SoftmaxPolicy& policy, const ControlledDataset& ds, const RewardSpec& reward,
                           const OptimizerConfig& opt_rft, std::size_t log_every = 100) {
  SoftmaxPolicy p = policy;
  TrainOptions to;
  to.log_every = log_every;
  to.grad_norms = false;
  const TrainingTrace t = train(p, ds, reward, TrainMode::RFT, opt_rft, to);
  return t.final->reward_mean.mean();
}

inline MitigationResult partial_sft_then_rft(const SoftmaxPolicy& policy, const ControlledDataset& ds,
                                             const RewardSpec& reward, double steps_fraction, double samples_fraction,
                                             const OptimizerConfig& opt_sft, const OptimizerConfig& opt_rft,
                                             std::uint64_t seed, std::optional<double> baseline = std::nullopt,
                                             std::size_t log_every = 100, double std_threshold = 0.1) {
  if (!(steps_fraction > 0.0 && steps_fraction <= 1.0) || !(samples_fraction > 0.0 && samples_fraction <= 1.0))
    throw Error("SFT fractions must lie in (0, 1]");
  MitigationResult res{{}, {}, {}, policy};
  MitigationReport& rep = res.report;
  rep.steps_fraction = steps_fraction;
  rep.samples_fraction = samples_fraction;
  rep.std_threshold = std_threshold;
  rep.seed = seed;

  std::vector<std::size_t> subset(ds.size());
  std::iota(subset.begin(), subset.end(), 0);
  const std::size_t k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(samples_fraction * static_cast<double>(ds.size()))));
  if (k < ds.size()) {
    Rng rng(seed);
    rng.shuffle(subset);
    subset.resize(k);
    std::sort(subset.begin(), subset.end());
  }
  rep.sft_samples = k;
  OptimizerConfig sft = opt_sft;
  sft.epochs = static_cast<std::size_t>(std::llround(steps_fraction * static_cast<double>(opt_sft.epochs)));
  rep.sft_epochs = sft.epochs;

  TrainOptions to;
  to.log_every = log_every;
  to.subset = &subset;
  to.shuffle_seed = seed;
  res.sft_trace = train(res.policy, ds, reward, TrainMode::SFT, sft, to);
  rep.count_before = count_small_std_suboptimal(*res.sft_trace.initial, std_threshold);
  rep.reward_before = res.sft_trace.initial->reward_mean.mean();
  const SampleStats& after = res.sft_trace.final ? *res.sft_trace.final : *res.sft_trace.initial;
  rep.count_after = count_small_std_suboptimal(after, std_threshold);
  rep.reward_after_sft = after.reward_mean.mean();

  TrainOptions tr;
  tr.log_every = log_every;
  tr.shuffle_seed = seed + 1;
  res.rft_trace = train(res.policy, ds, reward, TrainMode::RFT, opt_rft, tr);
  rep.final_reward = res.rft_trace.final->reward_mean.mean();
  rep.baseline_final_reward = baseline ? *baseline : rft_baseline(policy, ds, reward, opt_rft, log_every);
  return res;
}

inline std::string trace_csv(const TrainingTrace& t) {
  std::string out = "step,group,reward_mean,reward_std_mean,grad_norm_mean,ce_loss,accuracy\n";
  for (const auto& r : t.rows)
    out += std::to_string(r.step) + ',' + r.group + ',' + format_double(r.reward_mean) + ',' +
           format_double(r.reward_std_mean) + ',' + format_double(r.grad_norm_mean) + ',' + format_double(r.ce_loss) +
           ',' + format_double(r.accuracy) + '\n';
  return out;
}

inline std::vector<TraceRow> parse_trace_csv(const std::string& text) {
  std::vector<TraceRow> rows;
  std::size_t lineno = 0;
  for (const auto& raw : split(text, '\n')) {
    ++lineno;
    const std::string line = trim(raw);
    if (line.empty() || lineno == 1) continue;
    auto f = split(line, ',');
    if (f.size() != 7) throw Error("trace line " + std::to_string(lineno) + ": expected 7 fields");
    TraceRow r;
    r.step = static_cast<std::size_t>(parse_int(f[0]));
    r.group = f[1];
    r.reward_mean = parse_double(f[2]);
    r.reward_std_mean = parse_double(f[3]);
    r.grad_norm_mean = parse_double(f[4]);
    r.ce_loss = parse_double(f[5]);
    r.accuracy = parse_double(f[6]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace rftlab
