#pragma once

#include "rftlab/common.hpp"
#include "rftlab/rng.hpp"

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

namespace rftlab {

struct Vocabulary {
  int size = 2;
  int out_len = 1;
  int in_len = 1;
  std::size_t cap = 1'000'000;

  void validate() const {
    if (size < 2) throw ShapeError("vocabulary size must be at least 2");
    if (out_len < 1) throw ShapeError("output length must be at least 1");
    if (in_len < 1) throw ShapeError("input length must be at least 1");
    (void)output_count();
  }

  /// |X|^l, throwing CapExceeded once it passes the cap.
  std::size_t power(int l) const {
    std::size_t n = 1;
    for (int i = 0; i < l; ++i) {
      if (n > cap / static_cast<std::size_t>(size)) {
        std::size_t required = n;
        for (int j = i; j < l && required <= (std::size_t{1} << 62) / size; ++j) required *= size;
        throw CapExceeded(required, cap);
      }
      n *= static_cast<std::size_t>(size);
    }
    return n;
  }

  std::size_t output_count() const { return power(out_len); }

  /// Number of prefixes of length 0..out_len-1.
  std::size_t prefix_count() const { return level_offset(out_len); }

  /// Global index of the first prefix of length l.
  std::size_t level_offset(int l) const {
    std::size_t off = 0;
    for (int j = 0; j < l; ++j) off += power(j);
    return off;
  }

  std::size_t prefix_index(Tokens prefix) const {
    if (static_cast<int>(prefix.size()) >= out_len)
      throw ShapeError("prefix length " + std::to_string(prefix.size()) +
                       " must be below output length " + std::to_string(out_len));
    return level_offset(static_cast<int>(prefix.size())) + lex_index(prefix);
  }

  Sequence prefix_at(std::size_t index) const {
    int l = 0;
    while (l < out_len && index >= level_offset(l + 1)) ++l;
    if (l >= out_len) throw ShapeError("prefix index out of range");
    return decode(index - level_offset(l), l);
  }

  std::size_t output_index(Tokens y) const {
    if (static_cast<int>(y.size()) != out_len)
      throw ShapeError("output sequence has length " + std::to_string(y.size()) +
                       ", expected " + std::to_string(out_len));
    return lex_index(y);
  }

  Sequence output_at(std::size_t index) const { return decode(index, out_len); }

  bool operator==(const Vocabulary&) const = default;

 private:
  std::size_t lex_index(Tokens seq) const {
    std::size_t idx = 0;
    for (int t : seq) {
      if (t < 0 || t >= size) throw ShapeError("token " + std::to_string(t) + " out of range");
      idx = idx * static_cast<std::size_t>(size) + static_cast<std::size_t>(t);
    }
    return idx;
  }

  Sequence decode(std::size_t idx, int len) const {
    Sequence s(static_cast<std::size_t>(len));
    for (int i = len - 1; i >= 0; --i) {
      s[static_cast<std::size_t>(i)] = static_cast<int>(idx % static_cast<std::size_t>(size));
      idx /= static_cast<std::size_t>(size);
    }
    return s;
  }
};

inline std::vector<Sequence> enumerate_outputs(const Vocabulary& vocab) {
  const std::size_t n = vocab.output_count();
  std::vector<Sequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(vocab.output_at(i));
  return out;
}

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
  bool operator==(const ParamBlock&) const = default;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

/// Flat parameters plus a row-major layout of named blocks.
struct ParamVector {
  Vector values;
  std::vector<ParamBlock> layout;

  std::size_t size() const { return static_cast<std::size_t>(values.size()); }

  void add_block(std::string name, std::size_t rows, std::size_t cols) {
    std::size_t off = layout.empty() ? 0 : layout.back().offset + layout.back().size();
    layout.push_back({std::move(name), off, rows, cols});
    values.conservativeResize(static_cast<Eigen::Index>(off + rows * cols));
    values.tail(static_cast<Eigen::Index>(rows * cols)).setZero();
  }

  const ParamBlock& find(const std::string& name) const {
    for (const auto& b : layout)
      if (b.name == name) return b;
    throw ShapeError("no parameter block named '" + name + "'");
  }

  RowMap block(const std::string& name) { return view(values, find(name)); }
  ConstRowMap block(const std::string& name) const { return view(values, find(name)); }

  static RowMap view(Vector& v, const ParamBlock& b) {
    return RowMap(v.data() + b.offset, static_cast<Eigen::Index>(b.rows),
                  static_cast<Eigen::Index>(b.cols));
  }
  static ConstRowMap view(const Vector& v, const ParamBlock& b) {
    return ConstRowMap(v.data() + b.offset, static_cast<Eigen::Index>(b.rows),
                       static_cast<Eigen::Index>(b.cols));
  }

  void validate() const {
    std::size_t next = 0;
    for (const auto& b : layout) {
      if (b.offset != next) throw ShapeError("layout blocks do not partition the parameters");
      next += b.size();
    }
    if (next != size()) throw ShapeError("layout does not cover all parameters");
    if (!values.allFinite()) throw ShapeError("non-finite parameter value");
  }
};

/// An input: integer id (tabular rows, reward lookup) and feature vector.
struct Input {
  std::size_t id = 0;
  Vector features;
};

enum class PolicyKind { TabularAR, Linear, MLP };

inline std::string to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::TabularAR: return "tabular";
    case PolicyKind::Linear: return "linear";
    case PolicyKind::MLP: return "mlp";
  }
  return "?";
}

inline PolicyKind policy_kind_from_string(const std::string& s) {
  if (s == "tabular") return PolicyKind::TabularAR;
  if (s == "linear") return PolicyKind::Linear;
  if (s == "mlp") return PolicyKind::MLP;
  throw Error("unknown policy kind '" + s + "'");
}

inline Vector softmax(const Vector& z) {
  Vector e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

/// Column-wise softmax.
inline Matrix softmax_cols(const Matrix& z) {
  Matrix p(z.rows(), z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    auto e = (z.col(j).array() - z.col(j).maxCoeff()).exp();
    p.col(j) = e / e.sum();
  }
  return p;
}

/// Activations saved by a batched forward pass.
struct Tape {
  std::vector<Matrix> acts;  // acts[0] = input features, acts[i] = post-ReLU of layer i
  Matrix logits;
};

/// Softmax policy over X^{L_out}. Linear and MLP policies read the feature
/// vector [x; onehot(y_1); ...; onehot(y_{L_out-1})] with zeros for
/// positions not yet generated.
class SoftmaxPolicy {
 public:
  static SoftmaxPolicy tabular(const Vocabulary& vocab, std::size_t n_inputs) {
    vocab.validate();
    if (n_inputs == 0) throw ShapeError("tabular policy needs at least one input");
    SoftmaxPolicy p(PolicyKind::TabularAR, vocab);
    p.n_inputs_ = n_inputs;
    p.params_.add_block("logits", n_inputs * vocab.prefix_count(), static_cast<std::size_t>(vocab.size));
    return p;
  }

  static SoftmaxPolicy linear(const Vocabulary& vocab, std::size_t input_dim) {
    vocab.validate();
    if (input_dim == 0) throw ShapeError("linear policy needs input_dim >= 1");
    SoftmaxPolicy p(PolicyKind::Linear, vocab);
    p.input_dim_ = input_dim;
    p.params_.add_block("W", static_cast<std::size_t>(vocab.size), p.feature_dim());
    return p;
  }

  static SoftmaxPolicy mlp(const Vocabulary& vocab, std::size_t input_dim,
                           std::vector<std::size_t> hidden) {
    vocab.validate();
    if (input_dim == 0) throw ShapeError("mlp policy needs input_dim >= 1");
    for (auto h : hidden)
      if (h == 0) throw ShapeError("mlp hidden widths must be positive");
    SoftmaxPolicy p(PolicyKind::MLP, vocab);
    p.input_dim_ = input_dim;
    p.hidden_ = std::move(hidden);
    auto dims = p.layer_dims();
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      p.params_.add_block("W" + std::to_string(i), dims[i + 1], dims[i]);
      p.params_.add_block("b" + std::to_string(i), dims[i + 1], 1);
    }
    return p;
  }

  PolicyKind kind() const { return kind_; }
  const Vocabulary& vocab() const { return vocab_; }
  const ParamVector& params() const { return params_; }
  ParamVector& params() { return params_; }
  const Vector& values() const { return params_.values; }
  std::size_t param_count() const { return params_.size(); }
  std::size_t n_inputs() const { return n_inputs_; }
  std::size_t input_dim() const { return input_dim_; }
  const std::vector<std::size_t>& hidden() const { return hidden_; }

  std::size_t feature_dim() const {
    return input_dim_ + static_cast<std::size_t>(vocab_.out_len - 1) * static_cast<std::size_t>(vocab_.size);
  }

  SoftmaxPolicy with_values(const Vector& v) const {
    if (v.size() != params_.values.size()) throw ShapeError("parameter vector length mismatch");
    SoftmaxPolicy p = *this;
    p.params_.values = v;
    return p;
  }

  bool same_architecture(const SoftmaxPolicy& o) const {
    return kind_ == o.kind_ && vocab_ == o.vocab_ && n_inputs_ == o.n_inputs_ &&
           input_dim_ == o.input_dim_ && hidden_ == o.hidden_ && params_.layout == o.params_.layout;
  }

  /// Weights and biases Uniform(-a, a) with a = scale / sqrt(fan_in) of the
  /// layer they belong to. Tabular logits use fan_in 1.
  void init_uniform_fan_in(Rng& rng, double scale = 1.0) {
    double fan_in = 1.0;
    for (const auto& b : params_.layout) {
      RowMap m = ParamVector::view(params_.values, b);
      if (b.name[0] == 'W') fan_in = static_cast<double>(b.cols);
      const double a = scale / std::sqrt(fan_in);
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-a, a);
    }
  }

  void check_input(const Input& x) const {
    if (kind_ == PolicyKind::TabularAR) {
      if (x.id >= n_inputs_)
        throw ShapeError("input id " + std::to_string(x.id) + " out of range for tabular policy with " +
                         std::to_string(n_inputs_) + " inputs");
    } else if (static_cast<std::size_t>(x.features.size()) != input_dim_) {
      throw ShapeError("input has " + std::to_string(x.features.size()) + " features, policy expects " +
                       std::to_string(input_dim_));
    }
  }

  Vector features(const Input& x, Tokens prefix) const {
    Vector f = Vector::Zero(static_cast<Eigen::Index>(feature_dim()));
    f.head(static_cast<Eigen::Index>(input_dim_)) = x.features;
    for (std::size_t i = 0; i < prefix.size(); ++i) {
      const int t = prefix[i];
      if (t < 0 || t >= vocab_.size) throw ShapeError("token out of range");
      f[static_cast<Eigen::Index>(input_dim_ + i * static_cast<std::size_t>(vocab_.size) + static_cast<std::size_t>(t))] = 1.0;
    }
    return f;
  }

  /// Feature matrix with one column per prefix index.
  Matrix prefix_features(const Input& x) const {
    const std::size_t np = vocab_.prefix_count();
    Matrix f(static_cast<Eigen::Index>(feature_dim()), static_cast<Eigen::Index>(np));
    for (std::size_t j = 0; j < np; ++j) f.col(static_cast<Eigen::Index>(j)) = features(x, vocab_.prefix_at(j));
    return f;
  }

  Vector logits(const Input& x, Tokens prefix) const {
    check_input(x);
    if (static_cast<int>(prefix.size()) >= vocab_.out_len)
      throw ShapeError("prefix length must be below output length");
    if (kind_ == PolicyKind::TabularAR)
      return tabular_block().row(static_cast<Eigen::Index>(tabular_row(x, vocab_.prefix_index(prefix)))).transpose();
    return forward(features(x, prefix));
  }

  /// Logits for every prefix, one column per prefix index.
  Matrix prefix_logits(const Input& x) const {
    check_input(x);
    if (kind_ == PolicyKind::TabularAR) {
      const std::size_t np = vocab_.prefix_count();
      return tabular_block()
          .middleRows(static_cast<Eigen::Index>(tabular_row(x, 0)), static_cast<Eigen::Index>(np))
          .transpose();
    }
    return forward(prefix_features(x));
  }

  /// grad += sum_j J_{prefix j}^T cot.col(j).
  void accumulate_prefix_vjp(const Input& x, const Matrix& cot, Vector& grad) const {
    check_input(x);
    if (kind_ == PolicyKind::TabularAR) {
      RowMap g = ParamVector::view(grad, params_.layout[0]);
      g.middleRows(static_cast<Eigen::Index>(tabular_row(x, 0)), cot.cols()) += cot.transpose();
      return;
    }
    Tape tape;
    forward(prefix_features(x), &tape);
    backward(tape, cot, grad);
  }

  void accumulate_vjp(const Input& x, Tokens prefix, const Vector& cot, Vector& grad) const {
    check_input(x);
    if (kind_ == PolicyKind::TabularAR) {
      RowMap g = ParamVector::view(grad, params_.layout[0]);
      g.row(static_cast<Eigen::Index>(tabular_row(x, vocab_.prefix_index(prefix)))) += cot.transpose();
      return;
    }
    Tape tape;
    forward(Matrix(features(x, prefix)), &tape);
    backward(tape, Matrix(cot), grad);
  }

  /// Dense Jacobian of the logits at `prefix` with respect to all parameters.
  Matrix jacobian(const Input& x, Tokens prefix) const {
    const Eigen::Index K = vocab_.size;
    Matrix J = Matrix::Zero(K, static_cast<Eigen::Index>(param_count()));
    for (Eigen::Index k = 0; k < K; ++k) {
      Vector g = Vector::Zero(static_cast<Eigen::Index>(param_count()));
      accumulate_vjp(x, prefix, Vector::Unit(K, k), g);
      J.row(k) = g.transpose();
    }
    return J;
  }

  /// Batched network forward pass over feature columns (Linear / MLP).
  Matrix forward(const Matrix& feats, Tape* tape = nullptr) const {
    if (kind_ == PolicyKind::TabularAR) throw ShapeError("tabular policy has no feature path");
    if (static_cast<std::size_t>(feats.rows()) != feature_dim()) throw ShapeError("feature dimension mismatch");
    if (kind_ == PolicyKind::Linear) {
      Matrix out = ParamVector::view(params_.values, params_.layout[0]) * feats;
      if (tape) {
        tape->acts = {feats};
        tape->logits = out;
      }
      return out;
    }
    const std::size_t layers = hidden_.size() + 1;
    Matrix a = feats;
    if (tape) tape->acts.assign(1, feats);
    for (std::size_t i = 0; i < layers; ++i) {
      ConstRowMap W = ParamVector::view(params_.values, params_.layout[2 * i]);
      ConstRowMap b = ParamVector::view(params_.values, params_.layout[2 * i + 1]);
      Matrix z = W * a;
      z.colwise() += b.col(0);
      if (i + 1 < layers) {
        a = z.cwiseMax(0.0);
        if (tape) tape->acts.push_back(a);
      } else {
        if (tape) tape->logits = z;
        return z;
      }
    }
    return a;
  }

  /// grad += sum over columns of J^T cot, using activations from `tape`.
  void backward(const Tape& tape, const Matrix& cot, Vector& grad) const {
    if (static_cast<std::size_t>(grad.size()) != param_count()) throw ShapeError("gradient length mismatch");
    if (kind_ == PolicyKind::Linear) {
      RowMap g = ParamVector::view(grad, params_.layout[0]);
      g.noalias() += cot * tape.acts[0].transpose();
      return;
    }
    const std::size_t layers = hidden_.size() + 1;
    Matrix dz = cot;
    for (std::size_t i = layers; i-- > 0;) {
      const Matrix& a = tape.acts[i];
      RowMap gW = ParamVector::view(grad, params_.layout[2 * i]);
      RowMap gb = ParamVector::view(grad, params_.layout[2 * i + 1]);
      gW.noalias() += dz * a.transpose();
      gb.col(0) += dz.rowwise().sum();
      if (i == 0) break;
      ConstRowMap W = ParamVector::view(params_.values, params_.layout[2 * i]);
      Matrix da = W.transpose() * dz;
      dz = (a.array() > 0.0).select(da, 0.0);
    }
  }

  std::vector<std::size_t> layer_dims() const {
    std::vector<std::size_t> d{feature_dim()};
    d.insert(d.end(), hidden_.begin(), hidden_.end());
    d.push_back(static_cast<std::size_t>(vocab_.size));
    return d;
  }

 private:
  SoftmaxPolicy(PolicyKind k, const Vocabulary& v) : kind_(k), vocab_(v) {}

  ConstRowMap tabular_block() const { return ParamVector::view(params_.values, params_.layout[0]); }

  std::size_t tabular_row(const Input& x, std::size_t prefix_index) const {
    return x.id * vocab_.prefix_count() + prefix_index;
  }

  PolicyKind kind_;
  Vocabulary vocab_;
  ParamVector params_;
  std::size_t n_inputs_ = 0;
  std::size_t input_dim_ = 0;
  std::vector<std::size_t> hidden_;
};

struct DistributionTable {
  std::vector<Sequence> outputs;
  Vector probs;
};

/// Next-token distributions of every prefix and the induced output
/// distribution, computed top-down over the prefix tree.
struct PrefixTree {
  Matrix cond;         // |X| x prefix_count
  Vector prefix_prob;  // probability of generating each prefix
  Vector probs;        // probability of each output, lexicographic order
};

inline PrefixTree expand_logits(const Vocabulary& vocab, const Matrix& logits, double temperature = 1.0) {
  PrefixTree t;
  t.cond = softmax_cols(temperature == 1.0 ? logits : Matrix(logits / temperature));
  const std::size_t K = static_cast<std::size_t>(vocab.size);
  t.prefix_prob = Vector::Zero(static_cast<Eigen::Index>(vocab.prefix_count()));
  t.probs = Vector::Zero(static_cast<Eigen::Index>(vocab.output_count()));
  t.prefix_prob[0] = 1.0;
  for (int l = 0; l < vocab.out_len; ++l) {
    const std::size_t off = vocab.level_offset(l), n = vocab.power(l);
    const bool leaf = l + 1 == vocab.out_len;
    const std::size_t child_off = leaf ? 0 : vocab.level_offset(l + 1);
    Vector& dst = leaf ? t.probs : t.prefix_prob;
    for (std::size_t i = 0; i < n; ++i) {
      const double pp = t.prefix_prob[static_cast<Eigen::Index>(off + i)];
      for (std::size_t k = 0; k < K; ++k)
        dst[static_cast<Eigen::Index>(child_off + i * K + k)] =
            pp * t.cond(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(off + i));
    }
  }
  return t;
}

inline PrefixTree expand(const SoftmaxPolicy& policy, const Input& x, double temperature = 1.0) {
  return expand_logits(policy.vocab(), policy.prefix_logits(x), temperature);
}

inline DistributionTable distribution(const SoftmaxPolicy& policy, const Input& x) {
  return {enumerate_outputs(policy.vocab()), expand(policy, x).probs};
}

/// Product of per-step softmax probabilities along y.
inline double seq_prob(const SoftmaxPolicy& policy, const Input& x, Tokens y) {
  const auto& v = policy.vocab();
  if (static_cast<int>(y.size()) != v.out_len) throw ShapeError("output sequence length mismatch");
  double p = 1.0;
  for (std::size_t l = 0; l < y.size(); ++l) {
    Vector q = softmax(policy.logits(x, y.first(l)));
    if (y[l] < 0 || y[l] >= v.size) throw ShapeError("token out of range");
    p *= q[y[l]];
  }
  return p;
}

/// max over prefixes of the largest singular value of the logit Jacobian.
inline double gamma(const SoftmaxPolicy& policy, const Input& x) {
  const auto& v = policy.vocab();
  double g = 0.0;
  for (std::size_t j = 0; j < v.prefix_count(); ++j) {
    Matrix J = policy.jacobian(x, v.prefix_at(j));
    Eigen::JacobiSVD<Matrix> svd(J);
    g = std::max(g, svd.singularValues()(0));
  }
  return g;
}

}  // namespace rftlab
