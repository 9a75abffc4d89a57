#pragma once

// Downstream measurements on frozen embeddings (logistic regression, link
// prediction) and on a poisoned graph (supervised GCN).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "clga/adam.hpp"
#include "clga/contrastive.hpp"
#include "clga/error.hpp"
#include "clga/graph.hpp"
#include "clga/random.hpp"
#include "clga/tensor.hpp"

namespace clga {

struct NodeSplit {
  std::vector<Index> train;
  std::vector<Index> val;
  std::vector<Index> test;

  // Disjoint, in range, and (if `exhaustive`) covering all n nodes.
  void validate(Index n, bool exhaustive = false) const {
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::size_t total = 0;
    for (const auto* part : {&train, &val, &test}) {
      for (Index i : *part) {
        if (i < 0 || i >= n) throw InvalidArgument("node split: node " + std::to_string(i) + " out of range");
        if (seen[static_cast<std::size_t>(i)]++) {
          throw InvalidArgument("node split: node " + std::to_string(i) + " appears twice");
        }
      }
      total += part->size();
    }
    if (exhaustive && total != static_cast<std::size_t>(n)) throw InvalidArgument("node split: not exhaustive");
  }
};

struct SplitSpec {
  double train_fraction = 0.1;
  double val_fraction = 0.1;  // the rest is test
  double edge_train_fraction = 0.7;
  double edge_test_fraction = 0.2;  // the rest is validation
  std::uint64_t seed = 0;

  void validate() const {
    auto ok = [](double a, double b) { return a > 0.0 && b > 0.0 && a + b < 1.0; };
    if (!ok(train_fraction, val_fraction)) throw InvalidArgument("split spec: node fractions must leave a test part");
    if (!ok(edge_train_fraction, edge_test_fraction)) {
      throw InvalidArgument("split spec: edge fractions must leave a validation part");
    }
  }
};

// Per-class shuffle, then the first round(f * count) nodes of each class go to
// train and the next to val. Every class with at least 3 nodes is represented
// in all three parts.
inline NodeSplit stratified_node_split(const std::vector<int>& labels, double train_fraction, double val_fraction,
                                       Rng& rng) {
  if (labels.empty()) throw InvalidArgument("stratified_node_split: no labels");
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw InvalidArgument("stratified_node_split: negative label");
    by_class[static_cast<std::size_t>(labels[i])].push_back(static_cast<Index>(i));
  }
  NodeSplit s;
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    const auto count = static_cast<Index>(members.size());
    Index n_train = std::lround(train_fraction * static_cast<double>(count));
    Index n_val = std::lround(val_fraction * static_cast<double>(count));
    if (count >= 3) {
      n_train = std::clamp<Index>(n_train, 1, count - 2);
      n_val = std::clamp<Index>(n_val, 1, count - 1 - n_train);
    } else {
      n_train = std::min(n_train, count);
      n_val = std::min(n_val, count - n_train);
    }
    for (Index k = 0; k < count; ++k) {
      auto& dst = k < n_train ? s.train : (k < n_train + n_val ? s.val : s.test);
      dst.push_back(members[static_cast<std::size_t>(k)]);
    }
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

struct EdgeSplit {
  std::vector<Edge> train;
  std::vector<Edge> test;
  std::vector<Edge> val;
  std::vector<Edge> test_negatives;  // same count as test
  std::vector<Edge> val_negatives;   // same count as val

  // `adjacency` with every held-out pair (positive or negative) removed.
  Matrix training_adjacency(Matrix adjacency) const {
    for (const auto* part : {&test, &val, &test_negatives, &val_negatives})
      for (auto [i, j] : *part) adjacency(i, j) = adjacency(j, i) = 0.0;
    return adjacency;
  }
};

// Shuffles the edges of `g` into train/test/val and samples, once, as many
// distinct non-edges as there are test and val positives.
inline EdgeSplit split_edges(const Graph& g, double train_fraction, double test_fraction, Rng& rng) {
  std::vector<Edge> edges = g.edges();
  if (edges.empty()) throw InvalidArgument("split_edges: graph has no edges");
  std::shuffle(edges.begin(), edges.end(), rng);
  const auto m = static_cast<double>(edges.size());
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * m));
  const auto n_test = static_cast<std::size_t>(std::floor(test_fraction * m));
  if (n_train == 0) throw InvalidArgument("split_edges: no training edges");
  EdgeSplit s;
  s.train.assign(edges.begin(), edges.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(edges.begin() + static_cast<std::ptrdiff_t>(n_train),
                edges.begin() + static_cast<std::ptrdiff_t>(n_train + n_test));
  s.val.assign(edges.begin() + static_cast<std::ptrdiff_t>(n_train + n_test), edges.end());

  const Index n = g.num_nodes();
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  if (static_cast<double>(s.test.size() + s.val.size()) > pairs - m) {
    throw InvalidArgument("split_edges: not enough non-edges to sample negatives");
  }
  std::set<Edge> used;
  std::uniform_int_distribution<Index> node(0, n - 1);
  auto draw = [&](std::size_t count) {
    std::vector<Edge> out;
    while (out.size() < count) {
      Index i = node(rng), j = node(rng);
      if (i == j) continue;
      if (i > j) std::swap(i, j);
      if (g.adjacency(i, j) != 0.0 || !used.insert({i, j}).second) continue;
      out.emplace_back(i, j);
    }
    return out;
  };
  s.test_negatives = draw(s.test.size());
  s.val_negatives = draw(s.val.size());
  return s;
}

// Rank-based AUC with average ranks for ties, so a tie counts one half.
inline double auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) throw InvalidArgument("auc: positive and negative score lists must be non-empty");
  std::vector<std::pair<double, bool>> all;
  all.reserve(pos.size() + neg.size());
  for (double p : pos) all.emplace_back(p, true);
  for (double q : neg) all.emplace_back(q, false);
  for (const auto& [s, _] : all)
    if (std::isnan(s)) throw NumericalError("auc: NaN score");
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;  // of positives, 1-based, doubled to stay integral
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    // Ranks i+1 .. j share the average (i+1+j)/2.
    std::size_t tied_pos = 0;
    for (std::size_t k = i; k < j; ++k) tied_pos += all[k].second ? 1 : 0;
    rank_sum += static_cast<double>(tied_pos) * static_cast<double>(i + 1 + j);
    i = j;
  }
  const auto p = static_cast<double>(pos.size());
  const double wins = (rank_sum - p * (p + 1.0)) / 2.0;
  return wins / (p * static_cast<double>(neg.size()));
}

namespace detail {

inline int class_count(const std::vector<int>& labels) {
  int mx = -1;
  for (int l : labels) {
    if (l < 0) throw InvalidArgument("labels must be non-negative");
    mx = std::max(mx, l);
  }
  return mx + 1;
}

inline void check_split(const std::vector<int>& labels, const NodeSplit& split, Index n) {
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("label count does not match node count");
  split.validate(n);
  if (split.train.empty() || split.val.empty() || split.test.empty()) {
    throw InvalidArgument("node split has an empty part");
  }
  const int first = labels[static_cast<std::size_t>(split.train.front())];
  bool single = true;
  for (Index i : split.train) single = single && labels[static_cast<std::size_t>(i)] == first;
  if (single) throw InvalidArgument("degenerate split: training nodes cover a single class");
}

// Mean softmax cross-entropy of `logits` rows at `nodes`.
inline Var cross_entropy(Var logits, const std::vector<int>& labels, const std::vector<Index>& nodes) {
  std::vector<std::pair<Index, Index>> at;
  at.reserve(nodes.size());
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    at.emplace_back(static_cast<Index>(k), labels[static_cast<std::size_t>(nodes[k])]);
  }
  Var rows = select_rows(logits, nodes);
  Var total = sub(sum(row_logsumexp(rows)), sum(gather(rows, std::move(at))));
  return scale(total, 1.0 / static_cast<double>(nodes.size()));
}

// Share of `nodes` whose first maximal logit is the label.
inline double accuracy(const Matrix& logits, const std::vector<int>& labels, const std::vector<Index>& nodes) {
  std::size_t hit = 0;
  for (Index i : nodes) {
    Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (arg == labels[static_cast<std::size_t>(i)]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(nodes.size());
}

inline Tensor uniform_init(Index rows, Index cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-a, a);
  Matrix w(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) w(i, j) = u(rng);
  return Tensor(std::move(w), true);
}

}  // namespace detail

struct LogRegConfig {
  double learning_rate = 0.01;
  int epochs = 300;
  double weight_decay = 1e-5;
  // L2-normalize embedding rows before fitting (zero rows stay zero).
  bool normalize_rows = true;
};

// Multinomial logistic regression on frozen embeddings, trained with Adam on
// split.train; the epoch with the best val accuracy (latest on ties) is
// scored on split.test.
inline double node_classification(const Matrix& embeddings, const std::vector<int>& labels, const NodeSplit& split,
                                  Rng& rng, const LogRegConfig& cfg = {}) {
  detail::check_split(labels, split, embeddings.rows());
  if (!embeddings.allFinite()) throw NumericalError("node_classification: non-finite embeddings");
  Matrix x = embeddings;
  if (cfg.normalize_rows) {
    for (Index i = 0; i < x.rows(); ++i) {
      const double nrm = x.row(i).norm();
      if (nrm > 0.0) x.row(i) /= nrm;
    }
  }
  const int classes = detail::class_count(labels);
  Tensor w = detail::uniform_init(x.cols(), classes, rng);
  Tensor b(Matrix::Zero(1, classes), true);
  AdamState sw = AdamState::for_param(w, cfg.learning_rate);
  sw.weight_decay = cfg.weight_decay;
  AdamState sb = AdamState::for_param(b, cfg.learning_rate);

  auto logits_of = [&](Tape& t, Var vw, Var vb) { return add_rowwise(matmul(t.constant(x), vw), vb); };
  auto score = [&](const std::vector<Index>& nodes) {
    Matrix logits = (x * w.value).rowwise() + b.value.row(0);
    return detail::accuracy(logits, labels, nodes);
  };

  double best_val = score(split.val);
  double best_test = score(split.test);
  Tape tape;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    tape.clear();
    Var vw = tape.leaf(w);
    Var vb = tape.leaf(b);
    tape.backward(detail::cross_entropy(logits_of(tape, vw, vb), labels, split.train));
    tape.export_grad(vw, w);
    tape.export_grad(vb, b);
    adam_step(w, sw);
    adam_step(b, sb);
    const double val = score(split.val);
    if (val >= best_val) {
      best_val = val;
      best_test = score(split.test);
    }
  }
  return best_test;
}

struct LinkPredictionConfig {
  Index hidden_dim = 128;
  Index output_dim = 64;
  int epochs = 100;
  double learning_rate = 0.01;
};

namespace detail {

struct Mlp {
  Tensor w1, b1, w2, b2;

  static Mlp init(Index in, Index hidden, Index out, Rng& rng) {
    return {uniform_init(in, hidden, rng), Tensor(Matrix::Zero(1, hidden), true), uniform_init(hidden, out, rng),
            Tensor(Matrix::Zero(1, out), true)};
  }

  Matrix project(const Matrix& x) const {
    Matrix h = ((x * w1.value).rowwise() + b1.value.row(0)).cwiseMax(0.0);
    return (h * w2.value).rowwise() + b2.value.row(0);
  }
};

inline std::vector<double> pair_scores(const Matrix& projections, const std::vector<Edge>& pairs) {
  Vector norms = row_norms(projections, 0.0, "link_prediction");
  std::vector<double> out;
  out.reserve(pairs.size());
  for (auto [i, j] : pairs) out.push_back(projections.row(i).dot(projections.row(j)) / (norms(i) * norms(j)));
  return out;
}

}  // namespace detail

// Loss of one batch of (anchor, positive, negative) triples under the margin
// objective -sum log sigmoid(cos(p_i, p_j) - cos(p_i, p_k)).
inline Var margin_loss(Var projections, const std::vector<Index>& anchors, const std::vector<Index>& positives,
                       const std::vector<Index>& negatives) {
  Var q = row_normalize(projections);
  Var qi = select_rows(q, anchors);
  Var pos = row_sum(mul(qi, select_rows(q, positives)));
  Var neg = row_sum(mul(qi, select_rows(q, negatives)));
  return scale(sum(log_sigmoid(sub(pos, neg))), -1.0);
}

// Trains a 2-layer MLP head on split.train (both orientations of each edge,
// one fresh uniform negative per positive per epoch) and returns the test AUC
// of the epoch with the best validation AUC. Pairs are scored by cosine
// similarity of projections.
inline double link_prediction(const Matrix& embeddings, const EdgeSplit& split, Rng& rng,
                              const LinkPredictionConfig& cfg = {}) {
  if (split.train.empty()) throw InvalidArgument("link_prediction: no training edges");
  if (split.test.empty() || split.test_negatives.empty()) throw InvalidArgument("link_prediction: empty test set");
  if (!embeddings.allFinite()) throw NumericalError("link_prediction: non-finite embeddings");
  const Index n = embeddings.rows();
  detail::Mlp mlp = detail::Mlp::init(embeddings.cols(), cfg.hidden_dim, cfg.output_dim, rng);
  std::vector<AdamState> states;
  for (Tensor* p : {&mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2}) states.push_back(AdamState::for_param(*p, cfg.learning_rate));

  std::vector<Index> anchors, positives;
  for (auto [i, j] : split.train) {
    anchors.push_back(i);
    positives.push_back(j);
    anchors.push_back(j);
    positives.push_back(i);
  }
  const bool has_val = !split.val.empty() && !split.val_negatives.empty();
  auto evaluate = [&](const std::vector<Edge>& pos, const std::vector<Edge>& neg) {
    Matrix p = mlp.project(embeddings);
    return auc(detail::pair_scores(p, pos), detail::pair_scores(p, neg));
  };

  double best_val = has_val ? evaluate(split.val, split.val_negatives) : 0.0;
  double best_test = evaluate(split.test, split.test_negatives);
  std::uniform_int_distribution<Index> node(0, n - 2);
  std::vector<Index> negatives(anchors.size());
  Tape tape;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t k = 0; k < anchors.size(); ++k) {
      const Index v = node(rng);
      negatives[k] = v >= anchors[k] ? v + 1 : v;  // uniform over nodes other than the anchor
    }
    tape.clear();
    Var w1 = tape.leaf(mlp.w1), b1 = tape.leaf(mlp.b1), w2 = tape.leaf(mlp.w2), b2 = tape.leaf(mlp.b2);
    Var h = relu(add_rowwise(matmul(tape.constant(embeddings), w1), b1));
    Var proj = add_rowwise(matmul(h, w2), b2);
    tape.backward(margin_loss(proj, anchors, positives, negatives));
    tape.export_grad(w1, mlp.w1);
    tape.export_grad(b1, mlp.b1);
    tape.export_grad(w2, mlp.w2);
    tape.export_grad(b2, mlp.b2);
    std::size_t s = 0;
    for (Tensor* p : {&mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2}) adam_step(*p, states[s++]);
    if (!has_val) {
      best_test = evaluate(split.test, split.test_negatives);
      continue;
    }
    const double val = evaluate(split.val, split.val_negatives);
    if (val >= best_val) {
      best_val = val;
      best_test = evaluate(split.test, split.test_negatives);
    }
  }
  return best_test;
}

struct GcnConfig {
  Index hidden_dim = 16;
  int epochs = 200;
  double learning_rate = 0.01;
  double weight_decay = 5e-4;  // first layer only
};

// End-to-end supervised 2-layer GCN with softmax cross-entropy on `g`'s
// adjacency; returns test accuracy at the best-validation epoch.
inline double transfer_gcn(const Graph& g, const std::vector<int>& labels, const NodeSplit& split, Rng& rng,
                           const GcnConfig& cfg = {}) {
  detail::check_split(labels, split, g.num_nodes());
  const int classes = detail::class_count(labels);
  Tensor w1 = detail::uniform_init(g.feature_dim(), cfg.hidden_dim, rng);
  Tensor w2 = detail::uniform_init(cfg.hidden_dim, classes, rng);
  AdamState s1 = AdamState::for_param(w1, cfg.learning_rate);
  s1.weight_decay = cfg.weight_decay;
  AdamState s2 = AdamState::for_param(w2, cfg.learning_rate);
  const Matrix a = normalized_adjacency(g.adjacency);
  const Matrix ax = a * g.features;

  auto logits = [&]() -> Matrix { return a * ((ax * w1.value).cwiseMax(0.0) * w2.value); };
  double best_val = detail::accuracy(logits(), labels, split.val);
  double best_test = detail::accuracy(logits(), labels, split.test);
  Tape tape;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    tape.clear();
    Var v1 = tape.leaf(w1), v2 = tape.leaf(w2);
    Var an = tape.constant(a);
    Var out = matmul(an, matmul(relu(matmul(tape.constant(ax), v1)), v2));
    tape.backward(detail::cross_entropy(out, labels, split.train));
    tape.export_grad(v1, w1);
    tape.export_grad(v2, w2);
    adam_step(w1, s1);
    adam_step(w2, s2);
    const Matrix current = logits();
    const double val = detail::accuracy(current, labels, split.val);
    if (val >= best_val) {
      best_val = val;
      best_test = detail::accuracy(current, labels, split.test);
    }
  }
  return best_test;
}

// Per-seed values of one metric for one (task, attack, budget) cell.
struct MetricsReport {
  std::string dataset;
  std::string task;
  std::string attack;
  std::string budget;
  std::string metric;
  std::vector<std::uint64_t> seeds;
  std::vector<double> values;

  double mean() const {
    if (values.empty()) throw InvalidArgument("metrics report: no values");
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  }

  // Sample standard deviation; 0 for a single value.
  double stddev() const {
    if (values.size() < 2) return 0.0;
    const double mu = mean();
    double ss = 0.0;
    for (double v : values) ss += (v - mu) * (v - mu);
    return std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
};

}  // namespace clga
