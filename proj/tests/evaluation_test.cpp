#include "clga/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "gtest/gtest.h"
#include "oracles.hpp"

namespace clga {
namespace {

std::vector<double> random_scores(std::size_t n, std::mt19937_64& rng, bool coarse) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> out(n);
  for (double& v : out) v = coarse ? std::round(u(rng) * 8.0) / 8.0 : u(rng);
  return out;
}

TEST(AucTest, HandExamples) {
  EXPECT_EQ(auc({1.0, 2.0}, {0.0}), 1.0);
  EXPECT_EQ(auc({0.5}, {0.5}), 0.5);
  EXPECT_EQ(auc({0.0}, {1.0, 2.0}), 0.0);
  EXPECT_EQ(auc({1.0, 3.0}, {2.0}), 0.5);
}

TEST(AucTest, MatchesExhaustivePairCount) {
  std::mt19937_64 rng(1);
  const auto pos = random_scores(40, rng, false);
  const auto neg = random_scores(40, rng, false);
  EXPECT_EQ(auc(pos, neg), oracle::exhaustive_auc(pos, neg));
  for (int c = 0; c < 20; ++c) {
    std::uniform_int_distribution<std::size_t> size(1, 100);
    const auto p = random_scores(size(rng), rng, c % 2 == 0);
    const auto q = random_scores(size(rng), rng, c % 2 == 0);
    EXPECT_EQ(auc(p, q), oracle::exhaustive_auc(p, q)) << "case " << c;
  }
}

TEST(AucTest, InvariantUnderIncreasingTransform) {
  std::mt19937_64 rng(2);
  const auto pos = random_scores(30, rng, true);
  const auto neg = random_scores(25, rng, true);
  auto transform = [](std::vector<double> v) {
    for (double& x : v) x = std::exp(3.0 * x) + x * x * x;
    return v;
  };
  EXPECT_EQ(auc(pos, neg), auc(transform(pos), transform(neg)));
}

TEST(AucTest, RejectsEmptyAndNaN) {
  EXPECT_THROW(auc({}, {1.0}), InvalidArgument);
  EXPECT_THROW(auc({1.0}, {}), InvalidArgument);
  EXPECT_THROW(auc({std::nan("")}, {1.0}), NumericalError);
}

std::vector<int> two_blocks(Index n) {
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i < n / 2 ? 0 : 1;
  return labels;
}

TEST(NodeSplitTest, StratifiedPartsAreDisjointAndExhaustive) {
  const auto labels = two_blocks(100);
  Rng rng(3);
  NodeSplit s = stratified_node_split(labels, 0.1, 0.1, rng);
  EXPECT_NO_THROW(s.validate(100, true));
  EXPECT_EQ(s.train.size(), 10u);
  EXPECT_EQ(s.val.size(), 10u);
  EXPECT_EQ(s.test.size(), 80u);
  int train_zero = 0;
  for (Index i : s.train) train_zero += labels[static_cast<std::size_t>(i)] == 0;
  EXPECT_EQ(train_zero, 5);
  Rng again(3);
  NodeSplit t = stratified_node_split(labels, 0.1, 0.1, again);
  EXPECT_EQ(s.train, t.train);
  EXPECT_EQ(s.test, t.test);
}

TEST(NodeSplitTest, SmallClassesStillReachEveryPart) {
  std::vector<int> labels = {0, 0, 0, 1, 1, 1, 1, 1, 1, 1};
  Rng rng(4);
  NodeSplit s = stratified_node_split(labels, 0.1, 0.1, rng);
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    std::set<int> classes;
    for (Index i : *part) classes.insert(labels[static_cast<std::size_t>(i)]);
    EXPECT_EQ(classes.size(), 2u);
  }
}

TEST(NodeSplitTest, ValidateRejectsOverlap) {
  NodeSplit s{{0, 1}, {1}, {2}};
  EXPECT_THROW(s.validate(3), InvalidArgument);
  NodeSplit out_of_range{{0}, {1}, {5}};
  EXPECT_THROW(out_of_range.validate(3), InvalidArgument);
}

Graph clustered_graph(std::uint64_t seed) {
  Rng rng(seed);
  return generate_sbm(SbmSpec{60, 2, 0.3, 0.0, 8, 0.1}, rng);
}

TEST(EdgeSplitTest, PartsAndNegatives) {
  Graph g = clustered_graph(5);
  Rng rng(5);
  EdgeSplit s = split_edges(g, 0.7, 0.2, rng);
  const std::size_t m = static_cast<std::size_t>(g.num_edges());
  EXPECT_EQ(s.train.size(), static_cast<std::size_t>(std::floor(0.7 * static_cast<double>(m))));
  EXPECT_EQ(s.test.size(), static_cast<std::size_t>(std::floor(0.2 * static_cast<double>(m))));
  EXPECT_EQ(s.train.size() + s.test.size() + s.val.size(), m);
  std::set<Edge> all;
  for (const auto* part : {&s.train, &s.test, &s.val})
    for (const Edge& e : *part) EXPECT_TRUE(all.insert(e).second);
  EXPECT_EQ(s.test_negatives.size(), s.test.size());
  EXPECT_EQ(s.val_negatives.size(), s.val.size());
  std::set<Edge> negs;
  for (const auto* part : {&s.test_negatives, &s.val_negatives})
    for (auto [i, j] : *part) {
      EXPECT_LT(i, j);
      EXPECT_EQ(g.adjacency(i, j), 0.0);
      EXPECT_TRUE(negs.insert({i, j}).second);
    }
}

TEST(EdgeSplitTest, TrainingAdjacencyKeepsOnlyTrainEdges) {
  Graph g = clustered_graph(6);
  Rng rng(6);
  EdgeSplit s = split_edges(g, 0.7, 0.2, rng);
  Matrix train = s.training_adjacency(g.adjacency);
  EXPECT_EQ(Graph(train, g.features).num_edges(), static_cast<Index>(s.train.size()));
  for (auto [i, j] : s.train) EXPECT_EQ(train(i, j), 1.0);
  // Held-out negatives are cleared even if a poisoned input had added them.
  Matrix poisoned = g.adjacency;
  auto [a, b] = s.test_negatives.front();
  poisoned(a, b) = poisoned(b, a) = 1.0;
  EXPECT_EQ(s.training_adjacency(poisoned)(a, b), 0.0);
}

TEST(NodeClassificationTest, SeparableClustersAreClassifiedPerfectly) {
  const Index n = 60;
  const auto labels = two_blocks(n);
  std::mt19937_64 noise_rng(7);
  Matrix emb = oracle::random_matrix(n, 4, noise_rng, -0.5, 0.5);
  for (Index i = 0; i < n; ++i) emb(i, 0) += labels[static_cast<std::size_t>(i)] == 0 ? 10.0 : -10.0;
  Rng split_rng(7);
  NodeSplit split = stratified_node_split(labels, 0.1, 0.1, split_rng);
  Rng rng(8);
  EXPECT_EQ(node_classification(emb, labels, split, rng), 1.0);

  // A global rotation does not change the separable outcome.
  Eigen::HouseholderQR<Matrix> qr(oracle::random_matrix(4, 4, noise_rng));
  Matrix q = qr.householderQ();
  Rng rng2(8);
  EXPECT_EQ(node_classification(emb * q, labels, split, rng2), 1.0);
}

TEST(NodeClassificationTest, ShuffledLabelsGiveChance) {
  const Index n = 100;
  double total = 0.0;
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(static_cast<std::uint64_t>(100 + s));
    Graph g = generate_sbm(SbmSpec{n, 2, 0.1, 0.1, 8, 1.0}, rng);
    auto labels = *g.labels;
    std::shuffle(labels.begin(), labels.end(), rng);
    NodeSplit split = stratified_node_split(labels, 0.1, 0.1, rng);
    total += node_classification(g.features, labels, split, rng);
  }
  EXPECT_NEAR(total / seeds, 0.5, 0.1);
}

TEST(NodeClassificationTest, ConstantEmbeddingsGiveMajorityRate) {
  std::vector<int> labels(100, 0);
  for (int i = 70; i < 100; ++i) labels[static_cast<std::size_t>(i)] = 1;
  Matrix emb = Matrix::Ones(100, 5);
  Rng rng(9);
  NodeSplit split = stratified_node_split(labels, 0.1, 0.1, rng);
  double majority = 0.0;
  for (Index i : split.test) majority += labels[static_cast<std::size_t>(i)] == 0 ? 1.0 : 0.0;
  majority /= static_cast<double>(split.test.size());
  EXPECT_NEAR(node_classification(emb, labels, split, rng), majority, 1e-12);
}

TEST(NodeClassificationTest, DegenerateSplitsAreErrors) {
  const auto labels = two_blocks(10);
  Matrix emb = Matrix::Ones(10, 2);
  Rng rng(10);
  EXPECT_THROW(node_classification(emb, labels, NodeSplit{{}, {1}, {2}}, rng), InvalidArgument);
  EXPECT_THROW(node_classification(emb, labels, NodeSplit{{0, 1}, {2}, {}}, rng), InvalidArgument);
  EXPECT_THROW(node_classification(emb, labels, NodeSplit{{0, 1, 2}, {6}, {7}}, rng), InvalidArgument);
}

TEST(NodeClassificationTest, DoesNotMutateInputs) {
  const auto labels = two_blocks(20);
  std::mt19937_64 r(11);
  const Matrix emb = oracle::random_matrix(20, 3, r);
  const Matrix copy = emb;
  Rng rng(11);
  NodeSplit split = stratified_node_split(labels, 0.2, 0.2, rng);
  node_classification(emb, labels, split, rng);
  EXPECT_EQ(emb, copy);
}

TEST(MarginLossTest, EqualScoresGiveLogTwo) {
  Tape t;
  Matrix p(3, 2);
  p << 1.0, 0.0, 0.3, 0.7, 0.3, 0.7;  // nodes 1 and 2 project identically
  Var loss = margin_loss(t.constant(p), {0}, {1}, {2});
  EXPECT_NEAR(loss.value()(0, 0), std::log(2.0), 1e-15);
}

TEST(MarginLossTest, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  const Matrix p = oracle::random_matrix(6, 4, rng);
  const std::vector<Index> a = {0, 1, 2, 3}, pos = {1, 0, 3, 4}, neg = {5, 3, 0, 2};
  Tape t;
  Var v = t.variable(p);
  t.backward(margin_loss(v, a, pos, neg));
  auto f = [&](const Matrix& x) {
    double total = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double d = oracle::cosine(x, a[k], x, pos[k]) - oracle::cosine(x, a[k], x, neg[k]);
      total += -std::log(1.0 / (1.0 + std::exp(-d)));
    }
    return total;
  };
  EXPECT_NEAR(f(p), margin_loss(t.constant(p), a, pos, neg).value()(0, 0), 1e-12);
  EXPECT_LT(oracle::max_rel_err(v.grad(), oracle::central_difference(f, p, 1e-6), 1e-9), 1e-6);
}

TEST(LinkPredictionTest, ClusteredEmbeddingsRankEdgesHigh) {
  // Two cliques: every non-edge crosses clusters.
  Rng graph_rng(13);
  Graph g = generate_sbm(SbmSpec{40, 2, 1.0, 0.0, 8, 0.1}, graph_rng);
  Rng rng(13);
  EdgeSplit s = split_edges(g, 0.7, 0.2, rng);
  LinkPredictionConfig cfg;
  cfg.epochs = 50;
  cfg.hidden_dim = 16;
  cfg.output_dim = 8;
  EXPECT_GT(link_prediction(g.features, s, rng, cfg), 0.9);
}

TEST(LinkPredictionTest, SameSeedSameAuc) {
  Graph g = clustered_graph(14);
  Rng rng(14);
  EdgeSplit s = split_edges(g, 0.7, 0.2, rng);
  LinkPredictionConfig cfg;
  cfg.epochs = 10;
  Rng a(1), b(1);
  EXPECT_EQ(link_prediction(g.features, s, a, cfg), link_prediction(g.features, s, b, cfg));
}

TEST(LinkPredictionTest, RejectsEmptyTraining) {
  EdgeSplit s;
  s.test = {{0, 1}};
  s.test_negatives = {{0, 2}};
  Rng rng(15);
  EXPECT_THROW(link_prediction(Matrix::Ones(3, 2), s, rng), InvalidArgument);
}

TEST(LinkPredictionTest, ZeroProjectionRowIsAnError) {
  EdgeSplit s;
  s.train = {{0, 1}};
  s.test = {{0, 1}};
  s.test_negatives = {{0, 2}};
  LinkPredictionConfig cfg;
  cfg.epochs = 0;
  cfg.hidden_dim = 1;
  cfg.output_dim = 1;
  Rng rng(16);
  // With zero embeddings and zero biases every projection is zero.
  EXPECT_THROW(link_prediction(Matrix::Zero(3, 2), s, rng, cfg), NumericalError);
}

TEST(TransferGcnTest, EasyInstanceIsLearned) {
  Rng rng(17);
  Graph g = generate_sbm(SbmSpec{100, 2, 0.3, 0.01, 0, 0.0}, rng);
  NodeSplit split = stratified_node_split(*g.labels, 0.1, 0.1, rng);
  EXPECT_GT(transfer_gcn(g, *g.labels, split, rng), 0.95);
}

TEST(TransferGcnTest, UntrainedModelIsNearChance) {
  double total = 0.0;
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(static_cast<std::uint64_t>(200 + s));
    Graph g = generate_sbm(SbmSpec{100, 2, 0.2, 0.02, 16, 1.0}, rng);
    auto labels = *g.labels;
    NodeSplit split = stratified_node_split(labels, 0.1, 0.1, rng);
    GcnConfig cfg;
    cfg.epochs = 0;
    total += transfer_gcn(g, labels, split, rng, cfg);
  }
  EXPECT_NEAR(total / seeds, 0.5, 0.15);
}

TEST(TransferGcnTest, SameSeedSameAccuracy) {
  Rng rng(18);
  Graph g = generate_sbm(SbmSpec{60, 2, 0.2, 0.05, 8, 1.0}, rng);
  NodeSplit split = stratified_node_split(*g.labels, 0.1, 0.1, rng);
  Rng a(3), b(3);
  EXPECT_EQ(transfer_gcn(g, *g.labels, split, a), transfer_gcn(g, *g.labels, split, b));
}

TEST(MetricsReportTest, MeanAndStdMatchRecomputation) {
  MetricsReport r;
  r.values = {0.8, 0.85, 0.9, 0.75, 0.7};
  long double s = 0.0L;
  for (double v : r.values) s += v;
  const long double mu = s / 5.0L;
  long double ss = 0.0L;
  for (double v : r.values) ss += (v - mu) * (v - mu);
  EXPECT_NEAR(r.mean(), static_cast<double>(mu), 1e-12);
  EXPECT_NEAR(r.stddev(), static_cast<double>(std::sqrt(ss / 4.0L)), 1e-12);
  MetricsReport one;
  one.values = {0.5};
  EXPECT_EQ(one.stddev(), 0.0);
  EXPECT_THROW(MetricsReport{}.mean(), InvalidArgument);
}

}  // namespace
}  // namespace clga
