#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "clga/error.hpp"
#include "clga/random.hpp"
#include "clga/tensor.hpp"

namespace clga {

using Edge = std::pair<Index, Index>;

// Undirected graph with dense binary adjacency and node features.
struct Graph {
  Matrix adjacency;  // n x n, symmetric, {0,1}, zero diagonal
  Matrix features;   // n x d
  std::optional<std::vector<int>> labels;
  BoolMatrix frozen;  // pairs the attack may no longer flip

  Graph() = default;
  Graph(Matrix adj, Matrix feats, std::optional<std::vector<int>> lbls = std::nullopt)
      : adjacency(std::move(adj)), features(std::move(feats)), labels(std::move(lbls)) {
    frozen = BoolMatrix::Constant(adjacency.rows(), adjacency.cols(), false);
    validate();
  }

  Index num_nodes() const { return adjacency.rows(); }
  Index feature_dim() const { return features.cols(); }

  Index num_edges() const {
    Index count = 0;
    for (Index i = 0; i < num_nodes(); ++i)
      for (Index j = i + 1; j < num_nodes(); ++j)
        if (adjacency(i, j) != 0.0) ++count;
    return count;
  }

  // Upper-triangle edges (i < j) in row-major order.
  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    for (Index i = 0; i < num_nodes(); ++i)
      for (Index j = i + 1; j < num_nodes(); ++j)
        if (adjacency(i, j) != 0.0) out.emplace_back(i, j);
    return out;
  }

  int num_classes() const {
    if (!labels || labels->empty()) return 0;
    int mx = 0;
    for (int l : *labels) mx = std::max(mx, l);
    return mx + 1;
  }

  void validate() const {
    const Index n = adjacency.rows();
    if (adjacency.cols() != n) throw ShapeError("graph: adjacency must be square, got " + shape_str(adjacency));
    if (features.rows() != n) {
      throw ShapeError("graph: feature rows " + std::to_string(features.rows()) + " != node count " +
                       std::to_string(n));
    }
    if (frozen.rows() != n || frozen.cols() != n) throw ShapeError("graph: frozen mask shape mismatch");
    for (Index i = 0; i < n; ++i) {
      if (adjacency(i, i) != 0.0) throw InvalidArgument("graph: self-loop at node " + std::to_string(i));
      for (Index j = i + 1; j < n; ++j) {
        const double a = adjacency(i, j);
        if (a != 0.0 && a != 1.0) throw InvalidArgument("graph: adjacency must be binary");
        if (a != adjacency(j, i)) {
          throw InvalidArgument("graph: adjacency not symmetric at (" + std::to_string(i) + "," +
                                std::to_string(j) + ")");
        }
        if (frozen(i, j) != frozen(j, i)) throw InvalidArgument("graph: frozen mask not symmetric");
      }
    }
    if (!features.allFinite()) throw NumericalError("graph: non-finite features");
    if (labels) {
      if (static_cast<Index>(labels->size()) != n) throw ShapeError("graph: label count != node count");
      for (int l : *labels)
        if (l < 0) throw InvalidArgument("graph: negative label");
    }
  }
};

inline Matrix adjacency_from_edges(Index n, const std::vector<Edge>& edges) {
  Matrix a = Matrix::Zero(n, n);
  for (auto [u, v] : edges) {
    if (u < 0 || v < 0 || u >= n || v >= n) throw InvalidArgument("edge endpoint out of range");
    if (u == v) continue;
    a(u, v) = 1.0;
    a(v, u) = 1.0;
  }
  return a;
}

// FNV-1a over the node count and the upper-triangle edge list.
inline std::uint64_t adjacency_checksum(const Matrix& adjacency) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::uint64_t x) {
    for (int b = 0; b < 8; ++b) {
      h ^= (x >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  const Index n = adjacency.rows();
  feed(static_cast<std::uint64_t>(n));
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j)
      if (adjacency(i, j) != 0.0) {
        feed(static_cast<std::uint64_t>(i));
        feed(static_cast<std::uint64_t>(j));
      }
  return h;
}

// D^{-1/2} (A + I) D^{-1/2} with D_ii = sum_j (A + I)_ij, recorded on the tape
// so gradients reach A through the degrees as well.
inline Var normalize(Var adjacency) {
  const Index n = adjacency.rows();
  if (adjacency.cols() != n) throw ShapeError("normalize: square input required, got " + shape_str(adjacency.value()));
  Tape& t = adjacency.tape();
  Var with_loops = add(adjacency, t.constant(Matrix::Identity(n, n)));
  Var inv_sqrt_deg = pow(row_sum(with_loops), -0.5);
  return mul(with_loops, matmul(inv_sqrt_deg, transpose(inv_sqrt_deg)));
}

// Value-only normalization for callers that do not need gradients.
inline Matrix normalized_adjacency(const Matrix& adjacency) {
  const Index n = adjacency.rows();
  Matrix a = adjacency + Matrix::Identity(n, n);
  Vector d = a.rowwise().sum().array().rsqrt();
  return (d.asDiagonal() * a * d.asDiagonal()).eval();
}

enum class FeatureMasking { kPerDimension, kPerEntry };

// Augmentation rates for the two views.
struct AugmentationSpec {
  std::array<double, 2> edge_drop{0.3, 0.4};
  std::array<double, 2> feature_drop{0.1, 0.0};
  FeatureMasking masking = FeatureMasking::kPerDimension;

  static AugmentationSpec none() { return AugmentationSpec{{0.0, 0.0}, {0.0, 0.0}, FeatureMasking::kPerDimension}; }

  void validate() const {
    for (double r : edge_drop)
      if (!(r >= 0.0 && r < 1.0)) throw InvalidArgument("augment: edge drop rate must be in [0,1)");
    for (double r : feature_drop)
      if (!(r >= 0.0 && r < 1.0)) throw InvalidArgument("augment: feature drop rate must be in [0,1)");
  }
};

struct View {
  Matrix adjacency;
  Matrix features;
  std::vector<Edge> dropped_edges;
  std::vector<Index> dropped_feature_dims;  // kPerDimension only
  Index dropped_feature_entries = 0;
};

struct ViewPair {
  View first;
  View second;
};

inline View augment_view(const Graph& g, double edge_drop, double feature_drop, FeatureMasking masking, Rng& rng) {
  View v;
  v.adjacency = g.adjacency;
  v.features = g.features;
  const Index n = g.num_nodes();
  if (edge_drop > 0.0) {
    std::bernoulli_distribution drop(edge_drop);
    for (Index i = 0; i < n; ++i)
      for (Index j = i + 1; j < n; ++j)
        if (g.adjacency(i, j) != 0.0 && drop(rng)) {
          v.adjacency(i, j) = 0.0;
          v.adjacency(j, i) = 0.0;
          v.dropped_edges.emplace_back(i, j);
        }
  }
  if (feature_drop > 0.0) {
    std::bernoulli_distribution drop(feature_drop);
    if (masking == FeatureMasking::kPerDimension) {
      for (Index c = 0; c < g.feature_dim(); ++c)
        if (drop(rng)) {
          v.features.col(c).setZero();
          v.dropped_feature_dims.push_back(c);
        }
    } else {
      for (Index r = 0; r < n; ++r)
        for (Index c = 0; c < g.feature_dim(); ++c)
          if (drop(rng)) {
            v.features(r, c) = 0.0;
            ++v.dropped_feature_entries;
          }
    }
  }
  return v;
}

// Two stochastic views of `g`; `g` itself is untouched.
inline ViewPair augment(const Graph& g, const AugmentationSpec& spec, Rng& rng) {
  spec.validate();
  ViewPair p;
  p.first = augment_view(g, spec.edge_drop[0], spec.feature_drop[0], spec.masking, rng);
  p.second = augment_view(g, spec.edge_drop[1], spec.feature_drop[1], spec.masking, rng);
  return p;
}

struct SbmSpec {
  Index nodes = 100;
  Index blocks = 2;
  double p_in = 0.15;
  double p_out = 0.02;
  // Feature width; the first `blocks` columns carry the one-hot block id.
  // 0 means exactly `blocks` columns.
  Index feature_dim = 16;
  double feature_noise = 0.1;  // std of additive Gaussian noise
  // Height of the one-hot block column. 0 gives features that carry no class
  // information, so labels are recoverable from structure only.
  double feature_signal = 1.0;
};

// Stochastic block model with contiguous equal-size blocks; labels are block ids.
inline Graph generate_sbm(const SbmSpec& spec, Rng& rng) {
  if (spec.blocks < 1 || spec.nodes < 1) throw InvalidArgument("generate_sbm: need at least one node and block");
  if (spec.nodes % spec.blocks != 0) throw InvalidArgument("generate_sbm: node count must be divisible by blocks");
  if (!(spec.p_in >= 0.0 && spec.p_in <= 1.0 && spec.p_out >= 0.0 && spec.p_out <= 1.0)) {
    throw InvalidArgument("generate_sbm: probabilities must lie in [0,1]");
  }
  if (spec.p_in < spec.p_out) throw InvalidArgument("generate_sbm: p_in must not be below p_out");
  if (spec.feature_noise < 0.0) throw InvalidArgument("generate_sbm: negative feature noise");
  const Index d = spec.feature_dim == 0 ? spec.blocks : spec.feature_dim;
  if (spec.feature_signal != 0.0 && d < spec.blocks) {
    throw InvalidArgument("generate_sbm: feature_dim must be at least the block count");
  }

  const Index n = spec.nodes;
  const Index block_size = n / spec.blocks;
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i / block_size);

  Matrix adj = Matrix::Zero(n, n);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) {
      const double p = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)] ? spec.p_in : spec.p_out;
      if (unif(rng) < p) {
        adj(i, j) = 1.0;
        adj(j, i) = 1.0;
      }
    }

  Matrix feats = Matrix::Zero(n, d);
  if (spec.feature_signal != 0.0) {
    for (Index i = 0; i < n; ++i) feats(i, labels[static_cast<std::size_t>(i)]) = spec.feature_signal;
  }
  if (spec.feature_noise > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.feature_noise);
    for (Index i = 0; i < n; ++i)
      for (Index c = 0; c < d; ++c) feats(i, c) += noise(rng);
  }
  return Graph(std::move(adj), std::move(feats), std::move(labels));
}

// N(0,1) features for featureless graphs.
inline Matrix random_features(Index n, Index d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index c = 0; c < d; ++c) x(i, c) = normal(rng);
  return x;
}

}  // namespace clga
