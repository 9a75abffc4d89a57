#pragma once

// Contrastive-loss gradient attack: budgeted, gradient-directed edge flipping
// with retraining between flips, plus a uniform random-flip baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clga/contrastive.hpp"
#include "clga/graph.hpp"
#include "clga/random.hpp"
#include "clga/tensor.hpp"

namespace clga {

enum class FlipDirection { kAdd, kDelete };

inline const char* to_string(FlipDirection d) { return d == FlipDirection::kAdd ? "add" : "delete"; }

struct FlipCandidate {
  Index m = 0;
  Index n = 0;
  FlipDirection direction = FlipDirection::kAdd;
  double score = 0.0;
};

struct FlipRecord {
  std::int64_t iteration = 0;
  Index m = 0;
  Index n = 0;
  FlipDirection direction = FlipDirection::kAdd;
  double score = 0.0;
  // Training loss of the retrain that preceded this flip (first and last epoch).
  double loss_before = 0.0;
  double loss_after = 0.0;

  friend bool operator==(const FlipRecord&, const FlipRecord&) = default;
};

enum class AttackStatus { kComplete, kHalted };

struct AttackState {
  std::string attack = "clga";
  Matrix adjacency;  // poisoned
  BoolMatrix frozen;
  std::vector<FlipRecord> flips;
  Index budget = 0;
  std::uint64_t seed = 0;
  std::uint64_t clean_checksum = 0;
  AttackStatus status = AttackStatus::kComplete;
  std::string message;

  Index num_nodes() const { return adjacency.rows(); }
};

struct AttackConfig {
  Index budget = 1;
  int k = 10;  // augmentation pairs per gradient estimate
  std::optional<int> retrain_epochs;  // defaults to the contrastive config's epochs
  Index flips_per_iteration = 1;
  bool warm_start = false;
  // Pairs that may be flipped; gradients outside are zeroed. Absent means all.
  std::optional<BoolMatrix> candidates;
  int threads = 1;

  void validate() const {
    if (budget < 0) throw InvalidArgument("attack: negative budget");
    if (k < 1) throw InvalidArgument("attack: K must be >= 1");
    if (flips_per_iteration < 1) throw InvalidArgument("attack: flips_per_iteration must be >= 1");
    if (budget > 0 && flips_per_iteration > budget) {
      throw InvalidArgument("attack: flips_per_iteration exceeds the budget");
    }
    if (retrain_epochs && *retrain_epochs < 0) throw InvalidArgument("attack: negative retrain epochs");
  }
};

// Number of flips allowed for a fraction of the clean edge count (rounded down).
inline Index budget_from_fraction(Index edges, double fraction) {
  if (fraction < 0.0) throw InvalidArgument("budget fraction must be non-negative");
  return static_cast<Index>(std::floor(fraction * static_cast<double>(edges) + 1e-9));
}

// Gradients of the contrastive loss w.r.t. both view adjacencies.
struct ViewGradients {
  Matrix first;
  Matrix second;
  double loss = 0.0;
};

inline ViewGradients view_gradients(const EncoderParams& params, const View& v1, const View& v2,
                                    const ContrastiveConfig& cfg) {
  Tape tape;
  Var w1 = tape.constant(params.w1.value);
  Var w2 = tape.constant(params.w2.value);
  Var a1 = tape.variable(v1.adjacency);
  Var a2 = tape.variable(v2.adjacency);
  Var z1 = encode(w1, w2, a1, tape.constant(v1.features));
  Var z2 = encode(w1, w2, a2, tape.constant(v2.features));
  Var loss = nt_xent_loss(z1, z2, cfg.tau, cfg.cosine_eps);
  tape.backward(loss);
  return ViewGradients{a1.grad(), a2.grad(), loss.value()(0, 0)};
}

// Symmetrized sum of both views' gradients for one augmentation pair.
inline Matrix combine_view_gradients(const Matrix& first, const Matrix& second) {
  Matrix d = first + second;
  return ((d + d.transpose()) * 0.5).eval();
}

// Sums the combined gradients of K augmentation pairs, one pair per seed, in
// seed order.
inline Matrix accumulate_gradient(const Graph& g, const EncoderParams& params, const AugmentationSpec& spec,
                                  const ContrastiveConfig& cfg, std::span<const std::uint64_t> pair_seeds,
                                  int threads = 1) {
  if (pair_seeds.empty()) throw InvalidArgument("accumulate_gradient: K must be >= 1");
  spec.validate();
  auto one = [&](std::uint64_t seed) {
    Rng rng(seed);
    ViewPair views = augment(g, spec, rng);
    ViewGradients vg = view_gradients(params, views.first, views.second, cfg);
    return combine_view_gradients(vg.first, vg.second);
  };

  const Index n = g.num_nodes();
  Matrix total = Matrix::Zero(n, n);
  if (threads <= 1 || pair_seeds.size() == 1) {
    for (std::uint64_t s : pair_seeds) total += one(s);
    return total;
  }
  std::vector<Matrix> parts(pair_seeds.size());
  for (std::size_t start = 0; start < pair_seeds.size(); start += static_cast<std::size_t>(threads)) {
    const std::size_t stop = std::min(pair_seeds.size(), start + static_cast<std::size_t>(threads));
    std::vector<std::future<Matrix>> jobs;
    for (std::size_t k = start; k < stop; ++k) jobs.push_back(std::async(std::launch::async, one, pair_seeds[k]));
    for (std::size_t k = start; k < stop; ++k) parts[k] = jobs[k - start].get();
  }
  for (const Matrix& p : parts) total += p;
  return total;
}

// K pair seeds drawn from `rng`.
inline std::vector<std::uint64_t> draw_pair_seeds(Rng& rng, int k) {
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(k));
  for (auto& s : seeds) s = rng();
  return seeds;
}

inline Matrix accumulate_gradient(const Graph& g, const EncoderParams& params, const AugmentationSpec& spec,
                                  const ContrastiveConfig& cfg, int k, Rng& rng, int threads = 1) {
  if (k < 1) throw InvalidArgument("accumulate_gradient: K must be >= 1");
  std::vector<std::uint64_t> seeds = draw_pair_seeds(rng, k);
  return accumulate_gradient(g, params, spec, cfg, seeds, threads);
}

class NoEligibleFlip : public Error {
 public:
  using Error::Error;
};

// Up to `count` unfrozen upper-triangle pairs whose gradient points in a
// feasible direction (absent edge with positive gradient, present edge with
// negative gradient), ranked by |gradient|; ties go to the smaller (m, n).
inline std::vector<FlipCandidate> select_flips(const Matrix& delta, const Matrix& adjacency, const BoolMatrix& frozen,
                                               Index count) {
  const Index n = adjacency.rows();
  if (delta.rows() != n || delta.cols() != n || frozen.rows() != n || frozen.cols() != n) {
    throw ShapeError("select_flips: gradient, adjacency and mask shapes differ");
  }
  if (count < 1) throw InvalidArgument("select_flips: count must be >= 1");
  std::vector<FlipCandidate> eligible;
  for (Index m = 0; m < n; ++m) {
    for (Index c = m + 1; c < n; ++c) {
      const double d = delta(m, c);
      if (d != delta(c, m)) throw InvalidArgument("select_flips: gradient is not symmetric");
      if (frozen(m, c)) continue;
      const bool present = adjacency(m, c) != 0.0;
      if (present && d < 0.0) {
        eligible.push_back({m, c, FlipDirection::kDelete, d});
      } else if (!present && d > 0.0) {
        eligible.push_back({m, c, FlipDirection::kAdd, d});
      }
    }
  }
  if (eligible.empty()) throw NoEligibleFlip("select_flips: no unfrozen pair has a loss-increasing gradient");
  const auto before = [](const FlipCandidate& a, const FlipCandidate& b) {
    const double fa = std::abs(a.score), fb = std::abs(b.score);
    if (fa != fb) return fa > fb;
    if (a.m != b.m) return a.m < b.m;
    return a.n < b.n;
  };
  const auto take = static_cast<std::size_t>(std::min<Index>(count, static_cast<Index>(eligible.size())));
  std::partial_sort(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(take), eligible.end(), before);
  eligible.resize(take);
  return eligible;
}

// Toggles (m, n) and (n, m) and freezes both.
inline void apply_flip(Matrix& adjacency, BoolMatrix& frozen, Index m, Index n) {
  adjacency(m, n) = 1.0 - adjacency(m, n);
  adjacency(n, m) = adjacency(m, n);
  frozen(m, n) = true;
  frozen(n, m) = true;
}

// Called after each flip with the record and the state that includes it.
using FlipCallback = std::function<void(const FlipRecord&, const AttackState&)>;

// Per-iteration random streams: retraining and gradient pairs are seeded from
// (seed, iteration), so a run with a larger budget starts with exactly the
// flips of a smaller one and a resumed run continues the same trajectory.
inline std::uint64_t retrain_seed(std::uint64_t seed, std::int64_t iteration) {
  return derive_seed(seed, {static_cast<std::uint64_t>(iteration), 0});
}
inline std::uint64_t gradient_seed(std::uint64_t seed, std::int64_t iteration) {
  return derive_seed(seed, {static_cast<std::uint64_t>(iteration), 1});
}

// Iteratively retrains the encoder on the current poisoned graph, estimates
// the accumulated adjacency gradient, and flips the best feasible pairs until
// the budget is spent. Pass `resume` to continue a partially completed state.
inline AttackState clga_attack(const Graph& g, const AttackConfig& acfg, const ContrastiveConfig& ccfg,
                               const AugmentationSpec& spec, std::uint64_t seed, const AttackState* resume = nullptr,
                               const FlipCallback& on_flip = {}) {
  acfg.validate();
  ccfg.validate();
  spec.validate();
  const Index n = g.num_nodes();
  const Index pairs = n * (n - 1) / 2;
  if (acfg.budget > pairs) throw InvalidArgument("attack: budget exceeds the number of node pairs");

  AttackState state;
  if (resume) {
    state = *resume;
    if (state.clean_checksum != adjacency_checksum(g.adjacency)) {
      throw InvalidArgument("attack: resume state was produced from a different clean graph");
    }
    if (state.seed != seed) throw InvalidArgument("attack: resume seed does not match");
    state.budget = acfg.budget;
    state.status = AttackStatus::kComplete;
    state.message.clear();
  } else {
    state.adjacency = g.adjacency;
    state.frozen = g.frozen;
    state.budget = acfg.budget;
    state.seed = seed;
    state.clean_checksum = adjacency_checksum(g.adjacency);
  }
  state.attack = "clga";

  ContrastiveConfig retrain = ccfg;
  if (acfg.retrain_epochs) retrain.epochs = *acfg.retrain_epochs;

  std::int64_t iteration = state.flips.empty() ? 0 : state.flips.back().iteration + 1;
  std::optional<EncoderParams> warm;
  while (static_cast<Index>(state.flips.size()) < state.budget) {
    Graph current(state.adjacency, g.features, g.labels);
    current.frozen = state.frozen;

    Rng train_rng(retrain_seed(seed, iteration));
    TrainResult trained = train(current, spec, retrain, train_rng, acfg.warm_start && warm ? &*warm : nullptr);
    if (acfg.warm_start) warm = trained.params;

    Rng grad_rng(gradient_seed(seed, iteration));
    Matrix delta = accumulate_gradient(current, trained.params, spec, ccfg, acfg.k, grad_rng, acfg.threads);
    if (acfg.candidates) {
      const BoolMatrix& mask = *acfg.candidates;
      if (mask.rows() != n || mask.cols() != n) throw ShapeError("attack: candidate mask shape mismatch");
      delta = mask.select(delta, 0.0);
    }

    const Index remaining = state.budget - static_cast<Index>(state.flips.size());
    std::vector<FlipCandidate> chosen;
    try {
      chosen = select_flips(delta, state.adjacency, state.frozen, std::min(acfg.flips_per_iteration, remaining));
    } catch (const NoEligibleFlip& e) {
      state.status = AttackStatus::kHalted;
      state.message = std::string(e.what()) + " (iteration " + std::to_string(iteration) + ")";
      break;
    }

    const double first = trained.losses.empty() ? 0.0 : trained.losses.front();
    const double last = trained.losses.empty() ? 0.0 : trained.losses.back();
    for (const FlipCandidate& c : chosen) {
      apply_flip(state.adjacency, state.frozen, c.m, c.n);
      FlipRecord rec{iteration, c.m, c.n, c.direction, c.score, first, last};
      state.flips.push_back(rec);
      if (on_flip) on_flip(rec, state);
    }
    ++iteration;
  }
  return state;
}

// Flips `budget` distinct unfrozen node pairs chosen uniformly at random. The
// order is a partial Fisher-Yates shuffle, so a smaller budget with the same
// seed flips a prefix of a larger one.
inline AttackState random_flip_attack(const Graph& g, Index budget, std::uint64_t seed) {
  const Index n = g.num_nodes();
  std::vector<Edge> pool;
  for (Index m = 0; m < n; ++m)
    for (Index c = m + 1; c < n; ++c)
      if (!g.frozen(m, c)) pool.emplace_back(m, c);
  const auto pairs = static_cast<Index>(pool.size());
  if (budget < 0) throw InvalidArgument("random attack: negative budget");
  if (budget > pairs) {
    throw InvalidArgument("random attack: budget " + std::to_string(budget) + " exceeds " + std::to_string(pairs) +
                          " candidate pairs");
  }
  AttackState state;
  state.attack = "random";
  state.adjacency = g.adjacency;
  state.frozen = g.frozen;
  state.budget = budget;
  state.seed = seed;
  state.clean_checksum = adjacency_checksum(g.adjacency);

  Rng rng = make_rng(seed, {0x72616e64ULL});
  for (Index it = 0; it < budget; ++it) {
    std::uniform_int_distribution<Index> pick(it, pairs - 1);
    std::swap(pool[static_cast<std::size_t>(it)], pool[static_cast<std::size_t>(pick(rng))]);
    const auto [m, c] = pool[static_cast<std::size_t>(it)];
    const FlipDirection dir = state.adjacency(m, c) != 0.0 ? FlipDirection::kDelete : FlipDirection::kAdd;
    apply_flip(state.adjacency, state.frozen, m, c);
    state.flips.push_back(FlipRecord{it, m, c, dir, 0.0, 0.0, 0.0});
  }
  return state;
}

// The state after the first `budget` flips of `s`, replayed on `clean`. If `s`
// halted before reaching `budget`, the result keeps its halted status.
inline AttackState truncate_attack(const Graph& clean, const AttackState& s, Index budget) {
  if (budget < 0) throw InvalidArgument("truncate_attack: negative budget");
  if (s.clean_checksum != adjacency_checksum(clean.adjacency)) {
    throw InvalidArgument("truncate_attack: state was produced from a different clean graph");
  }
  AttackState out = s;
  out.adjacency = clean.adjacency;
  out.frozen = clean.frozen;
  out.budget = budget;
  const auto keep = std::min<std::size_t>(s.flips.size(), static_cast<std::size_t>(budget));
  out.flips.assign(s.flips.begin(), s.flips.begin() + static_cast<std::ptrdiff_t>(keep));
  for (const FlipRecord& f : out.flips) apply_flip(out.adjacency, out.frozen, f.m, f.n);
  if (static_cast<Index>(keep) == budget) {
    out.status = AttackStatus::kComplete;
    out.message.clear();
  } else if (s.status == AttackStatus::kComplete) {
    throw InvalidArgument("truncate_attack: budget exceeds the flips of a complete state");
  }
  return out;
}

}  // namespace clga
