#pragma once

// Two-layer GCN encoder, NT-Xent contrastive loss, and the training loop.

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "clga/adam.hpp"
#include "clga/graph.hpp"
#include "clga/random.hpp"
#include "clga/tensor.hpp"

namespace clga {

struct EncoderParams {
  Tensor w1;  // d x hidden
  Tensor w2;  // hidden x out

  Index input_dim() const { return w1.rows(); }
  Index hidden_dim() const { return w1.cols(); }
  Index output_dim() const { return w2.cols(); }

  // Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)) per layer.
  static EncoderParams glorot(Index input_dim, Index hidden_dim, Index output_dim, Rng& rng) {
    if (input_dim < 1 || hidden_dim < 1 || output_dim < 1) throw InvalidArgument("encoder: dimensions must be positive");
    auto init = [&rng](Index fan_in, Index fan_out) {
      const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> u(-a, a);
      Matrix w(fan_in, fan_out);
      for (Index i = 0; i < fan_in; ++i)
        for (Index j = 0; j < fan_out; ++j) w(i, j) = u(rng);
      return Tensor(std::move(w), true);
    };
    EncoderParams p;
    p.w1 = init(input_dim, hidden_dim);
    p.w2 = init(hidden_dim, output_dim);
    return p;
  }
};

struct ContrastiveConfig {
  double tau = 0.4;
  int epochs = 500;
  double learning_rate = 0.01;
  Index hidden_dim = 128;
  Index output_dim = 128;
  // Stop when the training loss has not improved for this many epochs and
  // return the best parameters seen.
  std::optional<int> patience;
  // > 0 adds eps to row norms in cosine similarity; 0 makes zero-norm rows an error.
  double cosine_eps = 0.0;

  void validate() const {
    if (!(tau > 0.0)) throw InvalidArgument("contrastive config: tau must be positive");
    if (epochs < 0) throw InvalidArgument("contrastive config: negative epoch count");
    if (patience && *patience < 1) throw InvalidArgument("contrastive config: patience must be >= 1");
  }
};

namespace detail {

// norm_adj * x * w, multiplying in the cheaper order.
inline Var propagate(Var norm_adj, Var x, Var w) {
  if (x.cols() > w.cols()) return matmul(norm_adj, matmul(x, w));
  return matmul(matmul(norm_adj, x), w);
}

}  // namespace detail

// Embeddings norm(A) * relu(norm(A) * X * W1) * W2, fully on the tape.
inline Var encode(Var w1, Var w2, Var adjacency, Var features) {
  if (features.rows() != adjacency.rows()) {
    throw ShapeError("encode: " + std::to_string(features.rows()) + " feature rows for " +
                     std::to_string(adjacency.rows()) + " nodes");
  }
  if (features.cols() != w1.rows()) {
    throw ShapeError("encode: feature width " + std::to_string(features.cols()) + " != encoder input " +
                     std::to_string(w1.rows()));
  }
  if (w1.cols() != w2.rows()) throw ShapeError("encode: layer widths do not chain");
  Var a = normalize(adjacency);
  Var h = relu(detail::propagate(a, features, w1));
  return detail::propagate(a, h, w2);
}

// Value-only embeddings.
inline Matrix embed(const EncoderParams& params, const Matrix& adjacency, const Matrix& features) {
  Tape t;
  Var out = encode(t.constant(params.w1.value), t.constant(params.w2.value), t.constant(adjacency),
                   t.constant(features));
  return out.value();
}

// Sum over nodes of l(e1_i, e2_i) + l(e2_i, e1_i), with cosine similarity and
// temperature tau. Each term is -s_pos + logsumexp over the positive, the
// inter-view negatives and the intra-view negatives.
inline Var nt_xent_loss(Var e1, Var e2, double tau, double cosine_eps = 0.0) {
  if (e1.rows() != e2.rows() || e1.cols() != e2.cols()) {
    throw ShapeError("nt_xent_loss: embedding shapes differ: " + shape_str(e1.value()) + " vs " +
                     shape_str(e2.value()));
  }
  if (e1.rows() < 1) throw InvalidArgument("nt_xent_loss: need at least one node");
  if (!(tau > 0.0)) throw InvalidArgument("nt_xent_loss: tau must be positive");
  const Index n = e1.rows();
  const double inv_tau = 1.0 / tau;

  Var s12 = scale(cosine_similarity(e1, e2, cosine_eps), inv_tau);
  Var s11 = scale(cosine_similarity(e1, e1, cosine_eps), inv_tau);
  Var s22 = scale(cosine_similarity(e2, e2, cosine_eps), inv_tau);

  BoolMatrix self_pairs = BoolMatrix::Constant(n, 2 * n, false);
  for (Index i = 0; i < n; ++i) self_pairs(i, n + i) = true;

  Var lse1 = row_logsumexp(concat_cols(s12, s11), &self_pairs);
  Var lse2 = row_logsumexp(concat_cols(transpose(s12), s22), &self_pairs);
  Var positives = sum(diag(s12));
  return sub(add(sum(lse1), sum(lse2)), scale(positives, 2.0));
}

struct TrainResult {
  EncoderParams params;
  std::vector<double> losses;  // one entry per completed epoch
};

// Carries the loss trace of a run that produced a non-finite value.
class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, std::vector<double> trace)
      : NumericalError(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

// Loss and parameter gradients for one view pair. Gradients land in params.w*.grad.
inline double contrastive_step_gradients(EncoderParams& params, const ViewPair& views, const ContrastiveConfig& cfg,
                                         Tape& tape) {
  tape.clear();
  Var w1 = tape.leaf(params.w1);
  Var w2 = tape.leaf(params.w2);
  Var z1 = encode(w1, w2, tape.constant(views.first.adjacency), tape.constant(views.first.features));
  Var z2 = encode(w1, w2, tape.constant(views.second.adjacency), tape.constant(views.second.features));
  Var loss = nt_xent_loss(z1, z2, cfg.tau, cfg.cosine_eps);
  tape.backward(loss);
  tape.export_grad(w1, params.w1);
  tape.export_grad(w2, params.w2);
  return loss.value()(0, 0);
}

// Minimizes the contrastive loss over encoder weights, drawing a fresh view
// pair every epoch. Starts from `init` when given, else from a Glorot draw.
inline TrainResult train(const Graph& g, const AugmentationSpec& spec, const ContrastiveConfig& cfg, Rng& rng,
                         const EncoderParams* init = nullptr) {
  cfg.validate();
  spec.validate();
  TrainResult result;
  result.params = init ? *init : EncoderParams::glorot(g.feature_dim(), cfg.hidden_dim, cfg.output_dim, rng);
  EncoderParams& p = result.params;
  p.w1.requires_grad = true;
  p.w2.requires_grad = true;
  if (p.input_dim() != g.feature_dim()) throw ShapeError("train: encoder input width does not match features");

  AdamState s1 = AdamState::for_param(p.w1, cfg.learning_rate);
  AdamState s2 = AdamState::for_param(p.w2, cfg.learning_rate);
  Tape tape;
  EncoderParams best = p;
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    ViewPair views = augment(g, spec, rng);
    double loss = 0.0;
    try {
      loss = contrastive_step_gradients(p, views, cfg, tape);
    } catch (const NumericalError& e) {
      throw TrainingDiverged("train: diverged at epoch " + std::to_string(epoch) + ": " + e.what(), result.losses);
    }
    result.losses.push_back(loss);
    // The loss was measured at the pre-step parameters.
    if (cfg.patience) {
      if (loss < best_loss) {
        best_loss = loss;
        best = p;
        since_best = 0;
      } else if (++since_best >= *cfg.patience) {
        p = best;
        break;
      }
    }
    try {
      adam_step(p.w1, s1);
      adam_step(p.w2, s2);
    } catch (const NumericalError& e) {
      throw TrainingDiverged("train: diverged at epoch " + std::to_string(epoch) + ": " + e.what(), result.losses);
    }
  }
  p.w1.zero_grad();
  p.w2.zero_grad();
  return result;
}

}  // namespace clga
