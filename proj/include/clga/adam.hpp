#pragma once

#include <cmath>
#include <cstdint>

#include "clga/tensor.hpp"

namespace clga {

// Adam moments for one parameter tensor.
struct AdamState {
  Matrix m;
  Matrix v;
  std::int64_t t = 0;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // L2 penalty folded into the gradient (coupled, as in classic Adam).
  double weight_decay = 0.0;

  AdamState() = default;
  AdamState(Index rows, Index cols, double learning_rate = 0.01)
      : m(Matrix::Zero(rows, cols)), v(Matrix::Zero(rows, cols)), lr(learning_rate) {}

  static AdamState for_param(const Tensor& p, double learning_rate = 0.01) {
    return AdamState(p.rows(), p.cols(), learning_rate);
  }
};

// One bias-corrected Adam update of `param` using `param.grad`.
inline void adam_step(Tensor& param, AdamState& state) {
  if (!param.grad) throw InvalidArgument("adam_step: parameter has no gradient");
  const Matrix& g0 = *param.grad;
  if (g0.rows() != param.rows() || g0.cols() != param.cols()) {
    throw ShapeError("adam_step: gradient shape " + shape_str(g0) + " does not match parameter " +
                     shape_str(param.value));
  }
  if (state.m.rows() != param.rows() || state.m.cols() != param.cols()) {
    throw ShapeError("adam_step: optimizer state shape " + shape_str(state.m) + " does not match parameter " +
                     shape_str(param.value));
  }
  Matrix g = g0;
  if (state.weight_decay != 0.0) g += state.weight_decay * param.value;

  state.t += 1;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * g;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const double step = state.lr / bc1;
  param.value.array() -=
      step * state.m.array() / ((state.v.array() / bc2).sqrt() + state.eps);
  if (!param.value.allFinite()) throw NumericalError("adam_step: parameter became non-finite");
}

}  // namespace clga
