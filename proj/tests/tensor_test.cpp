#include "clga/adam.hpp"
#include "clga/tensor.hpp"

#include <cmath>
#include <functional>
#include <random>

#include "gtest/gtest.h"
#include "oracles.hpp"

namespace clga {
namespace {

using UnaryOp = std::function<Var(Var)>;

// Checks d/dx sum(op(x) * weights) against central differences.
double primitive_grad_error(const UnaryOp& op, const Matrix& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Matrix weights;
  auto loss = [&](const Matrix& in, Tape& t, Var& leaf) {
    leaf = t.variable(in);
    Var out = op(leaf);
    if (weights.size() == 0) weights = oracle::random_matrix(out.rows(), out.cols(), rng);
    return sum(mul(out, t.constant(weights)));
  };
  Tape tape;
  Var leaf;
  Var l = loss(x, tape, leaf);
  tape.backward(l);
  Matrix analytic = leaf.grad();
  auto f = [&](const Matrix& in) {
    Tape t;
    Var v;
    return loss(in, t, v).value()(0, 0);
  };
  Matrix numeric = oracle::central_difference(f, x, 1e-5);
  return oracle::max_rel_err(analytic, numeric, 1e-9);
}

class PrimitiveGradTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{1234};
  Matrix rand(Index r, Index c, double lo = -1.0, double hi = 1.0) { return oracle::random_matrix(r, c, rng, lo, hi); }
};

TEST(MatmulTest, IdentityAndScalar) {
  Tape t;
  Matrix eye(2, 2), b(2, 2);
  eye << 1, 0, 0, 1;
  b << 3, 4, 5, 6;
  EXPECT_EQ(matmul(t.constant(eye), t.constant(b)).value(), b);
  Matrix two(1, 1), three(1, 1);
  two << 2;
  three << 3;
  EXPECT_EQ(matmul(t.constant(two), t.constant(three)).value()(0, 0), 6.0);
}

TEST(MatmulTest, ShapeMismatchThrows) {
  Tape t;
  EXPECT_THROW(matmul(t.constant(Matrix::Zero(2, 3)), t.constant(Matrix::Zero(2, 3))), ShapeError);
}

TEST(MatmulTest, GradientOfSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  Matrix a = oracle::random_matrix(4, 3, rng);
  Matrix b = oracle::random_matrix(3, 2, rng);
  Tape t;
  Var va = t.variable(a);
  Var l = sum(matmul(va, t.constant(b)));
  t.backward(l);
  auto f = [&](const Matrix& x) { return oracle::naive_matmul(x, b).sum(); };
  Matrix numeric = oracle::central_difference(f, a, 1e-5);
  EXPECT_LT(oracle::max_rel_err(va.grad(), numeric), 1e-6);
}

TEST(BackwardTest, LinearAndQuadratic) {
  std::mt19937_64 rng(3);
  Matrix a = oracle::random_matrix(3, 3, rng);
  {
    Tape t;
    Var v = t.variable(a);
    t.backward(sum(v));
    EXPECT_EQ(v.grad(), Matrix::Ones(3, 3));
  }
  {
    Tape t;
    Var v = t.variable(a);
    t.backward(sum(mul(v, v)));
    EXPECT_TRUE(v.grad().isApprox(2.0 * a, 1e-15));
  }
}

TEST(BackwardTest, RejectsNonScalarLoss) {
  Tape t;
  Var v = t.variable(Matrix::Ones(2, 2));
  EXPECT_THROW(t.backward(scale(v, 2.0)), ShapeError);
}

TEST(BackwardTest, RejectsDisconnectedLoss) {
  Tape t;
  t.variable(Matrix::Ones(2, 2));
  Var c = t.constant(Matrix::Ones(2, 2));
  EXPECT_THROW(t.backward(sum(c)), Error);
}

TEST(BackwardTest, UnusedLeafGetsZeroGradient) {
  Tape t;
  Var used = t.variable(Matrix::Ones(2, 2));
  Var unused = t.variable(Matrix::Constant(3, 1, 5.0));
  t.backward(sum(used));
  EXPECT_EQ(unused.grad(), Matrix::Zero(3, 1));
}

TEST(BackwardTest, VisitsNodesInReverseRecordingOrder) {
  Tape t;
  Var x = t.variable(Matrix::Constant(2, 2, 0.5));
  Var y = exp(mul(x, x));
  Var z = add(y, scale(x, 3.0));
  t.backward(sum(z));
  const auto& trace = t.backward_trace();
  ASSERT_FALSE(trace.empty());
  for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_GT(trace[i - 1], trace[i]);
  EXPECT_EQ(trace.back(), x.id());
}

TEST(BackwardTest, GradientShapeMatchesValue) {
  Tape t;
  Var x = t.variable(Matrix::Ones(3, 5));
  t.backward(sum(row_sum(x)));
  EXPECT_EQ(x.grad().rows(), 3);
  EXPECT_EQ(x.grad().cols(), 5);
}

TEST(BackwardTest, NonFiniteValueNamesTheOp) {
  Tape t;
  Var x = t.variable(Matrix::Constant(1, 1, -1.0));
  try {
    log(x);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("'log'"), std::string::npos);
  }
}

TEST(BackwardTest, ReplayIsBitIdentical) {
  std::mt19937_64 rng(11);
  Matrix a = oracle::random_matrix(5, 4, rng);
  Matrix b = oracle::random_matrix(4, 3, rng);
  auto run = [&] {
    Tape t;
    Var va = t.variable(a);
    Var vb = t.variable(b);
    Var c = cosine_similarity(matmul(va, vb), matmul(va, vb));
    t.backward(sum(row_logsumexp(c)));
    return std::make_pair(va.grad(), vb.grad());
  };
  auto [g1, h1] = run();
  auto [g2, h2] = run();
  EXPECT_EQ(g1, g2);
  EXPECT_EQ(h1, h2);
}

TEST_F(PrimitiveGradTest, ElementwiseOps) {
  const Matrix other = rand(4, 3);
  EXPECT_LT(primitive_grad_error([](Var x) { return exp(x); }, rand(4, 3), 1), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return log(x); }, rand(4, 3, 0.5, 1.5), 2), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return pow(x, -0.5); }, rand(4, 3, 0.5, 1.5), 3), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return pow(x, 3.0); }, rand(4, 3), 4), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return scale(x, -2.5); }, rand(4, 3), 5), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return log_sigmoid(scale(x, 4.0)); }, rand(4, 3), 6), 1e-5);
  EXPECT_LT(primitive_grad_error([&](Var x) { return mul(x, x.tape().constant(other)); }, rand(4, 3), 7), 1e-5);
  EXPECT_LT(primitive_grad_error([&](Var x) { return add(x, x.tape().constant(other)); }, rand(4, 3), 8), 1e-5);
  EXPECT_LT(primitive_grad_error([&](Var x) { return sub(x.tape().constant(other), x); }, rand(4, 3), 9), 1e-5);
}

TEST_F(PrimitiveGradTest, ReluAwayFromKink) {
  Matrix x = rand(5, 4);
  for (Index i = 0; i < x.size(); ++i) {
    double& v = x.data()[i];
    if (std::abs(v) < 0.05) v = 0.3;
  }
  EXPECT_LT(primitive_grad_error([](Var v) { return relu(v); }, x, 10), 1e-5);
}

TEST_F(PrimitiveGradTest, StructuralOps) {
  const Matrix right = rand(3, 5);
  EXPECT_LT(primitive_grad_error([&](Var x) { return matmul(x, x.tape().constant(right)); }, rand(4, 3), 11), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return transpose(x); }, rand(4, 3), 12), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return sum(x); }, rand(4, 3), 13), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return row_sum(x); }, rand(4, 3), 14), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return diag(x); }, rand(4, 4), 15), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return concat_cols(x, scale(x, 2.0)); }, rand(4, 3), 16), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return gather(x, {{0, 1}, {3, 2}, {0, 1}}); }, rand(4, 3), 17), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return select_rows(x, {2, 0, 2, 3}); }, rand(4, 3), 24), 1e-5);
  const Matrix bias = rand(1, 3);
  EXPECT_LT(primitive_grad_error([&](Var x) { return add_rowwise(x, x.tape().constant(bias)); }, rand(4, 3), 25), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return add_rowwise(x, select_rows(x, {1})); }, rand(4, 3), 26), 1e-5);
}

TEST_F(PrimitiveGradTest, NormalizationOps) {
  const Matrix other = rand(6, 3);
  EXPECT_LT(primitive_grad_error([](Var x) { return row_normalize(x); }, rand(4, 3), 18), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return row_normalize(x, 1e-3); }, rand(4, 3), 19), 1e-5);
  EXPECT_LT(primitive_grad_error([&](Var x) { return cosine_similarity(x, x.tape().constant(other)); }, rand(4, 3), 20),
            1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return cosine_similarity(x, x); }, rand(4, 3), 21), 1e-5);
  EXPECT_LT(primitive_grad_error([](Var x) { return row_logsumexp(scale(x, 3.0)); }, rand(4, 5), 22), 1e-5);
  BoolMatrix mask = BoolMatrix::Constant(4, 5, false);
  mask(0, 0) = mask(1, 3) = mask(2, 4) = true;
  EXPECT_LT(primitive_grad_error([&](Var x) { return row_logsumexp(x, &mask); }, rand(4, 5), 23), 1e-5);
}

TEST(NormalizationOpsTest, ZeroNormRowIsAnErrorWithoutGuard) {
  Tape t;
  Matrix x = Matrix::Ones(3, 2);
  x.row(1).setZero();
  try {
    cosine_similarity(t.variable(x), t.constant(Matrix::Ones(2, 2)));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("node 1"), std::string::npos);
  }
  EXPECT_NO_THROW(cosine_similarity(t.variable(x), t.constant(Matrix::Ones(2, 2)), 1e-12));
}

TEST(NormalizationOpsTest, LogsumexpIsStableForLargeInputs) {
  Tape t;
  Matrix x(1, 3);
  x << 1000.0, 1000.0, 1000.0;
  EXPECT_NEAR(row_logsumexp(t.constant(x)).value()(0, 0), 1000.0 + std::log(3.0), 1e-9);
}

// Equivalent expressions must give identical gradients through different tapes.
TEST(CompositionTest, EquivalentExpressionsAgree) {
  std::mt19937_64 rng(99);
  const Matrix a = oracle::random_matrix(4, 3, rng);
  const Matrix b = oracle::random_matrix(3, 5, rng);
  const Matrix c = oracle::random_matrix(5, 2, rng);
  const Matrix w = oracle::random_matrix(4, 2, rng);

  using Build = std::function<Var(Var)>;
  auto grad_of = [](const Matrix& x, const Build& build) {
    Tape t;
    Var v = t.variable(x);
    t.backward(build(v));
    return v.grad();
  };
  struct Pair {
    const char* name;
    Matrix x;
    Build lhs, rhs;
  };
  std::vector<Pair> cases = {
      {"matmul associativity", a,
       [&](Var x) { return sum(mul(matmul(matmul(x, x.tape().constant(b)), x.tape().constant(c)), x.tape().constant(w))); },
       [&](Var x) {
         Var bc = matmul(x.tape().constant(b), x.tape().constant(c));
         return sum(mul(matmul(x, bc), x.tape().constant(w)));
       }},
      {"square via pow vs mul", a, [](Var x) { return sum(exp(pow(x, 2.0))); },
       [](Var x) { return sum(exp(mul(x, x))); }},
      {"sub vs add of negation", a, [&](Var x) { return sum(exp(sub(x, scale(x, 0.3)))); },
       [&](Var x) { return sum(exp(add(x, scale(x, -0.3)))); }},
      {"double transpose", a, [](Var x) { return sum(log_sigmoid(transpose(transpose(x)))); },
       [](Var x) { return sum(log_sigmoid(x)); }},
      {"cosine vs normalized product", a,
       [](Var x) { return sum(row_logsumexp(cosine_similarity(x, x))); },
       [](Var x) {
         Var u = row_normalize(x);
         return sum(row_logsumexp(matmul(u, transpose(u))));
       }},
  };
  for (const auto& cs : cases) {
    Matrix g1 = grad_of(cs.x, cs.lhs);
    Matrix g2 = grad_of(cs.x, cs.rhs);
    EXPECT_LT(oracle::max_rel_err(g1, g2, 1e-14), 1e-10) << cs.name;
  }
}

TEST(AdamTest, FirstStepMovesByLearningRateTimesSign) {
  Tensor p(Matrix::Constant(2, 3, 0.5), true);
  Matrix g(2, 3);
  g << 0.3, -2.0, 5.0, -0.01, 1.0, -7.0;
  p.grad = g;
  AdamState s = AdamState::for_param(p, 0.01);
  adam_step(p, s);
  EXPECT_EQ(s.t, 1);
  for (Index i = 0; i < g.size(); ++i) {
    const double sign = g.data()[i] > 0 ? 1.0 : -1.0;
    EXPECT_NEAR(p.value.data()[i], 0.5 - 0.01 * sign, 1e-6);
  }
}

TEST(AdamTest, ZeroGradientIsFixedPoint) {
  Tensor p(Matrix::Constant(2, 2, 1.5), true);
  p.grad = Matrix::Zero(2, 2);
  AdamState s = AdamState::for_param(p);
  adam_step(p, s);
  adam_step(p, s);
  EXPECT_EQ(p.value, Matrix::Constant(2, 2, 1.5));
  EXPECT_EQ(s.t, 2);
}

TEST(AdamTest, MissingGradientThrows) {
  Tensor p(Matrix::Ones(1, 1), true);
  AdamState s = AdamState::for_param(p);
  EXPECT_THROW(adam_step(p, s), InvalidArgument);
}

TEST(AdamTest, MatchesScalarReferenceOnQuadratic) {
  // Scalar Adam written out by hand.
  double x_ref = 1.0, m = 0.0, v = 0.0;
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor p(Matrix::Constant(1, 1, 1.0), true);
  AdamState s = AdamState::for_param(p, lr);
  double f_prev = 1.0;
  for (int t = 1; t <= 2; ++t) {
    const double g = 2.0 * x_ref;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    x_ref -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);

    p.grad = Matrix::Constant(1, 1, 2.0 * p.value(0, 0));
    adam_step(p, s);
    EXPECT_NEAR(p.value(0, 0), x_ref, 1e-15);
    const double f = p.value(0, 0) * p.value(0, 0);
    EXPECT_LT(f, f_prev);
    f_prev = f;
  }
}

}  // namespace
}  // namespace clga
