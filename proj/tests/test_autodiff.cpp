#include <gtest/gtest.h>

#include <functional>

#include "abflow/autodiff.hpp"
#include "abflow/rng.hpp"
#include "test_util.hpp"

using namespace abflow;
using ad::Matrix;
using ad::Tape;
using ad::Var;

namespace {

using Builder = std::function<Var(Tape&, const Var&)>;

Matrix random_matrix(Rng& rng, int r, int c, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// central differences of the scalar built from x, against the tape gradient
double max_grad_error(const Matrix& x0, const Builder& build, double h = 1e-5) {
  Tape tape;
  Var x = tape.variable(x0);
  Var loss = build(tape, x);
  tape.backward(loss);
  Matrix g = tape.grad(x);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    Matrix xp = x0, xm = x0;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    Tape tp, tm;
    double fp = build(tp, tp.constant(xp)).scalar();
    double fm = build(tm, tm.constant(xm)).scalar();
    double fd = (fp - fm) / (2 * h);
    worst = std::max(worst, abflow::testing::rel_err(g.data()[i], fd, 1e-6));
  }
  return worst;
}

}  // namespace

TEST(Autodiff, SumOfSquaresGradientIsTwiceInput) {
  Rng rng(1);
  Matrix x = random_matrix(rng, 4, 3);
  Tape tape;
  Var v = tape.variable(x);
  tape.backward(ad::sum(ad::square(v)));
  EXPECT_EQ(tape.grad(v), 2.0 * x);
}

TEST(Autodiff, ConstantLossHasZeroGradient) {
  Tape tape;
  Var v = tape.variable(Matrix::Ones(2, 2));
  Var c = tape.constant(Matrix::Constant(1, 1, 3.0));
  tape.backward(c);
  EXPECT_EQ(tape.grad(v), Matrix::Zero(2, 2));
}

TEST(Autodiff, ElementwiseOps) {
  Rng rng(2);
  Matrix x = random_matrix(rng, 3, 4);
  Matrix c = random_matrix(rng, 3, 4);
  EXPECT_LT(max_grad_error(x,
                           [&](Tape& t, const Var& v) {
                             Var k = t.constant(c);
                             return ad::sum(ad::mul(ad::tanh(ad::add(v, k)), ad::sub(v, ad::scale(k, 0.5))));
                           }),
            1e-6);
  Matrix p = x.cwiseAbs().array() + 0.1;
  EXPECT_LT(max_grad_error(p, [](Tape&, const Var& v) { return ad::sum(ad::log_floor(v, 1e-12)); }), 1e-6);
}

TEST(Autodiff, LinearOps) {
  Rng rng(3);
  Matrix x = random_matrix(rng, 5, 4), w = random_matrix(rng, 3, 4), b = random_matrix(rng, 1, 3);
  EXPECT_LT(max_grad_error(w,
                           [&](Tape& t, const Var& v) {
                             return ad::sum(ad::square(ad::affine(t.constant(x), v, t.constant(b))));
                           }),
            1e-6);
  EXPECT_LT(max_grad_error(b,
                           [&](Tape& t, const Var& v) {
                             return ad::sum(ad::tanh(ad::affine(t.constant(x), t.constant(w), v)));
                           }),
            1e-6);
  EXPECT_LT(max_grad_error(x,
                           [&](Tape& t, const Var& v) {
                             return ad::mean(ad::square(ad::matmul(v, t.constant(w.transpose()))));
                           }),
            1e-6);
  EXPECT_LT(max_grad_error(x,
                           [&](Tape& t, const Var& v) {
                             Var s = t.constant(Matrix::Constant(1, 1, 0.3));
                             return ad::sum(ad::square(ad::add_broadcast(ad::sum_rows(v), s)));
                           }),
            1e-6);
}

TEST(Autodiff, SoftmaxAndPick) {
  Rng rng(4);
  Matrix x = random_matrix(rng, 3, 5);
  Tape t0;
  Var sm = ad::softmax_rows(t0.constant(x));
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_NEAR(sm.value().row(i).sum(), 1.0, 1e-15);
  EXPECT_LT(max_grad_error(x,
                           [](Tape&, const Var& v) {
                             return ad::sum(ad::log_floor(ad::pick(ad::softmax_rows(v), {1, 4, 0}), 1e-12));
                           }),
            1e-6);
  // zero logits give exactly uniform rows
  Tape t1;
  Var u = ad::softmax_rows(t1.constant(Matrix::Zero(2, 4)));
  EXPECT_EQ(u.value(), Matrix::Constant(2, 4, 0.25));
}

TEST(Autodiff, NormalizeRows) {
  Rng rng(6);
  Matrix x = random_matrix(rng, 3, 4).array().abs() + 0.1;
  Tape t0;
  Var n = ad::normalize_rows(t0.constant(x));
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_NEAR(n.value().row(i).sum(), 1.0, 1e-15);
  EXPECT_LT(max_grad_error(x,
                           [](Tape&, const Var& v) {
                             return ad::sum(ad::log_floor(ad::pick(ad::normalize_rows(v), {0, 3, 2}), 1e-12));
                           }),
            1e-6);
  Tape t1;
  EXPECT_THROW(ad::normalize_rows(t1.constant(Matrix::Zero(1, 3))), ad::NumericError);
}

TEST(Autodiff, RotationOps) {
  Rng rng(5);
  Matrix v = random_matrix(rng, 4, 3, 0.8);
  v.row(3) *= 1e-3;  // exercise the small-angle branch
  std::vector<Mat3> left, target;
  std::vector<double> var{0.05, 0.3, 1.5, 0.01};
  for (int i = 0; i < 4; ++i) {
    left.push_back(sample_uniform(rng).matrix());
    target.push_back(sample_uniform(rng).matrix());
  }
  EXPECT_LT(max_grad_error(v,
                           [&](Tape&, const Var& x) {
                             return ad::sum(ad::trace_inner_const(target, ad::rot_compose_const_left(left, ad::exp_map_rows(x))));
                           }),
            1e-6);
  // targets near the means keep the densities away from the tails
  std::vector<Mat3> near;
  for (int i = 0; i < 4; ++i) near.push_back(left[i] * exp_map(Vec3(0.2, -0.1, 0.15)).matrix());
  EXPECT_LT(max_grad_error(v * 0.3,
                           [&](Tape&, const Var& x) {
                             return ad::sum(
                                 ad::igso3_log_prob_rows(ad::rot_compose_const_left(left, ad::exp_map_rows(x)), near, var));
                           }),
            1e-5);
}

TEST(Autodiff, ExpMapRowsMatchesScalarExpMap) {
  Rng rng(6);
  Matrix v = random_matrix(rng, 6, 3);
  Tape t;
  Var r = ad::exp_map_rows(t.constant(v));
  for (Eigen::Index i = 0; i < 6; ++i) {
    Mat3 expect = exp_map(v.row(i).transpose()).matrix();
    EXPECT_LT((ad::row_to_mat3(r.value(), i) - expect).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Autodiff, NonFiniteValueNamesOperation) {
  Tape t;
  Var x = t.variable(Matrix::Constant(1, 1, 1e308));
  try {
    ad::scale(x, 10.0);
    FAIL() << "expected NumericError";
  } catch (const ad::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("scale"), std::string::npos);
  }
}

TEST(Autodiff, ConstantsSkipBackward) {
  Tape t;
  Var c = t.constant(Matrix::Ones(3, 3));
  Var y = ad::sum(ad::tanh(c));
  EXPECT_FALSE(t.requires_grad(y.id()));
}
