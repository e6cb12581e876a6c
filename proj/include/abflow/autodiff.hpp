#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records every operation in creation order, which is already a
// topological order, so backward() is a single reverse sweep. The operation
// set is closed: it holds exactly what the denoiser and the training losses
// need. Every recorded value and every propagated gradient is checked for
// finiteness and a NumericError names the offending operation.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "abflow/so3.hpp"

namespace abflow::ad {

using Matrix = Eigen::MatrixXd;

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  double scalar() const { return value()(0, 0); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Adds the upstream gradient of node `self` into its inputs.
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix v, const char* op = "constant") { return push(op, std::move(v), {}, nullptr, false); }
  Var variable(Matrix v) { return push("variable", std::move(v), {}, nullptr, true); }

  /// Records an operation. The node needs a gradient iff one of its inputs does.
  Var record(const char* op, Matrix value, std::vector<std::size_t> inputs, Backward bw) {
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
    if (!needs) return push(op, std::move(value), {}, nullptr, false);
    return push(op, std::move(value), std::move(inputs), std::move(bw), true);
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const char* op(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() target w.r.t. node `v` (zeros if unreached).
  Matrix grad(const Var& v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  const Matrix& upstream(std::size_t self) const { return nodes_[self].grad; }

  /// Accumulates g into the gradient of node `id` (ignored for constants).
  void accumulate(std::size_t id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (!g.allFinite()) throw NumericError(std::string("non-finite gradient flowing into '") + n.op + "'");
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void backward(const Var& loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: variable from another tape");
    if (loss.rows() != 1 || loss.cols() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      try {
        n.backward(*this, i);
      } catch (const NumericError& e) {
        throw NumericError(std::string("backward of '") + n.op + "': " + e.what());
      }
    }
  }

 private:
  struct Node {
    const char* op;
    Matrix value;
    Matrix grad;
    bool requires_grad;
    std::vector<std::size_t> inputs;
    Backward backward;
  };

  Var push(const char* op, Matrix v, std::vector<std::size_t> inputs, Backward bw, bool needs) {
    if (!v.allFinite()) throw NumericError(std::string("non-finite value produced by '") + op + "'");
    nodes_.push_back(Node{op, std::move(v), Matrix(), needs, std::move(inputs), std::move(bw)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

inline Matrix scalar_matrix(double x) { return Matrix::Constant(1, 1, x); }

// ---- elementwise and linear algebra -----------------------------------------

inline Var add(const Var& a, const Var& b) {
  std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("add", a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, std::size_t s) {
    t.accumulate(ia, t.upstream(s));
    t.accumulate(ib, t.upstream(s));
  });
}

inline Var sub(const Var& a, const Var& b) {
  std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("sub", a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, std::size_t s) {
    t.accumulate(ia, t.upstream(s));
    t.accumulate(ib, -t.upstream(s));
  });
}

inline Var mul(const Var& a, const Var& b) {
  std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("mul", a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, std::size_t s) {
    t.accumulate(ia, t.upstream(s).cwiseProduct(t.value(ib)));
    t.accumulate(ib, t.upstream(s).cwiseProduct(t.value(ia)));
  });
}

inline Var scale(const Var& a, double k) {
  std::size_t ia = a.id();
  return a.tape()->record("scale", a.value() * k, {ia},
                          [ia, k](Tape& t, std::size_t s) { t.accumulate(ia, t.upstream(s) * k); });
}

inline Var add_scalar(const Var& a, double k) {
  std::size_t ia = a.id();
  Matrix v = a.value().array() + k;
  return a.tape()->record("add_scalar", std::move(v), {ia},
                          [ia](Tape& t, std::size_t s) { t.accumulate(ia, t.upstream(s)); });
}

/// Broadcast a 1x1 variable against a matrix: a + s.
inline Var add_broadcast(const Var& a, const Var& s) {
  std::size_t ia = a.id(), is = s.id();
  Matrix v = a.value().array() + s.scalar();
  return a.tape()->record("add_broadcast", std::move(v), {ia, is}, [ia, is](Tape& t, std::size_t self) {
    t.accumulate(ia, t.upstream(self));
    t.accumulate(is, scalar_matrix(t.upstream(self).sum()));
  });
}

inline Var matmul(const Var& a, const Var& b) {
  std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record("matmul", a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, std::size_t s) {
    const Matrix& g = t.upstream(s);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// x W^T + b for x (m x in), W (out x in), b (1 x out).
inline Var affine(const Var& x, const Var& w, const Var& b) {
  std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  Matrix v = x.value() * w.value().transpose();
  v.rowwise() += b.value().row(0);
  return x.tape()->record("affine", std::move(v), {ix, iw, ib}, [ix, iw, ib](Tape& t, std::size_t s) {
    const Matrix& g = t.upstream(s);
    if (t.requires_grad(ix)) t.accumulate(ix, g * t.value(iw));
    if (t.requires_grad(iw)) t.accumulate(iw, g.transpose() * t.value(ix));
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

inline Var tanh(const Var& a) {
  std::size_t ia = a.id();
  Matrix v = a.value().array().tanh();
  return a.tape()->record("tanh", std::move(v), {ia}, [ia](Tape& t, std::size_t s) {
    const Matrix& y = t.value(s);
    t.accumulate(ia, (t.upstream(s).array() * (1.0 - y.array().square())).matrix());
  });
}

inline Var square(const Var& a) {
  std::size_t ia = a.id();
  Matrix v = a.value().array().square();
  return a.tape()->record("square", std::move(v), {ia}, [ia](Tape& t, std::size_t s) {
    t.accumulate(ia, (2.0 * t.upstream(s).array() * t.value(ia).array()).matrix());
  });
}

/// log(max(a, floor)); zero gradient where the floor is active.
inline Var log_floor(const Var& a, double floor) {
  std::size_t ia = a.id();
  Matrix v = a.value().array().max(floor).log();
  return a.tape()->record("log_floor", std::move(v), {ia}, [ia, floor](Tape& t, std::size_t s) {
    const Matrix& x = t.value(ia);
    Matrix g = (x.array() > floor).select(t.upstream(s).array() / x.array(), 0.0);
    t.accumulate(ia, g);
  });
}

inline Var sum(const Var& a) {
  std::size_t ia = a.id();
  Eigen::Index r = a.rows(), c = a.cols();
  return a.tape()->record("sum", scalar_matrix(a.value().sum()), {ia}, [ia, r, c](Tape& t, std::size_t s) {
    t.accumulate(ia, Matrix::Constant(r, c, t.upstream(s)(0, 0)));
  });
}

inline Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// m x n -> m x 1
inline Var sum_rows(const Var& a) {
  std::size_t ia = a.id();
  Eigen::Index c = a.cols();
  return a.tape()->record("sum_rows", a.value().rowwise().sum(), {ia}, [ia, c](Tape& t, std::size_t s) {
    t.accumulate(ia, t.upstream(s).replicate(1, c));
  });
}

/// Row-wise softmax.
inline Var softmax_rows(const Var& a) {
  std::size_t ia = a.id();
  Matrix v = a.value();
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    double mx = v.row(i).maxCoeff();
    v.row(i) = (v.row(i).array() - mx).exp();
    v.row(i) /= v.row(i).sum();
  }
  return a.tape()->record("softmax_rows", std::move(v), {ia}, [ia](Tape& t, std::size_t s) {
    const Matrix& y = t.value(s);
    const Matrix& g = t.upstream(s);
    Matrix out(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      double dot = g.row(i).dot(y.row(i));
      out.row(i) = y.row(i).array() * (g.row(i).array() - dot);
    }
    t.accumulate(ia, out);
  });
}

/// Divides each row by its sum; rows must have a positive sum.
inline Var normalize_rows(const Var& a) {
  std::size_t ia = a.id();
  Matrix v = a.value();
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    double s = v.row(i).sum();
    if (!(s > 0.0)) throw NumericError("normalize_rows: non-positive row sum");
    v.row(i) /= s;
  }
  return a.tape()->record("normalize_rows", std::move(v), {ia}, [ia](Tape& t, std::size_t s) {
    const Matrix& y = t.value(s);
    const Matrix& g = t.upstream(s);
    const Matrix& x = t.value(ia);
    Matrix out(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      double dot = g.row(i).dot(y.row(i));
      out.row(i) = (g.row(i).array() - dot) / x.row(i).sum();
    }
    t.accumulate(ia, out);
  });
}

/// out(i) = a(i, idx[i]); m x n -> m x 1.
inline Var pick(const Var& a, std::vector<int> idx) {
  if (static_cast<Eigen::Index>(idx.size()) != a.rows()) throw std::invalid_argument("pick: index count mismatch");
  std::size_t ia = a.id();
  Matrix v(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) v(i, 0) = a.value()(i, idx[static_cast<std::size_t>(i)]);
  Eigen::Index r = a.rows(), c = a.cols();
  return a.tape()->record("pick", std::move(v), {ia}, [ia, r, c, idx = std::move(idx)](Tape& t, std::size_t s) {
    Matrix g = Matrix::Zero(r, c);
    for (Eigen::Index i = 0; i < r; ++i) g(i, idx[static_cast<std::size_t>(i)]) = t.upstream(s)(i, 0);
    t.accumulate(ia, g);
  });
}

// ---- rotations (rows of 9 = row-major 3x3) ----------------------------------

inline Mat3 row_to_mat3(const Matrix& m, Eigen::Index i) {
  Mat3 r;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) r(a, b) = m(i, 3 * a + b);
  return r;
}

inline void mat3_to_row(const Mat3& r, Matrix& m, Eigen::Index i) {
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) m(i, 3 * a + b) = r(a, b);
}

inline Matrix rotations_to_rows(std::span<const Mat3> rs) {
  Matrix m(static_cast<Eigen::Index>(rs.size()), 9);
  for (std::size_t i = 0; i < rs.size(); ++i) mat3_to_row(rs[i], m, static_cast<Eigen::Index>(i));
  return m;
}

namespace detail {

/// Rodrigues coefficients R = I + a K + b K^2 and their derivatives divided
/// by theta: da = a'(theta) / theta, db = b'(theta) / theta.
struct RodriguesCoeffs {
  double a, b, da, db;
};

inline RodriguesCoeffs rodrigues_coeffs(double th) {
  double t2 = th * th;
  RodriguesCoeffs c{};
  if (th < 1e-4) {
    c.a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    c.b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
  } else {
    c.a = std::sin(th) / th;
    c.b = (1.0 - std::cos(th)) / t2;
  }
  if (th < 1e-2) {
    c.da = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0;
    c.db = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0;
  } else {
    c.da = (th * std::cos(th) - std::sin(th)) / (t2 * th);
    c.db = (th * std::sin(th) - 2.0 * (1.0 - std::cos(th))) / (t2 * t2);
  }
  return c;
}

}  // namespace detail

/// Row-wise exponential map: m x 3 axis-angle vectors -> m x 9 rotations.
inline Var exp_map_rows(const Var& v) {
  if (v.cols() != 3) throw std::invalid_argument("exp_map_rows: expected 3 columns");
  std::size_t iv = v.id();
  Matrix out(v.rows(), 9);
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    Vec3 w = v.value().row(i).transpose();
    auto c = detail::rodrigues_coeffs(w.norm());
    Mat3 k = hat(w);
    mat3_to_row(Mat3::Identity() + c.a * k + c.b * k * k, out, i);
  }
  return v.tape()->record("exp_map_rows", std::move(out), {iv}, [iv](Tape& t, std::size_t s) {
    const Matrix& x = t.value(iv);
    const Matrix& g = t.upstream(s);
    Matrix gv(x.rows(), 3);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Vec3 w = x.row(i).transpose();
      auto c = detail::rodrigues_coeffs(w.norm());
      Mat3 k = hat(w);
      Mat3 k2 = k * k;
      Mat3 gi = row_to_mat3(g, i);
      for (int j = 0; j < 3; ++j) {
        Mat3 e = hat(Vec3::Unit(j));
        Mat3 d = c.da * w(j) * k + c.a * e + c.db * w(j) * k2 + c.b * (e * k + k * e);
        gv(i, j) = gi.cwiseProduct(d).sum();
      }
    }
    t.accumulate(iv, gv);
  });
}

/// out_i = left_i * R_i with constant left factors.
inline Var rot_compose_const_left(std::span<const Mat3> left, const Var& r) {
  if (static_cast<Eigen::Index>(left.size()) != r.rows() || r.cols() != 9)
    throw std::invalid_argument("rot_compose_const_left: shape mismatch");
  std::size_t ir = r.id();
  Matrix out(r.rows(), 9);
  for (Eigen::Index i = 0; i < r.rows(); ++i)
    mat3_to_row(left[static_cast<std::size_t>(i)] * row_to_mat3(r.value(), i), out, i);
  std::vector<Mat3> l(left.begin(), left.end());
  return r.tape()->record("rot_compose", std::move(out), {ir}, [ir, l = std::move(l)](Tape& t, std::size_t s) {
    const Matrix& g = t.upstream(s);
    Matrix gr(g.rows(), 9);
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      mat3_to_row(l[static_cast<std::size_t>(i)].transpose() * row_to_mat3(g, i), gr, i);
    t.accumulate(ir, gr);
  });
}

/// out_i = tr(A_i^T B_i) with constant A_i; m x 9 -> m x 1.
inline Var trace_inner_const(std::span<const Mat3> a, const Var& b) {
  if (static_cast<Eigen::Index>(a.size()) != b.rows() || b.cols() != 9)
    throw std::invalid_argument("trace_inner_const: shape mismatch");
  std::size_t ib = b.id();
  Matrix arows = rotations_to_rows(a);
  Matrix v = arows.cwiseProduct(b.value()).rowwise().sum();
  return b.tape()->record("trace_inner", std::move(v), {ib}, [ib, arows](Tape& t, std::size_t s) {
    Matrix g = arows.array().colwise() * t.upstream(s).col(0).array();
    t.accumulate(ib, g);
  });
}

/// IGSO(3) log density (w.r.t. Haar) of constant rotations `target_i` under
/// means H_i (m x 9 variable) with per-row variances.
inline Var igso3_log_prob_rows(const Var& h, std::span<const Mat3> target, std::span<const double> variance) {
  if (static_cast<Eigen::Index>(target.size()) != h.rows() || h.cols() != 9 || variance.size() != target.size())
    throw std::invalid_argument("igso3_log_prob_rows: shape mismatch");
  std::size_t ih = h.id();
  Matrix v(h.rows(), 1);
  std::vector<double> dc(target.size());
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    auto ui = static_cast<std::size_t>(i);
    Mat3 rel = row_to_mat3(h.value(), i).transpose() * target[ui];
    Vec3 w(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1));
    double omega = std::atan2(0.5 * w.norm(), std::clamp(0.5 * (rel.trace() - 1.0), -1.0, 1.0));
    auto d = abflow::detail::igso3_log_density(omega, variance[ui]);
    v(i, 0) = d.log_f;
    dc[ui] = d.dlogf_dc;
  }
  Matrix trows = rotations_to_rows(target);
  return h.tape()->record("igso3_log_prob", std::move(v), {ih},
                          [ih, trows, dc = std::move(dc)](Tape& t, std::size_t s) {
                            Matrix g(trows.rows(), 9);
                            for (Eigen::Index i = 0; i < trows.rows(); ++i)
                              g.row(i) = trows.row(i) * (0.5 * dc[static_cast<std::size_t>(i)] * t.upstream(s)(i, 0));
                            t.accumulate(ih, g);
                          });
}

}  // namespace abflow::ad
