#pragma once

// Reference denoiser: a per-residue perceptron over local features with
// three output heads (type probabilities, position noise, orientation
// update), a scalar flow head used by the detailed-balance objective, and
// the learned log partition function log_Z.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "abflow/autodiff.hpp"
#include "abflow/kernels.hpp"
#include "abflow/rng.hpp"

namespace abflow {

struct ArchConfig {
  int hidden = 64;
  int knn = 8;
  int time_dim = 8;
  int num_types = kNumTypes;

  /// Versioned layout identifier; checkpoints and ParamVectors carry it.
  std::string describe() const {
    std::ostringstream os;
    os << "mlp3-v1:h" << hidden << ":k" << knn << ":t" << time_dim << ":K" << num_types;
    return os.str();
  }

  /// onehot | position | orientation | time embedding | pooled context
  int feature_dim() const { return num_types + 3 + 9 + time_dim + num_types + 3; }

  void validate() const {
    if (hidden < 1 || knn < 1 || time_dim < 2 || time_dim % 2 != 0 || num_types < 2)
      throw std::invalid_argument("arch: invalid configuration " + describe());
  }
};

struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

/// Flat parameter storage with named row-major segments.
class ParamVector {
 public:
  ParamVector() = default;
  ParamVector(std::string layout, std::vector<ParamSegment> segments)
      : layout_(std::move(layout)), segments_(std::move(segments)) {
    std::size_t n = 0;
    for (const auto& s : segments_) n = std::max(n, s.offset + s.size());
    data_.assign(n, 0.0);
  }

  const std::string& layout() const { return layout_; }
  const std::vector<ParamSegment>& segments() const { return segments_; }
  std::size_t size() const { return data_.size(); }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  const ParamSegment& segment(const std::string& name) const {
    for (const auto& s : segments_)
      if (s.name == name) return s;
    throw std::out_of_range("param segment '" + name + "' not in layout " + layout_);
  }

  ad::Matrix matrix(const ParamSegment& s) const {
    ad::Matrix m(static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
    for (std::size_t r = 0; r < s.rows; ++r)
      for (std::size_t c = 0; c < s.cols; ++c)
        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = data_[s.offset + r * s.cols + c];
    return m;
  }

  void add_matrix(const ParamSegment& s, const ad::Matrix& m) {
    for (std::size_t r = 0; r < s.rows; ++r)
      for (std::size_t c = 0; c < s.cols; ++c)
        data_[s.offset + r * s.cols + c] += m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }

  double log_z() const { return data_[segment("log_z").offset]; }
  double& log_z() { return data_[segment("log_z").offset]; }

  ParamVector zeros_like() const {
    ParamVector z = *this;
    std::fill(z.data_.begin(), z.data_.end(), 0.0);
    return z;
  }

  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.layout_ == b.layout_ && a.data_ == b.data_;
  }

 private:
  std::string layout_;
  std::vector<ParamSegment> segments_;
  std::vector<double> data_;
};

inline std::vector<ParamSegment> param_layout(const ArchConfig& a) {
  auto f = static_cast<std::size_t>(a.feature_dim());
  auto h = static_cast<std::size_t>(a.hidden);
  auto k = static_cast<std::size_t>(a.num_types);
  std::vector<ParamSegment> segs;
  std::size_t off = 0;
  auto add = [&](const char* name, std::size_t r, std::size_t c) {
    segs.push_back({name, off, r, c});
    off += r * c;
  };
  add("trunk.w1", h, f);
  add("trunk.b1", 1, h);
  add("trunk.w2", h, h);
  add("trunk.b2", 1, h);
  add("trunk.w3", h, h);
  add("trunk.b3", 1, h);
  add("head.type.w", k, h);
  add("head.type.b", 1, k);
  add("head.eps.w", 3, h);
  add("head.eps.b", 1, 3);
  add("head.ori.w", 3, h);
  add("head.ori.b", 1, 3);
  add("head.flow.w", 1, h);
  add("head.flow.b", 1, 1);
  add("log_z", 1, 1);
  return segs;
}

inline ParamVector make_param_vector(const ArchConfig& a) {
  a.validate();
  return ParamVector(a.describe(), param_layout(a));
}

/// Trunk weights uniform with std 1/sqrt(fan_in); biases, heads and log_Z zero.
inline ParamVector init_params(std::uint64_t seed, const ArchConfig& a) {
  ParamVector p = make_param_vector(a);
  Rng rng = make_rng(seed, {stream::kInit});
  for (const char* name : {"trunk.w1", "trunk.w2", "trunk.w3"}) {
    const auto& s = p.segment(name);
    double bound = std::sqrt(3.0 / static_cast<double>(s.cols));
    for (std::size_t i = 0; i < s.size(); ++i) p[s.offset + i] = bound * (2.0 * rng.uniform() - 1.0);
  }
  return p;
}

/// Parameters placed on a tape, one variable (or constant) per segment.
struct BoundParams {
  std::vector<ad::Var> vars;
  const ParamVector* source = nullptr;

  const ad::Var& operator[](const std::string& name) const {
    const auto& segs = source->segments();
    for (std::size_t i = 0; i < segs.size(); ++i)
      if (segs[i].name == name) return vars[i];
    throw std::out_of_range("param segment '" + name + "'");
  }
};

inline BoundParams bind(ad::Tape& tape, const ParamVector& p, bool requires_grad = true) {
  BoundParams b;
  b.source = &p;
  for (const auto& s : p.segments())
    b.vars.push_back(requires_grad ? tape.variable(p.matrix(s)) : tape.constant(p.matrix(s)));
  return b;
}

/// Runs backward from `loss` and scatters the parameter gradients.
inline ParamVector backprop(ad::Tape& tape, const BoundParams& b, const ad::Var& loss) {
  tape.backward(loss);
  ParamVector g = b.source->zeros_like();
  const auto& segs = g.segments();
  for (std::size_t i = 0; i < segs.size(); ++i) g.add_matrix(segs[i], tape.grad(b.vars[i]));
  return g;
}

struct DenoiserInput {
  const CdrState& state;
  const ComplexContext& context;
  int t;
  int T;
  /// When set, the type head predicts the clean types and is mapped through
  /// the posterior q(d^{t-1} | d^t, d^0) of this schedule. Without it the
  /// head output is used as the reverse distribution directly.
  const NoiseSchedule* type_schedule = nullptr;
};

struct DenoiserOutput {
  std::vector<CategoricalDist> type_probs;
  std::vector<Vec3> eps_hat;
  std::vector<Rotation> ori_hat;
  double log_flow = 0.0;
};

namespace detail {

// Order-invariant pooled summary of the k nearest context residues: the
// neighbours are sorted by value, not by input position, before summation.
inline void context_summary(const Vec3& x, const ComplexContext& c, const ArchConfig& a, ad::Matrix& out,
                            Eigen::Index row, Eigen::Index col) {
  struct Nb {
    double d2;
    int type;
    Vec3 pos;
  };
  std::vector<Nb> nb;
  nb.reserve(c.residues.size());
  for (const auto& r : c.residues) nb.push_back({(r.pos - x).squaredNorm(), r.dtype, r.pos});
  auto less = [](const Nb& p, const Nb& q) {
    if (p.d2 != q.d2) return p.d2 < q.d2;
    if (p.type != q.type) return p.type < q.type;
    for (int i = 0; i < 3; ++i)
      if (p.pos(i) != q.pos(i)) return p.pos(i) < q.pos(i);
    return false;
  };
  std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(a.knn), nb.size());
  std::partial_sort(nb.begin(), nb.begin() + static_cast<std::ptrdiff_t>(k), nb.end(), less);
  if (k == 0) return;
  double inv = 1.0 / static_cast<double>(k);
  for (std::size_t i = 0; i < k; ++i) {
    out(row, col + nb[i].type) += inv;
    Vec3 rel = nb[i].pos - x;
    for (int d = 0; d < 3; ++d) out(row, col + a.num_types + d) += inv * rel(d);
  }
}

}  // namespace detail

inline ad::Matrix residue_features(const DenoiserInput& in, const ArchConfig& a) {
  auto m = static_cast<Eigen::Index>(in.state.size());
  ad::Matrix f = ad::Matrix::Zero(m, a.feature_dim());
  double tt = static_cast<double>(in.t) / static_cast<double>(in.T);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& r = in.state.residues[static_cast<std::size_t>(j)];
    if (r.dtype < 0 || r.dtype >= a.num_types) throw std::invalid_argument("denoiser: residue type out of range");
    Eigen::Index col = 0;
    f(j, col + r.dtype) = 1.0;
    col += a.num_types;
    for (int d = 0; d < 3; ++d) f(j, col + d) = r.pos(d);
    col += 3;
    const Mat3& o = r.ori.matrix();
    for (int p = 0; p < 3; ++p)
      for (int q = 0; q < 3; ++q) f(j, col + 3 * p + q) = o(p, q);
    col += 9;
    for (int k = 0; k < a.time_dim / 2; ++k) {
      double w = std::numbers::pi * std::pow(2.0, k) * tt;
      f(j, col + 2 * k) = std::sin(w);
      f(j, col + 2 * k + 1) = std::cos(w);
    }
    col += a.time_dim;
    detail::context_summary(r.pos, in.context, a, f, j, col);
  }
  return f;
}

struct HeadVars {
  ad::Var type_probs;  ///< m x K
  ad::Var eps_hat;     ///< m x 3
  ad::Var ori_hat;     ///< m x 9, O^t_j exp(v_j)
  ad::Var log_flow;    ///< 1 x 1, sum of per-residue flow outputs
};

inline void check_layout(const ParamVector& p, const ArchConfig& a) {
  if (p.layout() != a.describe())
    throw std::invalid_argument("denoiser: parameter layout '" + p.layout() + "' does not match architecture '" +
                                a.describe() + "'");
}

inline HeadVars forward(ad::Tape& tape, const BoundParams& p, const DenoiserInput& in, const ArchConfig& a) {
  if (in.t < 1 || in.t > in.T) throw std::invalid_argument("denoiser: timestep out of range");
  if (in.type_schedule && in.type_schedule->T() != in.T)
    throw std::invalid_argument("denoiser: type schedule length differs from T");
  if (in.state.size() == 0) throw std::invalid_argument("denoiser: empty CDR state");
  ad::Var x = tape.constant(residue_features(in, a));
  ad::Var h = ad::tanh(ad::affine(x, p["trunk.w1"], p["trunk.b1"]));
  h = ad::tanh(ad::affine(h, p["trunk.w2"], p["trunk.b2"]));
  h = ad::tanh(ad::affine(h, p["trunk.w3"], p["trunk.b3"]));

  HeadVars out;
  out.type_probs = ad::softmax_rows(ad::affine(h, p["head.type.w"], p["head.type.b"]));
  if (in.type_schedule) {
    // posterior_k ~ lik_k * (ab * p0_k + (1 - ab) / K), linear in p0
    const double beta = in.type_schedule->beta(in.t), ab = in.type_schedule->alpha_bar(in.t - 1);
    const auto m = static_cast<Eigen::Index>(in.state.size());
    ad::Matrix lik = ad::Matrix::Constant(m, a.num_types, beta / a.num_types);
    for (Eigen::Index j = 0; j < m; ++j) lik(j, in.state.residues[static_cast<std::size_t>(j)].dtype) += 1.0 - beta;
    ad::Var mixed = ad::add_scalar(ad::scale(out.type_probs, ab), (1.0 - ab) / a.num_types);
    out.type_probs = ad::normalize_rows(ad::mul(tape.constant(lik), mixed));
  }
  out.eps_hat = ad::affine(h, p["head.eps.w"], p["head.eps.b"]);
  std::vector<Mat3> o_t;
  o_t.reserve(in.state.size());
  for (const auto& r : in.state.residues) o_t.push_back(r.ori.matrix());
  out.ori_hat = ad::rot_compose_const_left(o_t, ad::exp_map_rows(ad::affine(h, p["head.ori.w"], p["head.ori.b"])));
  out.log_flow = ad::sum(ad::affine(h, p["head.flow.w"], p["head.flow.b"]));
  return out;
}

inline DenoiserOutput to_output(const HeadVars& hv) {
  DenoiserOutput out;
  const auto& probs = hv.type_probs.value();
  for (Eigen::Index j = 0; j < probs.rows(); ++j) {
    std::vector<double> p(static_cast<std::size_t>(probs.cols()));
    for (Eigen::Index k = 0; k < probs.cols(); ++k) p[static_cast<std::size_t>(k)] = probs(j, k);
    out.type_probs.emplace_back(std::move(p));
    out.eps_hat.emplace_back(hv.eps_hat.value().row(j).transpose());
    out.ori_hat.push_back(Rotation::from_matrix_unchecked(ad::row_to_mat3(hv.ori_hat.value(), j)));
  }
  out.log_flow = hv.log_flow.scalar();
  return out;
}

/// Pure, deterministic evaluation without gradient bookkeeping.
inline DenoiserOutput predict(const DenoiserInput& in, const ParamVector& params, const ArchConfig& a) {
  check_layout(params, a);
  ad::Tape tape;
  BoundParams b = bind(tape, params, false);
  return to_output(forward(tape, b, in, a));
}

}  // namespace abflow
