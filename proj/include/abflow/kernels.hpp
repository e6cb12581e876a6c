#pragma once

// Forward (noising) and reverse (denoising) transition kernels for the three
// residue channels: amino-acid type, position and orientation.

#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "abflow/rng.hpp"
#include "abflow/schedules.hpp"
#include "abflow/so3.hpp"

namespace abflow {

inline constexpr int kNumTypes = 20;
inline constexpr std::string_view kAlphabet = "ACDEFGHIKLMNPQRSTWYV";
/// Probabilities are floored here before any logarithm.
inline constexpr double kProbFloor = 1e-12;

inline int type_index(char c) {
  auto pos = kAlphabet.find(c);
  if (pos == std::string_view::npos) throw std::invalid_argument(std::string("unknown amino-acid letter '") + c + "'");
  return static_cast<int>(pos);
}
inline char type_letter(int d) { return kAlphabet.at(static_cast<std::size_t>(d)); }

struct ResidueState {
  int dtype = 0;
  Vec3 pos = Vec3::Zero();
  Rotation ori;
};

/// The m CDR residues at a shared timestep t.
struct CdrState {
  int t = 0;
  std::vector<ResidueState> residues;
  std::size_t size() const { return residues.size(); }
};

/// Frozen non-CDR residues. The CDR occupies 1-based indices
/// cdr_l + 1 .. cdr_l + cdr_m of the full complex.
struct ComplexContext {
  std::vector<ResidueState> residues;
  int cdr_l = 0;
  int cdr_m = 0;
};

class CategoricalDist {
 public:
  explicit CategoricalDist(std::vector<double> probs) : probs_(std::move(probs)) {
    double s = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0)) throw std::invalid_argument("categorical: negative or NaN probability");
      s += p;
    }
    if (probs_.empty() || std::abs(s - 1.0) > 1e-9)
      throw std::invalid_argument("categorical: probabilities must sum to 1");
  }

  int size() const { return static_cast<int>(probs_.size()); }
  double prob(int k) const { return probs_.at(static_cast<std::size_t>(k)); }
  double log_prob(int k) const { return std::log(std::max(prob(k), kProbFloor)); }
  const std::vector<double>& probs() const { return probs_; }

  int sample(Rng& rng) const {
    double u = rng.uniform();
    double acc = 0.0;
    for (int k = 0; k < size(); ++k) {
      acc += probs_[static_cast<std::size_t>(k)];
      if (u < acc) return k;
    }
    for (int k = size() - 1; k >= 0; --k)
      if (probs_[static_cast<std::size_t>(k)] > 0.0) return k;
    return size() - 1;
  }

  /// Lowest index among the maxima.
  int argmax() const {
    return static_cast<int>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
  }

  double entropy() const {
    double h = 0.0;
    for (double p : probs_)
      if (p > 0.0) h -= p * std::log(p);
    return h;
  }

 private:
  std::vector<double> probs_;
};

/// N(mean, variance * I3). variance == 0 is a point mass.
class IsoGaussian3 {
 public:
  IsoGaussian3(const Vec3& mean, double variance) : mean_(mean), var_(variance) {
    if (!(variance >= 0.0)) throw std::invalid_argument("gaussian: negative variance");
  }

  const Vec3& mean() const { return mean_; }
  double variance() const { return var_; }
  bool is_point_mass() const { return var_ == 0.0; }

  Vec3 sample(Rng& rng) const {
    if (is_point_mass()) return mean_;
    double s = std::sqrt(var_);
    double x = rng.normal(), y = rng.normal(), z = rng.normal();
    return mean_ + s * Vec3(x, y, z);
  }

  double log_prob(const Vec3& x) const {
    if (is_point_mass()) throw std::domain_error("gaussian: log_prob of a point mass");
    return -0.5 * (x - mean_).squaredNorm() / var_ - 1.5 * std::log(2.0 * std::numbers::pi * var_);
  }

  double entropy() const { return 1.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var_); }

 private:
  Vec3 mean_;
  double var_;
};

inline Rotation sample(const IgSo3Params& p, Rng& rng) { return igso3_sample(p, rng); }
inline double log_prob(const IgSo3Params& p, const Rotation& r) { return igso3_log_prob(r, p); }

// ---- amino-acid type --------------------------------------------------------

/// (1 - beta) onehot(d_prev) + beta / K.
inline CategoricalDist type_forward_step(int d_prev, double beta, int num_types = kNumTypes) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("type_forward_step: beta outside [0, 1]");
  std::vector<double> p(static_cast<std::size_t>(num_types), beta / num_types);
  p.at(static_cast<std::size_t>(d_prev)) += 1.0 - beta;
  return CategoricalDist(std::move(p));
}

/// alpha_bar onehot(d0) + (1 - alpha_bar) / K.
inline CategoricalDist type_marginal(int d0, double alpha_bar, int num_types = kNumTypes) {
  if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) throw std::invalid_argument("type_marginal: alpha_bar outside (0, 1]");
  std::vector<double> p(static_cast<std::size_t>(num_types), (1.0 - alpha_bar) / num_types);
  p.at(static_cast<std::size_t>(d0)) += alpha_bar;
  return CategoricalDist(std::move(p));
}

/// q(d^{t-1} | d^t, d^0) by Bayes over the K categories.
inline CategoricalDist type_posterior(int d_t, int d0, int t, const NoiseSchedule& sched,
                                      int num_types = kNumTypes) {
  if (t < 1) throw std::invalid_argument("type_posterior: t must be >= 1");
  double beta = sched.beta(t);
  double ab_prev = sched.alpha_bar(t - 1);
  std::vector<double> p(static_cast<std::size_t>(num_types));
  double total = 0.0;
  for (int k = 0; k < num_types; ++k) {
    double prior = (1.0 - ab_prev) / num_types + (k == d0 ? ab_prev : 0.0);
    double lik = beta / num_types + (k == d_t ? 1.0 - beta : 0.0);
    p[static_cast<std::size_t>(k)] = prior * lik;
    total += prior * lik;
  }
  for (auto& x : p) x /= total;
  return CategoricalDist(std::move(p));
}

// ---- position ---------------------------------------------------------------

inline IsoGaussian3 pos_forward_step(const Vec3& x_prev, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("pos_forward_step: beta outside [0, 1)");
  return IsoGaussian3(std::sqrt(1.0 - beta) * x_prev, beta);
}

inline IsoGaussian3 pos_marginal(const Vec3& x0, double alpha_bar) {
  if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) throw std::invalid_argument("pos_marginal: alpha_bar outside (0, 1]");
  return IsoGaussian3(std::sqrt(alpha_bar) * x0, 1.0 - alpha_bar);
}

/// Noise-prediction reparameterization of the reverse mean:
///   mu = (x^t - beta^t / sqrt(1 - alpha_bar^t) * eps_hat) / sqrt(1 - beta^t).
/// The reverse kernel is N(mu, beta^t I).
inline std::vector<Vec3> pos_reverse_mean(const CdrState& s_t, const ComplexContext& /*context*/,
                                          std::span<const Vec3> eps_hat, int t, const NoiseSchedule& sched) {
  if (eps_hat.size() != s_t.size()) throw std::invalid_argument("pos_reverse_mean: size mismatch");
  double beta = sched.beta(t);
  double c_eps = beta / std::sqrt(1.0 - sched.alpha_bar(t));
  double c_out = 1.0 / std::sqrt(1.0 - beta);
  std::vector<Vec3> mu(s_t.size());
  for (std::size_t j = 0; j < s_t.size(); ++j) mu[j] = c_out * (s_t.residues[j].pos - c_eps * eps_hat[j]);
  return mu;
}

// ---- orientation ------------------------------------------------------------

/// IGSO3(lambda(sqrt(alpha_bar^t), O0), 1 - alpha_bar^t); point mass when alpha_bar = 1.
inline IgSo3Params ori_forward_marginal(const Rotation& o0, int t, const NoiseSchedule& sched) {
  double ab = sched.alpha_bar(t);
  if (ab >= 1.0) return {o0, 0.0};
  return {geodesic_scale(std::sqrt(ab), o0), 1.0 - ab};
}

/// IGSO3(lambda(sqrt(1 - beta), O_prev), beta).
inline IgSo3Params ori_forward_step(const Rotation& o_prev, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("ori_forward_step: beta outside [0, 1)");
  if (beta == 0.0) return {o_prev, 0.0};
  return {geodesic_scale(std::sqrt(1.0 - beta), o_prev), beta};
}

/// IGSO3(H_out, beta_ori^t).
inline IgSo3Params ori_reverse_dist(const Rotation& h_out, int t, const NoiseSchedule& sched) {
  return {h_out, sched.beta(t)};
}

}  // namespace abflow
