#pragma once

// Training objectives: the per-channel diffusion losses, trajectory balance
// over teacher-forced noising trajectories, detailed balance with a learned
// flow head, and their weighted combination.
//
// Direction convention: the generative policy is p(S^{t-1} | S^t) (denoising)
// and the backward policy is the noising kernel q(S^t | S^{t-1}). The source
// state S^T carries flow Z and the terminal S^0 carries flow R(S^0).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "abflow/autodiff.hpp"
#include "abflow/denoiser.hpp"
#include "abflow/kernels.hpp"
#include "abflow/schedules.hpp"

namespace abflow {

/// log R is clamped to this magnitude before entering a balance loss.
inline constexpr double kLogRewardClamp = 30.0;

struct RewardValue {
  double energy = 0.0;
  double alpha = 0.1;
  double log_reward = 0.0;  ///< -alpha * energy, plus log c after scaled(c)
  double reward = 1.0;

  /// Same state with the reward multiplied by c > 0.
  RewardValue scaled(double c) const {
    if (!(c > 0.0)) throw std::invalid_argument("reward scale must be positive");
    RewardValue r = *this;
    r.log_reward += std::log(c);
    r.reward = std::exp(r.log_reward);
    return r;
  }
};

inline RewardValue reward_transform(double energy, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("reward: alpha must be positive");
  if (!std::isfinite(energy)) throw ad::NumericError("reward: non-finite energy");
  double lr = -alpha * energy;
  return {energy, alpha, lr, std::exp(lr)};
}

inline double clamped_log_reward(const RewardValue& r) {
  // an underflowed reward with a finite log is still a valid positive reward
  if (!(r.reward > 0.0) && !(r.log_reward < -700.0)) throw std::invalid_argument("reward must be positive");
  if (!std::isfinite(r.log_reward)) throw std::invalid_argument("reward: non-finite log reward");
  return std::clamp(r.log_reward, -kLogRewardClamp, kLogRewardClamp);
}

// ---- diffusion losses -------------------------------------------------------

namespace detail {

inline ad::Matrix posterior_matrix(const std::vector<CategoricalDist>& post) {
  ad::Matrix q(static_cast<Eigen::Index>(post.size()), post.empty() ? 0 : post[0].size());
  for (std::size_t j = 0; j < post.size(); ++j)
    for (int k = 0; k < post[j].size(); ++k) q(static_cast<Eigen::Index>(j), k) = post[j].prob(k);
  return q;
}

inline double neg_entropy_sum(const ad::Matrix& q) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < q.size(); ++i)
    if (q.data()[i] > 0.0) s += q.data()[i] * std::log(q.data()[i]);
  return s;
}

inline ad::Matrix rows_of(std::span<const Vec3> v) {
  ad::Matrix m(static_cast<Eigen::Index>(v.size()), 3);
  for (std::size_t j = 0; j < v.size(); ++j) m.row(static_cast<Eigen::Index>(j)) = v[j].transpose();
  return m;
}

inline ad::Matrix identity_rows(Eigen::Index m) {
  ad::Matrix i = ad::Matrix::Zero(m, 9);
  for (Eigen::Index r = 0; r < m; ++r) i(r, 0) = i(r, 4) = i(r, 8) = 1.0;
  return i;
}

}  // namespace detail

/// Per-residue type posteriors q(d^{t-1} | d^t, d^0).
inline std::vector<CategoricalDist> type_posteriors(const CdrState& s_t, const CdrState& s0, int t,
                                                    const NoiseSchedule& sched, int num_types = kNumTypes) {
  if (s_t.size() != s0.size()) throw std::invalid_argument("type_posteriors: size mismatch");
  std::vector<CategoricalDist> out;
  out.reserve(s_t.size());
  for (std::size_t j = 0; j < s_t.size(); ++j)
    out.push_back(type_posterior(s_t.residues[j].dtype, s0.residues[j].dtype, t, sched, num_types));
  return out;
}

/// (1/m) sum_j KL(posterior_j || predicted_j), predictions floored before the log.
inline double loss_type(const std::vector<CategoricalDist>& posterior, const std::vector<CategoricalDist>& predicted) {
  if (posterior.size() != predicted.size() || posterior.empty())
    throw std::invalid_argument("loss_type: size mismatch");
  double total = 0.0;
  for (std::size_t j = 0; j < posterior.size(); ++j) {
    for (int k = 0; k < posterior[j].size(); ++k) {
      double q = posterior[j].prob(k);
      if (q > 0.0) total += q * (std::log(q) - predicted[j].log_prob(k));
    }
  }
  return total / static_cast<double>(posterior.size());
}

inline ad::Var loss_type(const ad::Var& type_probs, const std::vector<CategoricalDist>& posterior) {
  if (static_cast<Eigen::Index>(posterior.size()) != type_probs.rows() || posterior.empty())
    throw std::invalid_argument("loss_type: size mismatch");
  ad::Tape& tape = *type_probs.tape();
  ad::Matrix q = detail::posterior_matrix(posterior);
  double m = static_cast<double>(posterior.size());
  ad::Var cross = ad::sum(ad::mul(tape.constant(q), ad::log_floor(type_probs, kProbFloor)));
  return ad::add_scalar(ad::scale(cross, -1.0 / m), detail::neg_entropy_sum(q) / m);
}

/// (1/m) sum_j ||eps_j - eps_hat_j||^2
inline double loss_pos(std::span<const Vec3> eps_true, std::span<const Vec3> eps_hat) {
  if (eps_true.size() != eps_hat.size() || eps_true.empty()) throw std::invalid_argument("loss_pos: size mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < eps_true.size(); ++j) s += (eps_true[j] - eps_hat[j]).squaredNorm();
  return s / static_cast<double>(eps_true.size());
}

inline ad::Var loss_pos(const ad::Var& eps_hat, std::span<const Vec3> eps_true) {
  if (static_cast<Eigen::Index>(eps_true.size()) != eps_hat.rows() || eps_true.empty())
    throw std::invalid_argument("loss_pos: size mismatch");
  ad::Var d = ad::sub(eps_hat, eps_hat.tape()->constant(detail::rows_of(eps_true)));
  return ad::scale(ad::sum(ad::square(d)), 1.0 / static_cast<double>(eps_true.size()));
}

/// (1/m) sum_j ||O0_j^T O_j - I||_F^2
inline double loss_ori(std::span<const Rotation> o0, std::span<const Rotation> predicted) {
  if (o0.size() != predicted.size() || o0.empty()) throw std::invalid_argument("loss_ori: size mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < o0.size(); ++j)
    s += (o0[j].matrix().transpose() * predicted[j].matrix() - Mat3::Identity()).squaredNorm();
  return s / static_cast<double>(o0.size());
}

inline ad::Var loss_ori(const ad::Var& ori_hat, std::span<const Rotation> o0) {
  if (static_cast<Eigen::Index>(o0.size()) != ori_hat.rows() || o0.empty())
    throw std::invalid_argument("loss_ori: size mismatch");
  std::vector<Mat3> left;
  left.reserve(o0.size());
  for (const auto& r : o0) left.push_back(r.matrix().transpose());
  ad::Var rel = ad::rot_compose_const_left(left, ori_hat);
  ad::Var d = ad::sub(rel, ori_hat.tape()->constant(detail::identity_rows(ori_hat.rows())));
  return ad::scale(ad::sum(ad::square(d)), 1.0 / static_cast<double>(o0.size()));
}

/// S^t drawn from the closed-form marginals around S^0, with the position
/// noise kept as the regression target.
struct NoisedState {
  CdrState state;
  std::vector<Vec3> eps;
};

inline NoisedState noise_to(const CdrState& s0, int t, const ScheduleSet& sched, Rng& rng) {
  if (t < 1 || t > sched.T()) throw std::invalid_argument("noise_to: timestep out of range");
  NoisedState out;
  out.state.t = t;
  double ab_type = sched.type.alpha_bar(t), ab_pos = sched.pos.alpha_bar(t);
  for (const auto& r : s0.residues) {
    ResidueState n;
    n.dtype = type_marginal(r.dtype, ab_type, kNumTypes).sample(rng);
    Vec3 eps(rng.normal(), rng.normal(), rng.normal());
    n.pos = std::sqrt(ab_pos) * r.pos + std::sqrt(1.0 - ab_pos) * eps;
    n.ori = sample(ori_forward_marginal(r.ori, t, sched.ori), rng);
    out.state.residues.push_back(n);
    out.eps.push_back(eps);
  }
  return out;
}

struct DiffusionLossVars {
  ad::Var type, pos, ori;
};

/// Diffusion losses at (S^t, t) given the reference S^0, on the tape.
inline DiffusionLossVars diffusion_losses(const HeadVars& heads, const CdrState& s0, const NoisedState& noised, int t,
                                          const ScheduleSet& sched, int num_types = kNumTypes) {
  std::vector<Rotation> o0;
  for (const auto& r : s0.residues) o0.push_back(r.ori);
  return {loss_type(heads.type_probs, type_posteriors(noised.state, s0, t, sched.type, num_types)),
          loss_pos(heads.eps_hat, noised.eps), loss_ori(heads.ori_hat, o0)};
}

// ---- step log-densities -----------------------------------------------------

struct StepLogProb {
  double type = 0.0, pos = 0.0, ori = 0.0;
  double total() const { return type + pos + ori; }
};

namespace detail {

inline void require_finite(double v, const char* what, int t, const char* channel) {
  if (!std::isfinite(v))
    throw ad::NumericError(std::string(what) + ": non-finite log-density at step " + std::to_string(t) +
                           ", channel " + channel);
}

inline void check_step_pair(const CdrState& s_t, const CdrState& s_prev, int t, const ScheduleSet& sched) {
  if (s_t.size() != s_prev.size() || s_t.size() == 0) throw std::invalid_argument("step log-density: size mismatch");
  if (t < 1 || t > sched.T()) throw std::invalid_argument("step log-density: timestep out of range");
}

}  // namespace detail

/// log q(S^t | S^{t-1}) under the noising kernels.
inline StepLogProb noising_log_prob(const CdrState& s_prev, const CdrState& s_t, int t, const ScheduleSet& sched,
                                    int num_types = kNumTypes) {
  detail::check_step_pair(s_t, s_prev, t, sched);
  StepLogProb lp;
  for (std::size_t j = 0; j < s_t.size(); ++j) {
    const auto& a = s_prev.residues[j];
    const auto& b = s_t.residues[j];
    lp.type += type_forward_step(a.dtype, sched.type.beta(t), num_types).log_prob(b.dtype);
    lp.pos += pos_forward_step(a.pos, sched.pos.beta(t)).log_prob(b.pos);
    lp.ori += log_prob(ori_forward_step(a.ori, sched.ori.beta(t)), b.ori);
  }
  detail::require_finite(lp.type, "noising", t, "type");
  detail::require_finite(lp.pos, "noising", t, "pos");
  detail::require_finite(lp.ori, "noising", t, "ori");
  return lp;
}

/// log p(S^{t-1} | S^t) under the reverse kernels built from a denoiser output at S^t.
inline StepLogProb generative_log_prob(const DenoiserOutput& out, const CdrState& s_t, const CdrState& s_prev, int t,
                                       const ScheduleSet& sched) {
  detail::check_step_pair(s_t, s_prev, t, sched);
  auto mu = pos_reverse_mean(s_t, {}, out.eps_hat, t, sched.pos);
  double beta_pos = sched.pos.beta(t);
  StepLogProb lp;
  for (std::size_t j = 0; j < s_t.size(); ++j) {
    const auto& b = s_prev.residues[j];
    lp.type += out.type_probs[j].log_prob(b.dtype);
    lp.pos += IsoGaussian3(mu[j], beta_pos).log_prob(b.pos);
    lp.ori += log_prob(ori_reverse_dist(out.ori_hat[j], t, sched.ori), b.ori);
  }
  detail::require_finite(lp.type, "generative", t, "type");
  detail::require_finite(lp.pos, "generative", t, "pos");
  detail::require_finite(lp.ori, "generative", t, "ori");
  return lp;
}

struct StepLogProbVar {
  ad::Var type, pos, ori, total;
};

inline StepLogProbVar generative_log_prob(const HeadVars& heads, const CdrState& s_t, const CdrState& s_prev, int t,
                                          const ScheduleSet& sched) {
  detail::check_step_pair(s_t, s_prev, t, sched);
  ad::Tape& tape = *heads.type_probs.tape();
  const auto m = static_cast<Eigen::Index>(s_t.size());
  const double beta_pos = sched.pos.beta(t);
  const double c_out = 1.0 / std::sqrt(1.0 - beta_pos);
  const double k = c_out * beta_pos / std::sqrt(1.0 - sched.pos.alpha_bar(t));

  std::vector<int> idx;
  ad::Matrix offset(m, 3);  // x^{t-1} - c_out x^t
  std::vector<Mat3> targets;
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& a = s_t.residues[static_cast<std::size_t>(j)];
    const auto& b = s_prev.residues[static_cast<std::size_t>(j)];
    idx.push_back(b.dtype);
    offset.row(j) = (b.pos - c_out * a.pos).transpose();
    targets.push_back(b.ori.matrix());
  }
  StepLogProbVar lp;
  lp.type = ad::sum(ad::log_floor(ad::pick(heads.type_probs, idx), kProbFloor));
  // residual x^{t-1} - mu = offset + k eps_hat
  ad::Var resid = ad::add(tape.constant(offset), ad::scale(heads.eps_hat, k));
  double norm = -1.5 * static_cast<double>(m) * std::log(2.0 * std::numbers::pi * beta_pos);
  lp.pos = ad::add_scalar(ad::scale(ad::sum(ad::square(resid)), -0.5 / beta_pos), norm);
  std::vector<double> var(static_cast<std::size_t>(m), sched.ori.beta(t));
  lp.ori = ad::sum(ad::igso3_log_prob_rows(heads.ori_hat, targets, var));
  detail::require_finite(lp.type.scalar(), "generative", t, "type");
  detail::require_finite(lp.pos.scalar(), "generative", t, "pos");
  detail::require_finite(lp.ori.scalar(), "generative", t, "ori");
  lp.total = ad::add(ad::add(lp.type, lp.pos), lp.ori);
  return lp;
}

// ---- trajectories and balance losses ---------------------------------------

/// Teacher-forced noising trajectory. states[t] is S^t for t = 0..T;
/// fwd_logp[t-1] = log p(S^{t-1} | S^t), bwd_logp[t-1] = log q(S^t | S^{t-1}).
struct Trajectory {
  std::vector<CdrState> states;
  std::vector<double> fwd_logp;
  std::vector<double> bwd_logp;
  int grad_step = 1;

  int T() const { return static_cast<int>(fwd_logp.size()); }
  double sum_fwd() const { return std::accumulate(fwd_logp.begin(), fwd_logp.end(), 0.0); }
  double sum_bwd() const { return std::accumulate(bwd_logp.begin(), bwd_logp.end(), 0.0); }
};

struct ModelRef {
  const ParamVector& params;
  const ArchConfig& arch;
  const ScheduleSet& sched;
};

/// Noises `s0` step by step to S^T and evaluates both policies at every step.
inline Trajectory sample_trajectory(const ComplexContext& context, const CdrState& s0, const ModelRef& model, Rng& rng,
                                    int grad_step) {
  const int T = model.sched.T();
  if (grad_step < 1 || grad_step > T) throw std::invalid_argument("sample_trajectory: grad_step outside [1, T]");
  if (s0.size() == 0) throw std::invalid_argument("sample_trajectory: empty CDR");
  Trajectory tr;
  tr.grad_step = grad_step;
  tr.states.reserve(static_cast<std::size_t>(T) + 1);
  tr.states.push_back(s0);
  tr.states[0].t = 0;
  for (int t = 1; t <= T; ++t) {
    const CdrState& prev = tr.states.back();
    CdrState next;
    next.t = t;
    for (const auto& r : prev.residues) {
      ResidueState n;
      n.dtype = type_forward_step(r.dtype, model.sched.type.beta(t), model.arch.num_types).sample(rng);
      n.pos = pos_forward_step(r.pos, model.sched.pos.beta(t)).sample(rng);
      n.ori = sample(ori_forward_step(r.ori, model.sched.ori.beta(t)), rng);
      next.residues.push_back(n);
    }
    tr.bwd_logp.push_back(noising_log_prob(prev, next, t, model.sched, model.arch.num_types).total());
    tr.states.push_back(std::move(next));
  }
  for (int t = 1; t <= T; ++t) {
    const auto& s_t = tr.states[static_cast<std::size_t>(t)];
    auto out = predict({s_t, context, t, T, &model.sched.type}, model.params, model.arch);
    tr.fwd_logp.push_back(generative_log_prob(out, s_t, tr.states[static_cast<std::size_t>(t) - 1], t, model.sched).total());
  }
  return tr;
}

/// Detached value of the trajectory-balance loss.
inline double tb_loss(const Trajectory& tr, const RewardValue& reward, double log_z) {
  double r = log_z + tr.sum_fwd() - clamped_log_reward(reward) - tr.sum_bwd();
  return r * r;
}

/// Differentiable trajectory-balance loss: gradient reaches log_Z and the
/// generative log-density of the single step tr.grad_step.
inline ad::Var tb_loss(const BoundParams& bound, const Trajectory& tr, const ComplexContext& context,
                       const RewardValue& reward, const ArchConfig& arch, const ScheduleSet& sched) {
  const int g = tr.grad_step, T = tr.T();
  if (static_cast<int>(tr.states.size()) != T + 1 || static_cast<int>(tr.bwd_logp.size()) != T)
    throw std::invalid_argument("tb_loss: incomplete trajectory");
  const auto& s_g = tr.states[static_cast<std::size_t>(g)];
  HeadVars heads = forward(*bound.vars.front().tape(), bound, {s_g, context, g, T, &sched.type}, arch);
  ad::Var step = generative_log_prob(heads, s_g, tr.states[static_cast<std::size_t>(g) - 1], g, sched).total;
  double detached = tr.sum_fwd() - tr.fwd_logp[static_cast<std::size_t>(g) - 1];
  double constant = detached - clamped_log_reward(reward) - tr.sum_bwd();
  ad::Var resid = ad::add_scalar(ad::add(bound["log_z"], step), constant);
  return ad::square(resid);
}

/// Detached DB inputs for one transition S^t -> S^{t-1}. log_reward_t and
/// log_reward_prev are log R(FullDenoise(.)); for t - 1 = 0 log_reward_prev
/// is log R(S^0) and no flow head is evaluated there.
struct DbTransition {
  const CdrState& s_t;
  const CdrState& s_prev;
  int t;
  double log_reward_t;
  double log_reward_prev;
  double log_q;  ///< log q(S^t | S^{t-1})
};

/// (log F(S^t) + log p(S^{t-1}|S^t) - log F(S^{t-1}) - log q(S^t|S^{t-1}))^2
/// with log F(S) = flow_head(S) + log R(FullDenoise(S)).
inline ad::Var db_loss(const BoundParams& bound, const DbTransition& tr, const ComplexContext& context,
                       const ArchConfig& arch, const ScheduleSet& sched) {
  ad::Tape& tape = *bound.vars.front().tape();
  const int T = sched.T();
  auto clamp = [](double lr) { return std::clamp(lr, -kLogRewardClamp, kLogRewardClamp); };
  HeadVars at_t = forward(tape, bound, {tr.s_t, context, tr.t, T, &sched.type}, arch);
  ad::Var step = generative_log_prob(at_t, tr.s_t, tr.s_prev, tr.t, sched).total;
  ad::Var resid = ad::add(at_t.log_flow, step);
  if (tr.t > 1) {
    HeadVars at_prev = forward(tape, bound, {tr.s_prev, context, tr.t - 1, T, &sched.type}, arch);
    resid = ad::sub(resid, at_prev.log_flow);
  }
  resid = ad::add_scalar(resid, clamp(tr.log_reward_t) - clamp(tr.log_reward_prev) - tr.log_q);
  return ad::square(resid);
}

// ---- combination ------------------------------------------------------------

struct LossBreakdown {
  double l_type = 0.0, l_pos = 0.0, l_ori = 0.0;
  double l_gfn = 0.0;  ///< TB or DB term
  double combined = 0.0;
  double w = 0.0;
};

inline LossBreakdown combined_loss(double l_type, double l_pos, double l_ori, double l_gfn, double w) {
  if (!(w >= 0.0)) throw std::invalid_argument("combined_loss: w must be >= 0");
  return {l_type, l_pos, l_ori, l_gfn, l_type + l_pos + l_ori + w * l_gfn, w};
}

}  // namespace abflow
