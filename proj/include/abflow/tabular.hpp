#pragma once

// Discrete-only GFlowNet harness: m residues over K categories, T noising
// steps, no positions or orientations. The denoiser is replaced by a full
// probability table, so the balance fixed point can be checked exactly by
// enumerating every state.
//
// Graph: a single source s0 -> S^T -> ... -> S^0. The source policy
// P_F(S^T | s0) is learned; P_B(s0 | S^T) = 1. Later steps use the learned
// table P_F(S^{t-1} | S^t) and the multinomial noising kernel as P_B.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "abflow/optim.hpp"
#include "abflow/rng.hpp"

namespace abflow {

enum class BalanceObjective { trajectory, detailed };

struct TabularSpec {
  int m = 1;
  int K = 2;
  int T = 2;
  std::vector<double> rewards{1.0, 3.0};  ///< one per terminal state, K^m values
  std::vector<double> betas{0.3, 0.5};    ///< noising resample probability per step
  BalanceObjective objective = BalanceObjective::trajectory;
  int steps = 4000;
  int batch = 16;
  double lr = 0.05;
  std::uint64_t seed = 0;

  int num_states() const {
    int n = 1;
    for (int j = 0; j < m; ++j) n *= K;
    return n;
  }

  void validate() const {
    if (m < 1 || m > 3 || K < 2 || K > 4 || T < 1 || T > 3)
      throw std::invalid_argument("tabular: need 1 <= m <= 3, 2 <= K <= 4, 1 <= T <= 3");
    if (static_cast<int>(rewards.size()) != num_states())
      throw std::invalid_argument("tabular: expected " + std::to_string(num_states()) + " rewards");
    for (double r : rewards)
      if (!(r > 0.0 && std::isfinite(r))) throw std::invalid_argument("tabular: rewards must be positive");
    if (static_cast<int>(betas.size()) != T) throw std::invalid_argument("tabular: expected one beta per step");
    for (double b : betas)
      if (!(b > 0.0 && b <= 1.0)) throw std::invalid_argument("tabular: betas must lie in (0, 1]");
    if (steps < 0 || batch < 1 || !(lr > 0.0)) throw std::invalid_argument("tabular: invalid optimizer settings");
  }
};

struct FlowResidual {
  int t;      ///< T + 1 denotes the source
  int state;  ///< index into the K^m states (0 for the source)
  double forward_flow;
  double backward_flow;
  double residual;  ///< |forward_flow - backward_flow|
};

struct TabularResult {
  std::vector<double> terminal;  ///< model terminal distribution
  std::vector<double> target;    ///< rewards / sum
  double l1 = 0.0;
  double log_z = 0.0;
  double log_z_target = 0.0;
  std::vector<FlowResidual> residuals;
  double max_residual = 0.0;
  double final_loss = 0.0;

  bool passes(double l1_tol = 0.02, double log_z_tol = 0.1, double residual_tol = 1e-2) const {
    return l1 <= l1_tol && std::abs(log_z - log_z_target) <= log_z_tol && max_residual < residual_tol;
  }
};

class TabularModel {
 public:
  explicit TabularModel(const TabularSpec& spec) : spec_(spec), n_(spec.num_states()) {
    spec_.validate();
    // layout: log_z | source logits (n) | per step t = 1..T: n x n logits | per t: n log-flows
    params_.assign(1 + n_ + spec_.T * n_ * n_ + spec_.T * n_, 0.0);
  }

  const TabularSpec& spec() const { return spec_; }
  int num_states() const { return n_; }
  std::vector<double>& params() { return params_; }
  double log_z() const { return params_[0]; }

  /// P_F(S^T = s | source)
  std::vector<double> source_policy() const { return softmax(&params_[1]); }
  /// P_F(S^{t-1} = . | S^t = s)
  std::vector<double> step_policy(int t, int s) const { return softmax(&params_[step_offset(t, s)]); }
  double log_flow(int t, int s) const { return params_[flow_offset(t, s)]; }

  /// Multinomial noising q(S^t = b | S^{t-1} = a), independent per residue.
  double noising(int t, int a, int b) const {
    double beta = spec_.betas[static_cast<std::size_t>(t - 1)];
    double p = 1.0;
    for (int j = 0; j < spec_.m; ++j) {
      int da = a % spec_.K, db = b % spec_.K;
      p *= beta / spec_.K + (da == db ? 1.0 - beta : 0.0);
      a /= spec_.K;
      b /= spec_.K;
    }
    return p;
  }

  /// Squared balance residual of one trajectory (states[t] = S^t) and its
  /// gradient accumulated into `grad`.
  double loss_and_grad(const std::vector<int>& states, std::vector<double>& grad) const {
    return spec_.objective == BalanceObjective::trajectory ? tb(states, grad) : db(states, grad);
  }

  /// Distribution over S^t under the forward policy, t = T..0.
  std::vector<std::vector<double>> forward_marginals() const {
    std::vector<std::vector<double>> mu(static_cast<std::size_t>(spec_.T) + 1);
    mu[static_cast<std::size_t>(spec_.T)] = source_policy();
    for (int t = spec_.T; t >= 1; --t) {
      std::vector<double> next(static_cast<std::size_t>(n_), 0.0);
      for (int s = 0; s < n_; ++s) {
        auto p = step_policy(t, s);
        for (int q = 0; q < n_; ++q)
          next[static_cast<std::size_t>(q)] += mu[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)] * p[static_cast<std::size_t>(q)];
      }
      mu[static_cast<std::size_t>(t) - 1] = std::move(next);
    }
    return mu;
  }

  /// Reward-weighted noising flow into each state at each t.
  std::vector<std::vector<double>> backward_flows() const {
    std::vector<std::vector<double>> f(static_cast<std::size_t>(spec_.T) + 1);
    f[0] = spec_.rewards;
    for (int t = 1; t <= spec_.T; ++t) {
      std::vector<double> next(static_cast<std::size_t>(n_), 0.0);
      for (int a = 0; a < n_; ++a)
        for (int b = 0; b < n_; ++b)
          next[static_cast<std::size_t>(b)] += f[static_cast<std::size_t>(t) - 1][static_cast<std::size_t>(a)] * noising(t, a, b);
      f[static_cast<std::size_t>(t)] = std::move(next);
    }
    return f;
  }

 private:
  std::size_t step_offset(int t, int s) const {
    return static_cast<std::size_t>(1 + n_ + (t - 1) * n_ * n_ + s * n_);
  }
  std::size_t flow_offset(int t, int s) const {
    return static_cast<std::size_t>(1 + n_ + spec_.T * n_ * n_ + (t - 1) * n_ + s);
  }

  std::vector<double> softmax(const double* logits) const {
    std::vector<double> p(logits, logits + n_);
    double mx = *std::max_element(p.begin(), p.end()), z = 0.0;
    for (auto& x : p) z += (x = std::exp(x - mx));
    for (auto& x : p) x /= z;
    return p;
  }

  // d/dlogits of c * log softmax(logits)[target]
  void add_log_softmax_grad(std::size_t offset, const std::vector<double>& p, int target, double c,
                            std::vector<double>& grad) const {
    for (int k = 0; k < n_; ++k)
      grad[offset + static_cast<std::size_t>(k)] += c * ((k == target ? 1.0 : 0.0) - p[static_cast<std::size_t>(k)]);
  }

  double tb(const std::vector<int>& s, std::vector<double>& grad) const {
    const int T = spec_.T;
    auto src = source_policy();
    double r = log_z() + std::log(src[static_cast<std::size_t>(s[static_cast<std::size_t>(T)])]);
    std::vector<std::vector<double>> pol(static_cast<std::size_t>(T) + 1);
    for (int t = 1; t <= T; ++t) {
      pol[static_cast<std::size_t>(t)] = step_policy(t, s[static_cast<std::size_t>(t)]);
      r += std::log(pol[static_cast<std::size_t>(t)][static_cast<std::size_t>(s[static_cast<std::size_t>(t) - 1])]);
      r -= std::log(noising(t, s[static_cast<std::size_t>(t) - 1], s[static_cast<std::size_t>(t)]));
    }
    r -= std::log(spec_.rewards[static_cast<std::size_t>(s[0])]);
    double c = 2.0 * r;
    grad[0] += c;
    add_log_softmax_grad(1, src, s[static_cast<std::size_t>(T)], c, grad);
    for (int t = 1; t <= T; ++t)
      add_log_softmax_grad(step_offset(t, s[static_cast<std::size_t>(t)]), pol[static_cast<std::size_t>(t)],
                           s[static_cast<std::size_t>(t) - 1], c, grad);
    return r * r;
  }

  double db(const std::vector<int>& s, std::vector<double>& grad) const {
    const int T = spec_.T;
    double loss = 0.0;
    // source edge: log Z + log P_F(S^T | s0) = log F(S^T)
    auto src = source_policy();
    int sT = s[static_cast<std::size_t>(T)];
    double r0 = log_z() + std::log(src[static_cast<std::size_t>(sT)]) - log_flow(T, sT);
    loss += r0 * r0;
    grad[0] += 2.0 * r0;
    add_log_softmax_grad(1, src, sT, 2.0 * r0, grad);
    grad[flow_offset(T, sT)] -= 2.0 * r0;
    for (int t = 1; t <= T; ++t) {
      int a = s[static_cast<std::size_t>(t)], b = s[static_cast<std::size_t>(t) - 1];
      auto pol = step_policy(t, a);
      double prev = t == 1 ? std::log(spec_.rewards[static_cast<std::size_t>(b)]) : log_flow(t - 1, b);
      double r = log_flow(t, a) + std::log(pol[static_cast<std::size_t>(b)]) - prev - std::log(noising(t, b, a));
      loss += r * r;
      grad[flow_offset(t, a)] += 2.0 * r;
      add_log_softmax_grad(step_offset(t, a), pol, b, 2.0 * r, grad);
      if (t > 1) grad[flow_offset(t - 1, b)] -= 2.0 * r;
    }
    return loss;
  }

  TabularSpec spec_;
  int n_;
  std::vector<double> params_;
};

inline TabularResult evaluate_tabular(const TabularModel& model) {
  const auto& spec = model.spec();
  const int T = spec.T, n = model.num_states();
  TabularResult res;
  auto mu = model.forward_marginals();
  auto back = model.backward_flows();
  double total = std::accumulate(spec.rewards.begin(), spec.rewards.end(), 0.0);
  res.terminal = mu[0];
  for (double r : spec.rewards) res.target.push_back(r / total);
  for (int s = 0; s < n; ++s)
    res.l1 += std::abs(res.terminal[static_cast<std::size_t>(s)] - res.target[static_cast<std::size_t>(s)]);
  res.log_z = model.log_z();
  res.log_z_target = std::log(total);
  double z = std::exp(res.log_z);
  auto add = [&](int t, int s, double f, double b) {
    res.residuals.push_back({t, s, f, b, std::abs(f - b)});
    res.max_residual = std::max(res.max_residual, std::abs(f - b));
  };
  add(T + 1, 0, z, total);
  for (int t = T; t >= 1; --t)
    for (int s = 0; s < n; ++s)
      add(t, s, z * mu[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)],
          back[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)]);
  return res;
}

/// Trains on trajectories drawn by noising uniformly chosen terminal states,
/// with Adam and a linearly decaying learning rate.
inline TabularResult tabular_mode(const TabularSpec& spec) {
  TabularModel model(spec);
  const auto& sp = model.spec();
  const int n = model.num_states();
  Rng rng = make_rng(sp.seed, {stream::kTabular});
  OptimizerConfig opt{OptimizerKind::adam, sp.lr};
  OptimizerState st;
  std::vector<double> grad(model.params().size());
  std::vector<int> states(static_cast<std::size_t>(sp.T) + 1);
  double last = 0.0;
  for (int step = 0; step < sp.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (int b = 0; b < sp.batch; ++b) {
      states[0] = rng.uniform_int(n);
      for (int t = 1; t <= sp.T; ++t) {
        // per-residue resample with probability beta
        int prev = states[static_cast<std::size_t>(t) - 1], next = 0, place = 1;
        for (int j = 0; j < sp.m; ++j) {
          int d = prev % sp.K;
          if (rng.uniform() < sp.betas[static_cast<std::size_t>(t) - 1]) d = rng.uniform_int(sp.K);
          next += d * place;
          place *= sp.K;
          prev /= sp.K;
        }
        states[static_cast<std::size_t>(t)] = next;
      }
      loss += model.loss_and_grad(states, grad);
    }
    for (auto& g : grad) g /= sp.batch;
    double lr = sp.lr * (1.0 - 0.99 * static_cast<double>(step) / std::max(1, sp.steps));
    optimizer_step(opt, st, model.params(), grad, lr);
    last = loss / sp.batch;
  }
  TabularResult res = evaluate_tabular(model);
  res.final_loss = last;
  return res;
}

}  // namespace abflow
