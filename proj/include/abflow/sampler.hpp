#pragma once

// Ancestral sampling: draw S^T from the priors and run the reverse kernels
// down to S^0. Everything here works in the normalized model frame of a
// RegionView; generate_batch maps results back to angstrom for scoring.

#include <cstdint>
#include <string>
#include <vector>

#include "abflow/dataio.hpp"
#include "abflow/denoiser.hpp"
#include "abflow/kernels.hpp"
#include "abflow/objectives.hpp"
#include "abflow/reward.hpp"
#include "abflow/rng.hpp"

namespace abflow {

/// Uniform types, standard normal positions (model frame, centered on the
/// anchor midpoint) and Haar orientations.
inline CdrState init_prior(int m, int T, Rng& rng, int num_types = kNumTypes) {
  if (m < 1) throw std::invalid_argument("init_prior: m must be >= 1");
  CdrState s;
  s.t = T;
  s.residues.reserve(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) {
    ResidueState r;
    r.dtype = rng.uniform_int(num_types);
    r.pos = Vec3(rng.normal(), rng.normal(), rng.normal());
    r.ori = sample_uniform(rng);
    s.residues.push_back(r);
  }
  return s;
}

namespace detail {

inline void require_finite_state(const CdrState& s, int t) {
  for (const auto& r : s.residues)
    if (!r.pos.allFinite() || !r.ori.matrix().allFinite())
      throw ad::NumericError("denoise: non-finite state at step " + std::to_string(t));
}

}  // namespace detail

/// One reverse transition S^t -> S^{t-1}. The last step (t = 1) is
/// deterministic: categorical argmax, the reverse mean and the H output.
inline CdrState reverse_step(const CdrState& s_t, const ComplexContext& context, const ModelRef& model, Rng& rng) {
  const int t = s_t.t, T = model.sched.T();
  auto out = predict({s_t, context, t, T, &model.sched.type}, model.params, model.arch);
  auto mu = pos_reverse_mean(s_t, context, out.eps_hat, t, model.sched.pos);
  CdrState next;
  next.t = t - 1;
  next.residues.reserve(s_t.size());
  for (std::size_t j = 0; j < s_t.size(); ++j) {
    ResidueState r;
    if (t == 1) {
      r.dtype = out.type_probs[j].argmax();
      r.pos = mu[j];
      r.ori = out.ori_hat[j];
    } else {
      r.dtype = out.type_probs[j].sample(rng);
      r.pos = IsoGaussian3(mu[j], model.sched.pos.beta(t)).sample(rng);
      r.ori = sample(ori_reverse_dist(out.ori_hat[j], t, model.sched.ori), rng);
    }
    next.residues.push_back(r);
  }
  detail::require_finite_state(next, t - 1);
  return next;
}

/// Runs the reverse chain from `s` (at timestep s.t) to t = 0. When `trace`
/// is given it receives every intermediate state, starting with `s`.
inline CdrState denoise(CdrState s, const ComplexContext& context, const ModelRef& model, Rng& rng,
                        std::vector<CdrState>* trace = nullptr) {
  if (s.t < 0 || s.t > model.sched.T()) throw std::invalid_argument("denoise: timestep out of range");
  detail::require_finite_state(s, s.t);
  if (trace) trace->push_back(s);
  while (s.t > 0) {
    s = reverse_step(s, context, model, rng);
    if (trace) trace->push_back(s);
  }
  return s;
}

struct SampleRequest {
  std::string id;
  std::string region;
  int n = 1;
  std::uint64_t base_seed = 0;
};

struct GeneratedSample {
  std::uint64_t seed = 0;
  CdrState state;  ///< angstrom frame
  EnergyTerms energy;
  RewardValue reward;
};

inline Rng sample_rng(std::uint64_t seed) { return make_rng(seed, {stream::kSample}); }

/// Sample i uses seed base_seed + i and depends on nothing else.
inline std::vector<GeneratedSample> generate_batch(const RegionView& view, const SampleRequest& req,
                                                   const ModelRef& model, const EnergyModel& energy_model,
                                                   double alpha) {
  if (req.n < 1) throw std::invalid_argument("generate_batch: n must be >= 1");
  if (view.region != req.region || view.id != req.id)
    throw std::invalid_argument("generate_batch: request does not match the region view");
  const int m = static_cast<int>(view.s0_model.size());
  std::vector<GeneratedSample> out;
  out.reserve(static_cast<std::size_t>(req.n));
  for (int i = 0; i < req.n; ++i) {
    GeneratedSample g;
    g.seed = req.base_seed + static_cast<std::uint64_t>(i);
    Rng rng = sample_rng(g.seed);
    CdrState s0 = denoise(init_prior(m, model.sched.T(), rng, model.arch.num_types), view.context_model, model, rng);
    g.state = to_global(s0, view.frame);
    g.energy = energy_terms(g.state, view.context_global, energy_model);
    g.reward = reward_transform(g.energy.dg, alpha);
    out.push_back(std::move(g));
  }
  return out;
}

inline SampleRecord to_record(const RegionView& view, const GeneratedSample& g) {
  SampleRecord r;
  r.id = view.id;
  r.region = view.region;
  r.seed = g.seed;
  r.sequence = sequence_of(g.state);
  for (const auto& res : g.state.residues) {
    r.positions.push_back(res.pos);
    r.quats.push_back(res.ori.quaternion());
  }
  r.energy = g.energy.dg;
  r.e_total = g.energy.e_total;
  r.reward = g.reward.reward;
  return r;
}

}  // namespace abflow
