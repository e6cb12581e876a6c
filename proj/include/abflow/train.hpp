#pragma once

// Two-phase training: diffusion losses only for warm_steps, then the
// balance term (TB or DB) added with weight w for tb_steps. Every step draws
// from its own stream make_rng(seed, {kTrainBatch, step}), so a run resumed
// from a checkpoint at step k continues exactly as the uninterrupted run.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "abflow/checkpoint.hpp"
#include "abflow/config.hpp"
#include "abflow/dataio.hpp"
#include "abflow/denoiser.hpp"
#include "abflow/objectives.hpp"
#include "abflow/optim.hpp"
#include "abflow/reward.hpp"
#include "abflow/sampler.hpp"

namespace abflow {

/// One training example: a CDR region with its cached reward.
struct TrainItem {
  RegionView view;
  RewardValue reward;
};

/// Builds training items for `region`; records without it are skipped.
inline std::vector<TrainItem> make_train_items(const std::vector<ComplexRecord>& dataset, const RewardCache& cache,
                                               const std::string& region, double pos_scale) {
  std::vector<TrainItem> items;
  for (const auto& rec : dataset) {
    if (!rec.cdr_regions.count(region)) continue;
    const RewardRecord* r = cache.find(rec.id, region);
    if (!r) throw DataError("reward cache has no entry for '" + rec.id + "' " + region);
    items.push_back({extract_region(rec, region, pos_scale), reward_transform(r->energy, cache.alpha)});
  }
  if (items.empty()) throw DataError("no training examples carry region " + region);
  return items;
}

struct StepLog {
  std::int64_t step = 0;
  int phase = 1;
  LossBreakdown loss;
  bool has_gfn = false;
  double log_z = 0.0;

  std::string to_json_line(BalanceObjective obj) const {
    json j{{"step", step},       {"phase", phase},         {"l_type", loss.l_type}, {"l_pos", loss.l_pos},
           {"l_ori", loss.l_ori}, {"log_Z", log_z},          {"w", loss.w},           {"combined", loss.combined}};
    const char* key = obj == BalanceObjective::trajectory ? "l_tb" : "l_db";
    j[key] = has_gfn ? json(loss.l_gfn) : json(nullptr);
    return j.dump();
  }
};

class TrainingNumericError : public ad::NumericError {
 public:
  TrainingNumericError(std::int64_t step, const std::string& what)
      : ad::NumericError("training step " + std::to_string(step) + ": " + what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

struct TrainState {
  ParamVector params;
  OptimizerState opt;
  std::int64_t step = 0;  ///< completed steps
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_log;
  /// Called after step `state.step` completed when it is a checkpoint step.
  std::function<void(const TrainState&)> on_checkpoint;
};

inline Rng train_rng(std::uint64_t seed, std::int64_t step) {
  return make_rng(seed, {stream::kTrainBatch, static_cast<std::uint64_t>(step)});
}

namespace detail {

/// log R of the fully denoised state, used by the detailed-balance flows.
inline double denoised_log_reward(const CdrState& s, const TrainItem& item, const ModelRef& model,
                                  const EnergyModel& em, double alpha, Rng& rng) {
  CdrState s0 = denoise(s, item.view.context_model, model, rng);
  double e = energy(to_global(s0, item.view.frame), item.view.context_global, em);
  return clamped_log_reward(reward_transform(e, alpha));
}

}  // namespace detail

/// Runs one optimizer step on `state` and returns its log entry.
inline StepLog train_step(TrainState& state, const std::vector<TrainItem>& items, const RunConfig& cfg,
                          const ScheduleSet& sched) {
  const std::int64_t step = state.step;
  const bool phase2 = step >= cfg.train.warm_steps;
  const double w = phase2 ? cfg.w : 0.0;
  Rng rng = train_rng(cfg.seed, step);
  const int T = sched.T(), n = cfg.train.batch;
  const ModelRef model{state.params, cfg.arch, sched};

  ad::Tape tape;
  BoundParams bound = bind(tape, state.params, true);
  std::vector<ad::Var> lt, lp, lo, lg;
  // diffusion terms first, so both phases consume the same draws for them
  std::vector<std::size_t> picks;
  for (int b = 0; b < n; ++b) {
    auto idx = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(items.size())));
    picks.push_back(idx);
    const TrainItem& it = items[idx];
    const int t = 1 + rng.uniform_int(T);
    NoisedState noised = noise_to(it.view.s0_model, t, sched, rng);
    HeadVars heads = forward(tape, bound, {noised.state, it.view.context_model, t, T, &sched.type}, cfg.arch);
    auto l = diffusion_losses(heads, it.view.s0_model, noised, t, sched, cfg.arch.num_types);
    lt.push_back(l.type);
    lp.push_back(l.pos);
    lo.push_back(l.ori);
  }
  if (phase2) {
    for (int b = 0; b < n; ++b) {
      const TrainItem& it = items[picks[static_cast<std::size_t>(b)]];
      const int g = 1 + rng.uniform_int(T);
      Trajectory tr = sample_trajectory(it.view.context_model, it.view.s0_model, model, rng, g);
      if (cfg.train.objective == BalanceObjective::trajectory) {
        lg.push_back(tb_loss(bound, tr, it.view.context_model, it.reward, cfg.arch, sched));
      } else {
        const auto& s_t = tr.states[static_cast<std::size_t>(g)];
        const auto& s_prev = tr.states[static_cast<std::size_t>(g - 1)];
        double lr_t = detail::denoised_log_reward(s_t, it, model, cfg.energy, cfg.alpha, rng);
        double lr_prev = g == 1 ? clamped_log_reward(it.reward)
                                : detail::denoised_log_reward(s_prev, it, model, cfg.energy, cfg.alpha, rng);
        DbTransition d{s_t, s_prev, g, lr_t, lr_prev, tr.bwd_logp[static_cast<std::size_t>(g - 1)]};
        lg.push_back(db_loss(bound, d, it.view.context_model, cfg.arch, sched));
      }
    }
  }
  auto mean_of = [&](const std::vector<ad::Var>& xs) {
    ad::Var s = xs.front();
    for (std::size_t i = 1; i < xs.size(); ++i) s = ad::add(s, xs[i]);
    return ad::scale(s, 1.0 / static_cast<double>(xs.size()));
  };
  ad::Var l_type = mean_of(lt), l_pos = mean_of(lp), l_ori = mean_of(lo);
  ad::Var total = ad::add(ad::add(l_type, l_pos), l_ori);
  std::optional<ad::Var> l_gfn;
  if (phase2) {
    l_gfn = mean_of(lg);
    total = ad::add(total, ad::scale(*l_gfn, w));
  }

  StepLog log;
  log.step = step;
  log.phase = phase2 ? 2 : 1;
  log.loss = combined_loss(l_type.scalar(), l_pos.scalar(), l_ori.scalar(), l_gfn ? l_gfn->scalar() : 0.0, w);
  log.has_gfn = l_gfn.has_value();
  log.log_z = state.params.log_z();
  if (!std::isfinite(log.loss.combined)) throw TrainingNumericError(step, "non-finite combined loss");

  ParamVector grad = backprop(tape, bound, total);
  for (double g : grad.data())
    if (!std::isfinite(g)) throw TrainingNumericError(step, "non-finite gradient");
  optimizer_step(cfg.optim, state.opt, state.params.data(), grad.data(), cfg.optim.lr);
  ++state.step;
  return log;
}

inline TrainState initial_state(const RunConfig& cfg) { return {init_params(cfg.seed, cfg.arch), {}, 0}; }

/// The log_Z that zeroes the mean TB residual over `draws` teacher-forced
/// trajectories: mean of log R + sum log q - sum log p.
inline double calibrate_log_z(const ParamVector& params, const std::vector<TrainItem>& items, const RunConfig& cfg,
                              const ScheduleSet& sched, int draws, Rng& rng) {
  const ModelRef model{params, cfg.arch, sched};
  double sum = 0.0;
  for (int i = 0; i < draws; ++i) {
    const TrainItem& it = items[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(items.size())))];
    Trajectory tr = sample_trajectory(it.view.context_model, it.view.s0_model, model, rng, 1);
    sum += clamped_log_reward(it.reward) + tr.sum_bwd() - tr.sum_fwd();
  }
  return sum / draws;
}

/// Trains from `state` until warm_steps + tb_steps steps are complete.
/// NumericError inside a step is rethrown as TrainingNumericError with the
/// state left at the last good step.
inline void train(TrainState& state, const std::vector<TrainItem>& items, const RunConfig& cfg,
                  const TrainHooks& hooks = {}) {
  const ScheduleSet sched = cfg.schedules();
  const std::int64_t total = static_cast<std::int64_t>(cfg.train.warm_steps) + cfg.train.tb_steps;
  while (state.step < total) {
    if (state.step == cfg.train.warm_steps && cfg.train.log_z_calibration > 0 &&
        cfg.train.objective == BalanceObjective::trajectory) {
      Rng rng = make_rng(cfg.seed, {stream::kTrainSample, static_cast<std::uint64_t>(state.step)});
      state.params.log_z() = calibrate_log_z(state.params, items, cfg, sched, cfg.train.log_z_calibration, rng);
    }
    TrainState before = state;
    StepLog log;
    try {
      log = train_step(state, items, cfg, sched);
    } catch (const TrainingNumericError&) {
      state = std::move(before);
      throw;
    } catch (const ad::NumericError& e) {
      state = std::move(before);
      throw TrainingNumericError(state.step, e.what());
    }
    if (hooks.on_log && (log.step % cfg.train.log_every == 0 || state.step == total)) hooks.on_log(log);
    if (hooks.on_checkpoint && cfg.train.checkpoint_every > 0 && state.step % cfg.train.checkpoint_every == 0 &&
        state.step != total)
      hooks.on_checkpoint(state);
  }
}

/// Mean diffusion loss on a fixed set of draws; used to compare parameters.
inline double held_out_diffusion_loss(const ParamVector& params, const std::vector<TrainItem>& items,
                                      const RunConfig& cfg, int draws, std::uint64_t seed) {
  const ScheduleSet sched = cfg.schedules();
  Rng rng = make_rng(seed, {stream::kTrainSample});
  double sum = 0.0;
  for (int i = 0; i < draws; ++i) {
    const TrainItem& it = items[static_cast<std::size_t>(i) % items.size()];
    const int t = 1 + rng.uniform_int(sched.T());
    NoisedState noised = noise_to(it.view.s0_model, t, sched, rng);
    ad::Tape tape;
    BoundParams b = bind(tape, params, false);
    HeadVars h = forward(tape, b, {noised.state, it.view.context_model, t, sched.T(), &sched.type}, cfg.arch);
    auto l = diffusion_losses(h, it.view.s0_model, noised, t, sched, cfg.arch.num_types);
    sum += l.type.scalar() + l.pos.scalar() + l.ori.scalar();
  }
  return sum / draws;
}

inline Checkpoint make_checkpoint(const TrainState& s, const RunConfig& cfg) {
  Checkpoint c;
  c.meta.arch = cfg.arch.describe();
  c.meta.T = cfg.T;
  c.meta.schedule_digest = schedule_digest(cfg.schedules());
  c.meta.step = s.step;
  c.meta.optimizer = to_string(cfg.optim.kind);
  c.meta.optimizer_step = s.opt.step;
  c.meta.config_digest = config_digest(cfg);
  c.params = s.params;
  c.opt = s.opt;
  return c;
}

/// Restores a training state, rejecting checkpoints from another schedule.
inline TrainState state_from_checkpoint(const Checkpoint& c, const RunConfig& cfg) {
  if (c.meta.T != cfg.T || c.meta.schedule_digest != schedule_digest(cfg.schedules()))
    throw CheckpointError("checkpoint was written with a different noise schedule (T " + std::to_string(c.meta.T) +
                          ", digest " + c.meta.schedule_digest + ")");
  return {c.params, c.opt, c.meta.step};
}

}  // namespace abflow
