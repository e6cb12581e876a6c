#include <gtest/gtest.h>

#include <cmath>

#include "abflow/checkpoint.hpp"
#include "abflow/toydata.hpp"
#include "abflow/train.hpp"

using namespace abflow;

namespace {

RunConfig desk_config() {
  RunConfig c;
  c.T = 20;
  ScheduleSpec s{ScheduleKind::linear, 1e-3, 0.3};
  c.type_schedule = c.pos_schedule = c.ori_schedule = s;
  c.optim.kind = OptimizerKind::adam;
  c.optim.lr = 1e-3;
  return c;
}

struct Fixture {
  RunConfig cfg = desk_config();
  std::vector<TrainItem> items;
  explicit Fixture(int complexes = 64) {
    cfg.toy.complexes = complexes;
    auto data = make_toy_dataset(cfg.toy, 1, cfg.energy);
    auto cache = precompute_rewards(data, {"H3"}, cfg.energy, cfg.alpha);
    items = make_train_items(data, cache, "H3", cfg.pos_scale);
  }
};

std::vector<StepLog> run(TrainState& s, const std::vector<TrainItem>& items, const RunConfig& cfg) {
  std::vector<StepLog> logs;
  TrainHooks h;
  h.on_log = [&](const StepLog& l) { logs.push_back(l); };
  train(s, items, cfg, h);
  return logs;
}

}  // namespace

TEST(Train, DeskScaleRunLowersTheLoss) {
  Fixture f;
  TrainState s = initial_state(f.cfg);
  const double before = held_out_diffusion_loss(s.params, f.items, f.cfg, 256, 99);
  auto logs = run(s, f.items, f.cfg);
  ASSERT_EQ(logs.size(), 2200u);
  EXPECT_EQ(s.step, 2200);
  const double after = held_out_diffusion_loss(s.params, f.items, f.cfg, 256, 99);
  EXPECT_LT(after, before);

  auto mean_combined = [&](std::size_t from, std::size_t to) {
    double m = 0.0;
    for (std::size_t i = from; i < to; ++i) m += logs[i].loss.combined;
    return m / static_cast<double>(to - from);
  };
  EXPECT_LT(mean_combined(2150, 2200), mean_combined(0, 50));
  for (const auto& l : logs) {
    EXPECT_EQ(l.phase, l.step < 2000 ? 1 : 2);
    EXPECT_EQ(l.has_gfn, l.step >= 2000);
    EXPECT_NEAR(l.loss.combined, l.loss.l_type + l.loss.l_pos + l.loss.l_ori + l.loss.w * l.loss.l_gfn, 1e-12);
  }
}

TEST(Train, ZeroBalanceStepsIsPureDiffusion) {
  Fixture f(8);
  f.cfg.train.warm_steps = 30;
  f.cfg.train.tb_steps = 0;
  TrainState s = initial_state(f.cfg);
  for (const auto& l : run(s, f.items, f.cfg)) {
    EXPECT_FALSE(l.has_gfn);
    EXPECT_EQ(l.loss.w, 0.0);
    json j = json::parse(l.to_json_line(f.cfg.train.objective));
    EXPECT_TRUE(j.at("l_tb").is_null());
  }
}

TEST(Train, ZeroWeightBalancePhaseMatchesBaseline) {
  // the diffusion draws come first in each step, so w = 0 leaves the
  // parameter path of a diffusion-only run untouched
  Fixture f(8);
  f.cfg.train.warm_steps = 10;
  f.cfg.train.tb_steps = 10;
  f.cfg.w = 0.0;
  f.cfg.train.log_z_calibration = 0;
  TrainState a = initial_state(f.cfg);
  run(a, f.items, f.cfg);
  RunConfig base = f.cfg;
  base.train.warm_steps = 20;
  base.train.tb_steps = 0;
  TrainState b = initial_state(base);
  run(b, f.items, base);
  EXPECT_EQ(a.params.data().size(), b.params.data().size());
  for (std::size_t i = 0; i < a.params.size(); ++i) ASSERT_EQ(a.params[i], b.params[i]) << i;
}

TEST(Train, ResumeReproducesNextStepBitIdentically) {
  Fixture f(8);
  f.cfg.train.warm_steps = 12;
  f.cfg.train.tb_steps = 6;
  TrainState full = initial_state(f.cfg);
  auto logs = run(full, f.items, f.cfg);

  for (int cut : {7, 12, 15}) {
    RunConfig partial = f.cfg;
    TrainState s = initial_state(f.cfg);
    std::optional<Checkpoint> saved;
    partial.train.checkpoint_every = cut;
    TrainHooks h;
    h.on_checkpoint = [&](const TrainState& st) {
      if (st.step == cut) saved = parse_checkpoint(serialize_checkpoint(make_checkpoint(st, f.cfg)), f.cfg.arch);
    };
    train(s, f.items, partial, h);
    ASSERT_TRUE(saved.has_value());
    TrainState resumed = state_from_checkpoint(*saved, f.cfg);
    auto rest = run(resumed, f.items, f.cfg);
    ASSERT_EQ(rest.size(), logs.size() - static_cast<std::size_t>(cut));
    EXPECT_EQ(rest.front().loss.combined, logs[static_cast<std::size_t>(cut)].loss.combined) << cut;
    EXPECT_EQ(rest.front().to_json_line(f.cfg.train.objective),
              logs[static_cast<std::size_t>(cut)].to_json_line(f.cfg.train.objective));
    for (std::size_t i = 0; i < full.params.size(); ++i) ASSERT_EQ(resumed.params[i], full.params[i]);
  }
}

TEST(Train, ScheduleMismatchOnResumeIsRejected) {
  Fixture f(4);
  TrainState s = initial_state(f.cfg);
  Checkpoint c = make_checkpoint(s, f.cfg);
  RunConfig other = f.cfg;
  other.T = 10;
  EXPECT_THROW(state_from_checkpoint(c, other), CheckpointError);
}

TEST(Train, CalibratedLogZCentersTheResidual) {
  Fixture f(8);
  f.cfg.train.warm_steps = 20;
  f.cfg.train.tb_steps = 1;
  f.cfg.train.log_z_calibration = 64;
  TrainState s = initial_state(f.cfg);
  auto logs = run(s, f.items, f.cfg);
  const double log_z = logs.back().log_z;
  // the residual at the calibrated log_Z averages to zero over fresh draws
  const ScheduleSet sched = f.cfg.schedules();
  const ModelRef model{s.params, f.cfg.arch, sched};
  Rng rng(5);
  double mean = 0.0, sq = 0.0;
  const int n = 64;
  for (int i = 0; i < n; ++i) {
    const TrainItem& it = f.items[static_cast<std::size_t>(i) % f.items.size()];
    Trajectory tr = sample_trajectory(it.view.context_model, it.view.s0_model, model, rng, 1);
    double d = log_z + tr.sum_fwd() - clamped_log_reward(it.reward) - tr.sum_bwd();
    mean += d;
    sq += d * d;
  }
  mean /= n;
  const double sd = std::sqrt(sq / n - mean * mean);
  // two independent 64-draw means: 4 sigma of their difference
  EXPECT_LT(std::abs(mean), 4.0 * std::sqrt(2.0) * sd / std::sqrt(static_cast<double>(n)));
}

TEST(Train, NumericFailureKeepsLastGoodState) {
  Fixture f(4);
  f.cfg.train.warm_steps = 5;
  f.cfg.train.tb_steps = 0;
  TrainState s = initial_state(f.cfg);
  run(s, f.items, f.cfg);
  TrainState snapshot = s;
  s.params[3] = std::nan("");
  RunConfig more = f.cfg;
  more.train.warm_steps = 10;
  TrainState bad = s;
  try {
    train(bad, f.items, more);
    FAIL() << "expected a numeric failure";
  } catch (const TrainingNumericError& e) {
    EXPECT_EQ(e.step(), 5);
    EXPECT_NE(std::string(e.what()).find("training step 5"), std::string::npos);
  }
  EXPECT_EQ(bad.step, 5);
  EXPECT_TRUE(std::isnan(bad.params[3]));
  EXPECT_EQ(bad.params[4], snapshot.params[4]);
}
