#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "abflow/sampler.hpp"
#include "abflow/toydata.hpp"
#include "fixtures.hpp"

using namespace abflow;
using namespace abflow::testing;

namespace {

ScheduleSet small_schedules(int T, double lo = 1e-4, double hi = 0.1) {
  ScheduleSpec s{ScheduleKind::linear, lo, hi};
  return make_schedule_set(T, s, s, s);
}

RegionView toy_view(const EnergyModel& m) {
  ToyDataConfig cfg;
  cfg.complexes = 1;
  return extract_region(make_toy_complex(cfg, 3, 0, m), "H3", 10.0);
}

}  // namespace

TEST(InitPrior, TypesAreUniform) {
  Rng rng(1);
  std::vector<double> counts(kNumTypes, 0.0);
  const int n = 100000;
  for (int i = 0; i < n / 10; ++i)
    for (const auto& r : init_prior(10, 5, rng).residues) counts[static_cast<std::size_t>(r.dtype)] += 1;
  double chi2 = 0.0, e = static_cast<double>(n) / kNumTypes;
  for (double c : counts) chi2 += (c - e) * (c - e) / e;
  // chi-square with 19 dof: p = 0.01 at 36.19
  EXPECT_LT(chi2, 36.19);
}

TEST(InitPrior, PositionsCenteredOnAnchorMidpoint) {
  // the model frame puts the anchor midpoint at the origin
  Rng rng(2);
  Vec3 mean = Vec3::Zero();
  const int n = 100000;
  for (int i = 0; i < n; ++i) mean += init_prior(1, 5, rng).residues[0].pos;
  mean /= n;
  for (int k = 0; k < 3; ++k) EXPECT_LT(std::abs(mean[k]), 0.02);

  // and mapped back to angstrom it lands on the anchor midpoint
  EnergyModel m = default_energy_model();
  RegionView v = toy_view(m);
  Vec3 gmean = Vec3::Zero();
  Rng rng2(3);
  for (int i = 0; i < n; ++i) gmean += v.frame.to_global(init_prior(1, 5, rng2).residues[0].pos);
  gmean /= n;
  EXPECT_LT((gmean - v.frame.center).cwiseAbs().maxCoeff(), 0.02 * v.frame.scale);
}

TEST(InitPrior, OrientationsAreHaar) {
  Rng rng(4);
  std::vector<double> angles;
  for (int i = 0; i < 100000; ++i) angles.push_back(rotation_distance(Rotation(), init_prior(1, 5, rng).residues[0].ori));
  auto haar = [](double w) { return (1.0 - std::cos(w)) / std::numbers::pi; };
  EXPECT_LT(ks_statistic(angles, haar, 0.0, std::numbers::pi), 0.02);
}

TEST(InitPrior, RejectsEmpty) {
  Rng rng(1);
  EXPECT_THROW(init_prior(0, 5, rng), std::invalid_argument);
}

TEST(Denoise, DeterministicAndFinite) {
  ArchConfig arch = small_arch();
  ParamVector p = random_params(9, arch);
  ScheduleSet sched = small_schedules(8);
  ModelRef model{p, arch, sched};
  Rng c_rng(5);
  ComplexContext ctx = random_context(c_rng, 16);
  auto run = [&] {
    Rng rng = sample_rng(77);
    return denoise(init_prior(6, 8, rng), ctx, model, rng);
  };
  CdrState a = run(), b = run();
  ASSERT_EQ(a.t, 0);
  for (std::size_t j = 0; j < a.size(); ++j) {
    EXPECT_EQ(a.residues[j].dtype, b.residues[j].dtype);
    EXPECT_EQ(a.residues[j].pos, b.residues[j].pos);
    EXPECT_EQ(a.residues[j].ori.matrix(), b.residues[j].ori.matrix());
  }
}

TEST(Denoise, ZeroParamsStayWithinPriorScale) {
  ArchConfig arch = small_arch();
  ParamVector p = init_params(1, arch);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = 0.0;
  ScheduleSet sched = small_schedules(20);
  ModelRef model{p, arch, sched};
  Rng c_rng(6);
  ComplexContext ctx = random_context(c_rng, 16);
  for (int s = 0; s < 20; ++s) {
    Rng rng = sample_rng(static_cast<std::uint64_t>(s));
    CdrState out = denoise(init_prior(5, 20, rng), ctx, model, rng);
    for (const auto& r : out.residues) {
      ASSERT_TRUE(r.pos.allFinite());
      EXPECT_LT(r.pos.norm(), 10.0 * std::sqrt(3.0) * 4.0);
    }
  }
}

TEST(Denoise, DegenerateSingleStepIsNearIdentity) {
  ArchConfig arch = small_arch();
  ParamVector p = random_params(2, arch);
  ScheduleSet sched = small_schedules(1, 1e-9, 1e-9);
  ModelRef model{p, arch, sched};
  Rng c_rng(7);
  ComplexContext ctx = random_context(c_rng, 12);
  for (int s = 0; s < 10; ++s) {
    Rng rng = sample_rng(static_cast<std::uint64_t>(100 + s));
    CdrState prior = init_prior(5, 1, rng);
    CdrState out = denoise(prior, ctx, model, rng);
    for (std::size_t j = 0; j < out.size(); ++j) {
      EXPECT_EQ(out.residues[j].dtype, prior.residues[j].dtype);
      EXPECT_LT((out.residues[j].pos - prior.residues[j].pos).norm(), 1e-3);
    }
  }
}

TEST(Denoise, TraceHasEveryStep) {
  ArchConfig arch = small_arch();
  ParamVector p = random_params(3, arch);
  ScheduleSet sched = small_schedules(5);
  ModelRef model{p, arch, sched};
  Rng c_rng(8);
  ComplexContext ctx = random_context(c_rng, 12);
  Rng rng = sample_rng(1);
  std::vector<CdrState> trace;
  denoise(init_prior(4, 5, rng), ctx, model, rng, &trace);
  ASSERT_EQ(trace.size(), 6u);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(trace[static_cast<std::size_t>(i)].t, 5 - i);
}

TEST(Denoise, NonFiniteInputFailsWithStep) {
  ArchConfig arch = small_arch();
  ParamVector p = random_params(3, arch);
  ScheduleSet sched = small_schedules(5);
  ModelRef model{p, arch, sched};
  Rng rng(1);
  ComplexContext ctx = random_context(rng, 12);
  CdrState s = init_prior(4, 5, rng);
  s.residues[1].pos.x() = std::nan("");
  try {
    denoise(s, ctx, model, rng);
    FAIL();
  } catch (const ad::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 5"), std::string::npos);
  }
}

class GenerateBatch : public ::testing::Test {
 protected:
  EnergyModel em = default_energy_model();
  RegionView view = toy_view(em);
  ArchConfig arch = small_arch();
  ParamVector p = random_params(4, arch);
  ScheduleSet sched = small_schedules(6);
  ModelRef model{p, arch, sched};
  SampleRequest req(int n) const { return {view.id, view.region, n, 1000}; }
};

TEST_F(GenerateBatch, SingleSampleEqualsDirectDenoise) {
  auto batch = generate_batch(view, req(1), model, em, 0.1);
  ASSERT_EQ(batch.size(), 1u);
  Rng rng = sample_rng(1000);
  CdrState direct = to_global(
      denoise(init_prior(static_cast<int>(view.s0_model.size()), 6, rng), view.context_model, model, rng), view.frame);
  for (std::size_t j = 0; j < direct.size(); ++j) {
    EXPECT_EQ(batch[0].state.residues[j].dtype, direct.residues[j].dtype);
    EXPECT_EQ(batch[0].state.residues[j].pos, direct.residues[j].pos);
  }
  EXPECT_EQ(batch[0].energy.dg, energy(direct, view.context_global, em));
  EXPECT_EQ(batch[0].reward.reward, std::exp(-0.1 * batch[0].energy.dg));
}

TEST_F(GenerateBatch, SampleIndependentOfBatchSize) {
  auto a = generate_batch(view, req(10), model, em, 0.1);
  auto b = generate_batch(view, req(100), model, em, 0.1);
  auto c = generate_batch(view, req(100), model, em, 0.1);
  EXPECT_EQ(a[5].seed, 1005u);
  EXPECT_EQ(serialize_samples({to_record(view, a[5])}), serialize_samples({to_record(view, b[5])}));
  std::vector<SampleRecord> rb, rc;
  for (std::size_t i = 0; i < b.size(); ++i) {
    rb.push_back(to_record(view, b[i]));
    rc.push_back(to_record(view, c[i]));
  }
  EXPECT_EQ(serialize_samples(rb), serialize_samples(rc));
}

TEST_F(GenerateBatch, RejectsBadRequest) {
  EXPECT_THROW(generate_batch(view, req(0), model, em, 0.1), std::invalid_argument);
  SampleRequest r = req(1);
  r.region = "L1";
  EXPECT_THROW(generate_batch(view, r, model, em, 0.1), std::invalid_argument);
}
