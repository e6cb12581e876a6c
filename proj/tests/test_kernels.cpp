#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "abflow/kernels.hpp"
#include "test_util.hpp"

using namespace abflow;

namespace {

constexpr double kPi = std::numbers::pi;

double dense_gaussian_log_pdf(const Vec3& x, const Vec3& mu, double var) {
  // full-covariance formula with Sigma = var * I
  Mat3 cov = var * Mat3::Identity();
  Vec3 d = x - mu;
  return -0.5 * d.dot(cov.inverse() * d) - 0.5 * std::log(std::pow(2.0 * kPi, 3) * cov.determinant());
}

}  // namespace

TEST(TypeKernel, ForwardStepCases) {
  auto p0 = type_forward_step(7, 0.0);
  for (int k = 0; k < kNumTypes; ++k) EXPECT_EQ(p0.prob(k), k == 7 ? 1.0 : 0.0);
  auto p1 = type_forward_step(7, 1.0);
  for (int k = 0; k < kNumTypes; ++k) EXPECT_DOUBLE_EQ(p1.prob(k), 0.05);
  auto p = type_forward_step(3, 0.2);
  for (int k = 0; k < kNumTypes; ++k) EXPECT_NEAR(p.prob(k), k == 3 ? 0.81 : 0.01, 1e-15);
}

TEST(TypeKernel, MarginalCases) {
  auto p = type_marginal(4, 1.0);
  for (int k = 0; k < kNumTypes; ++k) EXPECT_EQ(p.prob(k), k == 4 ? 1.0 : 0.0);
  auto q = type_marginal(0, 0.5);
  for (int k = 0; k < kNumTypes; ++k) EXPECT_NEAR(q.prob(k), k == 0 ? 0.525 : 0.025, 1e-15);
}

TEST(TypeKernel, TwoStepCompositionOracle) {
  for (double b1 : {0.01, 0.2, 0.7})
    for (double b2 : {0.05, 0.5}) {
      for (int d0 = 0; d0 < kNumTypes; d0 += 3) {
        std::vector<double> brute(kNumTypes, 0.0);
        auto first = type_forward_step(d0, b1);
        for (int mid = 0; mid < kNumTypes; ++mid) {
          auto second = type_forward_step(mid, b2);
          for (int k = 0; k < kNumTypes; ++k) brute[k] += first.prob(mid) * second.prob(k);
        }
        auto closed = type_marginal(d0, (1 - b1) * (1 - b2));
        for (int k = 0; k < kNumTypes; ++k) EXPECT_NEAR(brute[k], closed.prob(k), 1e-12);
      }
    }
}

TEST(TypeKernel, PosteriorEnumerationOracle) {
  auto sched = make_schedule(ScheduleKind::linear, 10, 1e-4, 0.3, Channel::type);
  double worst = 0.0;
  for (int t = 1; t <= 10; ++t)
    for (int dt = 0; dt < kNumTypes; ++dt)
      for (int d0 = 0; d0 < kNumTypes; ++d0) {
        auto post = type_posterior(dt, d0, t, sched);
        std::vector<double> w(kNumTypes);
        double z = 0.0;
        for (int prev = 0; prev < kNumTypes; ++prev) {
          double lik = type_forward_step(prev, sched.beta(t)).prob(dt);
          double prior = t == 1 ? (prev == d0 ? 1.0 : 0.0) : type_marginal(d0, sched.alpha_bar(t - 1)).prob(prev);
          w[prev] = lik * prior;
          z += w[prev];
        }
        for (int k = 0; k < kNumTypes; ++k) worst = std::max(worst, std::abs(post.prob(k) - w[k] / z));
      }
  EXPECT_LT(worst, 1e-12);
}

TEST(TypeKernel, PosteriorDegenerateCases) {
  auto sched = make_schedule(ScheduleKind::linear, 5, 0.1, 0.3, Channel::type);
  auto p = type_posterior(9, 2, 1, sched);
  for (int k = 0; k < kNumTypes; ++k) EXPECT_NEAR(p.prob(k), k == 2 ? 1.0 : 0.0, 1e-15);

  // pure resample at step 2: flat likelihood, posterior = prior marginal
  NoiseSchedule flat(Channel::type, ScheduleKind::linear, {0.3, 1.0 - 1e-15});
  auto post = type_posterior(5, 1, 2, flat);
  auto marg = type_marginal(1, flat.alpha_bar(1));
  for (int k = 0; k < kNumTypes; ++k) EXPECT_NEAR(post.prob(k), marg.prob(k), 1e-12);
  EXPECT_THROW(type_posterior(0, 0, 0, sched), std::invalid_argument);
}

TEST(TypeKernel, FlooredLogProbFinite) {
  auto p = type_forward_step(0, 0.0);
  EXPECT_TRUE(std::isfinite(p.log_prob(5)));
  EXPECT_NEAR(p.log_prob(5), std::log(kProbFloor), 1e-12);
}

TEST(PosKernel, StepLogProbMatchesDenseFormula) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    Vec3 prev(rng.normal(), rng.normal(), rng.normal());
    double beta = 0.01 + 0.5 * rng.uniform();
    auto g = pos_forward_step(prev, beta);
    Vec3 x(rng.normal(), rng.normal(), rng.normal());
    EXPECT_NEAR(g.log_prob(x), dense_gaussian_log_pdf(x, std::sqrt(1 - beta) * prev, beta), 1e-12);
  }
}

TEST(PosKernel, SmallBetaPeaksAtPrevious) {
  Vec3 prev(1, -2, 0.5);
  auto g = pos_forward_step(prev, 1e-8);
  double at = g.log_prob(prev);
  for (Vec3 d : {Vec3(1e-3, 0, 0), Vec3(0, -1e-3, 0), Vec3(0, 0, 1e-3)}) EXPECT_LT(g.log_prob(prev + d), at);
}

TEST(PosKernel, SampleMean) {
  Rng rng(4);
  auto g = pos_forward_step(Vec3(1, 2, 3), 0.1);
  Vec3 m = Vec3::Zero();
  const int n = 100000;
  for (int i = 0; i < n; ++i) m += g.sample(rng);
  m /= n;
  EXPECT_LT((m - std::sqrt(0.9) * Vec3(1, 2, 3)).cwiseAbs().maxCoeff(), 0.02);
}

TEST(PosKernel, MarginalComposition) {
  Vec3 x0(0.3, -1.2, 2.0);
  EXPECT_TRUE(pos_marginal(x0, 1.0).is_point_mass());
  EXPECT_EQ(pos_marginal(x0, 1.0).mean(), x0);
  const double b1 = 0.07, b2 = 0.2;
  // convolution algebra: mean sqrt(1-b2) sqrt(1-b1) x0, var (1-b2) b1 + b2
  auto s1 = pos_forward_step(x0, b1);
  Vec3 mean = std::sqrt(1 - b2) * s1.mean();
  double var = (1 - b2) * s1.variance() + b2;
  auto m = pos_marginal(x0, (1 - b1) * (1 - b2));
  EXPECT_NEAR((mean - m.mean()).norm(), 0.0, 1e-12);
  EXPECT_NEAR(var, m.variance(), 1e-12);

  Rng rng(5);
  const int n = 100000;
  Mat3 cov = Mat3::Zero();
  Vec3 mu = Vec3::Zero();
  std::vector<Vec3> xs;
  for (int i = 0; i < n; ++i) {
    Vec3 x = pos_forward_step(pos_forward_step(x0, b1).sample(rng), b2).sample(rng);
    xs.push_back(x);
    mu += x;
  }
  mu /= n;
  for (const auto& x : xs) cov += (x - mu) * (x - mu).transpose();
  cov /= n - 1;
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(cov(i, i), m.variance(), 0.02 * m.variance());
    for (int j = 0; j < 3; ++j)
      if (i != j) {
        EXPECT_LT(std::abs(cov(i, j)), 0.02 * m.variance());
      }
  }
}

TEST(PosKernel, ReverseMean) {
  auto sched = make_schedule(ScheduleKind::linear, 10, 0.01, 0.2);
  CdrState s;
  s.t = 4;
  s.residues.resize(2);
  s.residues[0].pos = Vec3(1, 2, 3);
  s.residues[1].pos = Vec3(-1, 0, 0.5);
  ComplexContext c;
  std::vector<Vec3> zero(2, Vec3::Zero());
  auto mu = pos_reverse_mean(s, c, zero, 4, sched);
  for (int j = 0; j < 2; ++j) EXPECT_NEAR((mu[j] - s.residues[j].pos / std::sqrt(1 - sched.beta(4))).norm(), 0, 1e-15);

  // affine in eps_hat with the documented slope
  std::vector<Vec3> e(2, Vec3(0.3, -0.1, 0.2));
  auto mu2 = pos_reverse_mean(s, c, e, 4, sched);
  double slope = -sched.beta(4) / (std::sqrt(1 - sched.beta(4)) * std::sqrt(1 - sched.alpha_bar(4)));
  for (int j = 0; j < 2; ++j) EXPECT_NEAR((mu2[j] - mu[j] - slope * e[j]).norm(), 0.0, 1e-14);

  // one-step inversion with the true noise at t = 1
  Rng rng(6);
  for (int i = 0; i < 20; ++i) {
    Vec3 x0(rng.normal(), rng.normal(), rng.normal()), eps(rng.normal(), rng.normal(), rng.normal());
    CdrState s1;
    s1.t = 1;
    s1.residues.resize(1);
    s1.residues[0].pos = std::sqrt(sched.alpha_bar(1)) * x0 + std::sqrt(1 - sched.alpha_bar(1)) * eps;
    std::vector<Vec3> ev{eps};
    EXPECT_LT((pos_reverse_mean(s1, c, ev, 1, sched)[0] - x0).norm(), 1e-9);
  }
}

TEST(OriKernel, MarginalCases) {
  Rotation o0 = exp_map(Vec3(0, 0, 1.3));
  NoiseSchedule none(Channel::ori, ScheduleKind::linear, {0.1});
  auto p0 = ori_forward_marginal(o0, 0, none);
  EXPECT_EQ(p0.variance, 0.0);
  EXPECT_TRUE(p0.mean == o0);

  auto sched = make_schedule(ScheduleKind::linear, 10, 0.01, 0.2);
  auto p = ori_forward_marginal(o0, 6, sched);
  EXPECT_NEAR(p.variance, 1 - sched.alpha_bar(6), 1e-15);
  Rotation expect = exp_map(Vec3(0, 0, 1.3 * std::sqrt(sched.alpha_bar(6))));
  EXPECT_LT((p.mean.matrix() - expect.matrix()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(OriKernel, MarginalNearFullNoise) {
  // with alpha_bar -> 0 the mean goes to the identity and the angle law is
  // IGSO3 with variance 1 - alpha_bar
  auto sched = make_schedule(ScheduleKind::linear, 100, 0.05, 0.3);
  Rng rng(7);
  Rotation o0 = sample_uniform(rng);
  auto p = ori_forward_marginal(o0, 100, sched);
  EXPECT_LT(log_map(p.mean).norm(), 1e-3);
  std::vector<double> angles;
  for (int i = 0; i < 100000; ++i) angles.push_back(log_map(sample(p, rng)).norm());
  double v = p.variance;
  EXPECT_LT(abflow::testing::ks_statistic(angles, [&](double w) { return igso3_angle_density(w, v); }, 0.0, kPi), 0.03);
}

TEST(OriKernel, StepCases) {
  Rotation o = exp_map(Vec3(0.4, -0.2, 0.9));
  auto p = ori_forward_step(o, 0.0);
  EXPECT_TRUE(p.mean == o);
  EXPECT_EQ(p.variance, 0.0);
  auto q = ori_forward_step(o, 0.03);
  EXPECT_EQ(q.variance, 0.03);
}

TEST(OriKernel, StepCompositionSmallBeta) {
  const int t = 10;
  auto sched = make_schedule(ScheduleKind::linear, t, 1e-3, 5e-3);
  Rng rng(8);
  Rotation o0 = exp_map(Vec3(0.5, 0.2, -0.3));
  auto marg = ori_forward_marginal(o0, t, sched);
  std::vector<double> composed, direct;
  for (int i = 0; i < 100000; ++i) {
    Rotation o = o0;
    for (int s = 1; s <= t; ++s) o = sample(ori_forward_step(o, sched.beta(s)), rng);
    composed.push_back(rotation_distance(marg.mean, o));
    direct.push_back(rotation_distance(marg.mean, sample(marg, rng)));
  }
  EXPECT_LT(abflow::testing::ks_two_sample(composed, direct), 0.03);
}

TEST(OriKernel, ReverseDist) {
  auto sched = make_schedule(ScheduleKind::linear, 10, 1e-9, 0.2);
  Rng rng(9);
  Rotation h = sample_uniform(rng);
  auto p = ori_reverse_dist(h, 3, sched);
  EXPECT_EQ(p.variance, sched.beta(3));
  auto tiny = ori_reverse_dist(h, 1, sched);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(rotation_distance(sample(tiny, rng), h), 1e-2);
  double at = log_prob(p, h);
  for (int i = 0; i < 100; ++i) EXPECT_LT(log_prob(p, h * exp_map(sample_unit_vector(rng) * 0.05)), at);
}

TEST(Kernels, EntropyMonteCarlo) {
  Rng rng(10);
  const int n = 100000;
  auto cat = type_marginal(3, 0.6);
  double h = 0.0;
  for (int i = 0; i < n; ++i) h -= cat.log_prob(cat.sample(rng));
  EXPECT_NEAR(h / n, cat.entropy(), 0.01 * cat.entropy());

  IsoGaussian3 g(Vec3(1, 0, -1), 0.3);
  double hg = 0.0;
  for (int i = 0; i < n; ++i) hg -= g.log_prob(g.sample(rng));
  EXPECT_NEAR(hg / n, g.entropy(), 0.01 * std::abs(g.entropy()));

  // differential entropy w.r.t. Haar, compared with quadrature
  for (double eps2 : {0.05, 0.3}) {
    IgSo3Params p{sample_uniform(rng), eps2};
    double quad = -abflow::testing::simpson(
        [&](double w) {
          double d = igso3_angle_density(w, eps2);
          return d > 0 ? d * detail::igso3_log_density(w, eps2).log_f : 0.0;
        },
        1e-9, kPi, 100000);
    double mc = 0.0;
    for (int i = 0; i < n; ++i) mc -= log_prob(p, sample(p, rng));
    EXPECT_NEAR(mc / n, quad, 0.03 * std::abs(quad)) << eps2;
  }
}

TEST(Kernels, PointMassGuards) {
  IsoGaussian3 pm(Vec3::Zero(), 0.0);
  EXPECT_THROW(pm.log_prob(Vec3::Zero()), std::domain_error);
  Rng rng(1);
  EXPECT_EQ(pm.sample(rng), Vec3::Zero());
}
